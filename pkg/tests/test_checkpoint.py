import json

import numpy as np
import pytest

from dsem_lab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dsem_lab.detector import Detector, DetectorConfig
from dsem_lab.nn import Conv2d, Module, rng_stream


def _state(rng):
    return {
        "a.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "a.bias": rng.standard_normal(4).astype(np.float32),
        "b.weight": np.array([[np.float32(1e-30), -0.0, np.inf]], dtype=np.float32),
    }


def test_roundtrip_bitwise(tmp_path, rng):
    state = _state(rng)
    save_checkpoint(state, tmp_path / "c1")
    back = load_checkpoint(tmp_path / "c1")
    assert list(back) == list(state)
    for k in state:
        assert back[k].dtype == np.float32 and back[k].tobytes() == state[k].tobytes()


def test_resave_byte_identical(tmp_path, rng):
    save_checkpoint(_state(rng), tmp_path / "c1")
    save_checkpoint(load_checkpoint(tmp_path / "c1"), tmp_path / "c2")
    for f in ("manifest.json", "weights.bin"):
        assert (tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes()


def test_blob_is_little_endian_in_manifest_order(tmp_path):
    save_checkpoint({"x": np.array([1.0, 2.0], np.float32), "y": np.array([3.0], np.float32)}, tmp_path / "c")
    raw = (tmp_path / "c" / "weights.bin").read_bytes()
    assert raw == np.array([1.0, 2.0, 3.0], dtype="<f4").tobytes()
    params = json.loads((tmp_path / "c" / "manifest.json").read_text())["params"]
    assert [(p["name"], p["offset"], p["length"]) for p in params] == [("x", 0, 8), ("y", 8, 4)]


def test_truncated_blob(tmp_path, rng):
    save_checkpoint(_state(rng), tmp_path / "c")
    blob = tmp_path / "c" / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "c")


def test_unknown_name_listed(tmp_path, rng):
    save_checkpoint({**_state(rng), "ghost.weight": np.zeros(2, np.float32)}, tmp_path / "c")
    expected = {k: v.shape for k, v in _state(rng).items()}
    with pytest.raises(CheckpointError, match="ghost.weight"):
        load_checkpoint(tmp_path / "c", expected)


def test_shape_mismatch_names_parameter(tmp_path, rng):
    save_checkpoint(_state(rng), tmp_path / "c")
    expected = {k: v.shape for k, v in _state(rng).items()}
    expected["a.bias"] = (5,)
    with pytest.raises(CheckpointError, match="a.bias"):
        load_checkpoint(tmp_path / "c", expected)


def test_declared_length_mismatch(tmp_path, rng):
    save_checkpoint(_state(rng), tmp_path / "c")
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    m["params"][1]["shape"] = [5]
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="a.bias"):
        load_checkpoint(tmp_path / "c")


def test_missing_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_model_state_roundtrip(tmp_path):
    det = Detector(DetectorConfig(), seed=3)
    save_checkpoint(det.state_dict(), tmp_path / "c")
    other = Detector(DetectorConfig(), seed=4)
    other.load_state_dict(load_checkpoint(tmp_path / "c"))
    for (n, p), (m, q) in zip(det.named_parameters(), other.named_parameters()):
        assert n == m and p.data.tobytes() == q.data.tobytes()


def test_module_load_rejects_wrong_shape():
    class Net(Module):
        def __init__(self, c):
            self.conv = Conv2d(2, c, 3, rng_stream(0, "t"))

    with pytest.raises(ValueError, match="conv.weight"):
        Net(3).load_state_dict(Net(4).state_dict())
