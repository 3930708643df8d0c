import numpy as np
import pytest

from magic import checkpoint as ckpt


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "a.bias": rng.standard_normal(4),
        "steps": np.array([1, 2, 3], dtype=np.int64),
        "scalar": np.float64(3.5) * np.ones(()),
    }
    meta = {"seed": "7", "note": "hello ✓"}
    path = tmp_path / "m.mgk"
    ckpt.save(path, tensors, meta)
    loaded, lmeta = ckpt.load(path)
    assert lmeta == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.asarray(tensors[k]).dtype
        assert np.array_equal(loaded[k], tensors[k])
    # byte-identical re-serialization
    path2 = tmp_path / "m2.mgk"
    ckpt.save(path2, loaded, lmeta)
    assert path.read_bytes() == path2.read_bytes()


def test_magic_bytes_checked(tmp_path):
    p = tmp_path / "bad.mgk"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(p)


def test_digest_sensitivity():
    a = {"w": np.ones(3, dtype=np.float32)}
    b = {"w": np.ones(3, dtype=np.float32)}
    assert ckpt.digest(a) == ckpt.digest(b)
    b["w"] = b["w"].copy()
    b["w"][0] = np.nextafter(np.float32(1.0), np.float32(2.0))
    assert ckpt.digest(a) != ckpt.digest(b)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.save(tmp_path / "x.mgk", {"w": np.ones(2, dtype=np.int32)}, {})
