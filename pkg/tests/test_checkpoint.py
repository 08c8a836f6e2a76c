import struct

import numpy as np
import pytest

from knowe.checkpoint import MAGIC, VERSION, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from knowe.errors import FormatError
from knowe.protocol import RunFlags, evaluate, run_experiment


@pytest.fixture(scope="module")
def trained(desk_stream, quick_preset):
    flags = RunFlags(normalize_weights=False, freeze_classifier=False)
    return run_experiment(desk_stream, flags, quick_preset, 0).model


def _as_f32(model):
    """The model with every parameter rounded to float32, which is what a checkpoint stores."""
    return from_bytes(to_bytes(model))


def test_round_trip_reproduces_evaluation(desk_stream, trained, tmp_path):
    path = tmp_path / "m.knwe"
    save_checkpoint(path, trained)
    back = load_checkpoint(path)
    ref = _as_f32(trained)
    for t in (0, desk_stream.T):
        a, b = evaluate(ref, desk_stream, t), evaluate(back, desk_stream, t)
        assert np.array_equal(a.confusion, b.confusion)
        assert a.A_t == b.A_t
    assert back.flags == trained.flags
    assert back.head.blocks == trained.head.blocks
    assert np.array_equal(back.head.frozen, trained.head.frozen)
    assert (back.seed, back.t, back.base_coarse_accuracy) == (trained.seed, trained.t, trained.base_coarse_accuracy)


def test_float32_precision(trained):
    back = from_bytes(to_bytes(trained))
    np.testing.assert_array_equal(back.head.W, trained.head.W.astype(np.float32))
    assert to_bytes(back) == to_bytes(trained)


def test_header_layout(trained):
    buf = to_bytes(trained)
    assert buf[:4] == MAGIC
    assert struct.unpack("<I", buf[4:8])[0] == VERSION
    n_layers = struct.unpack("<I", buf[8:12])[0]
    dims = struct.unpack(f"<{n_layers + 1}I", buf[12:16 + 4 * n_layers])
    assert dims[0] == trained.net.input_dim and dims[-1] == trained.net.feature_dim


def test_bad_magic(trained):
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"NOPE" + to_bytes(trained)[4:])


def test_version_mismatch_names_both(trained):
    buf = bytearray(to_bytes(trained))
    buf[4:8] = struct.pack("<I", VERSION + 6)
    with pytest.raises(FormatError) as err:
        from_bytes(bytes(buf))
    assert str(VERSION + 6) in str(err.value) and str(VERSION) in str(err.value)


@pytest.mark.parametrize("cut", [2, 10, 100, -1])
def test_truncated(trained, cut):
    buf = to_bytes(trained)
    with pytest.raises(FormatError):
        from_bytes(buf[:cut])


def test_trailing_bytes(trained):
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(to_bytes(trained) + b"\0")


def test_failed_write_leaves_old_file(trained, tmp_path, monkeypatch):
    path = tmp_path / "m.knwe"
    save_checkpoint(path, trained)
    old = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, trained)
    assert path.read_bytes() == old
    assert [p.name for p in tmp_path.iterdir()] == ["m.knwe"]
