import json
import os
import struct

import numpy as np
import pytest

from pimrl.data import (BadMagicError, Burst, InconsistentHeaderError, MultiScaleTrajectory, TruncatedPayloadError,
                        UnsupportedVersionError, mstd_bytes, parse_mstd, parse_pmck, pmck_bytes, read_mstd,
                        read_pmck, split_dataset, write_mstd, write_pmck)
from pimrl.solvers import make_case, simulate

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def tiny_trajectory():
    macro = np.arange(3 * 2 * 2 * 3, dtype=np.float64).reshape(3, 2, 2, 3) / 8.0
    burst = -np.arange(3 * 2 * 2 * 3, dtype=np.float64).reshape(3, 2, 2, 3) / 4.0
    return MultiScaleTrajectory(case="gs2d", field_names=["u", "v"], domain_length=0.5, dx=0.25,
                                dt_micro=0.5, k=2, macro=macro, bursts=[Burst(0, burst)], seed=7,
                                params={"D_u": 2e-5, "D_v": 5e-6, "F_feed": 0.04, "k_kill": 0.06})


def tiny_arrays():
    return {"a": np.array([[1.0, -2.5], [0.125, 3.0]]), "b": np.array([7.0])}


def hand_mstd(traj):
    """Byte layout written out field by field with struct."""
    header = {"bursts": [{"n_frames": 3, "start_macro_index": 0}], "case": "gs2d", "domain_length": 0.5,
              "dt_macro": 1.0, "dt_micro": 0.5, "dtype": "f32le", "dx": 0.25, "field_names": ["u", "v"],
              "grid": [2, 3], "k": 2, "layout": "C", "n_fields": 2, "n_macro_frames": 3,
              "params": traj.params, "seed": 7}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    vals = list(traj.macro.ravel()) + list(traj.bursts[0].frames.ravel())
    return b"MSTD" + bytes([1]) + struct.pack("<I", len(hb)) + hb + struct.pack(f"<{len(vals)}f", *vals)


def golden(name):
    with open(os.path.join(GOLDEN, name), "rb") as fh:
        return fh.read()


def test_mstd_golden_bytes():
    blob = mstd_bytes(tiny_trajectory())
    assert blob == hand_mstd(tiny_trajectory())
    assert blob == golden("tiny.mstd")
    hlen = struct.unpack("<I", blob[5:9])[0]
    assert json.loads(blob[9:9 + hlen])["n_macro_frames"] == 3
    assert len(blob) - 9 - hlen == 4 * (3 + 3) * 2 * 2 * 3


def test_pmck_golden_bytes():
    blob = pmck_bytes(tiny_arrays(), {"epoch": 3})
    assert blob == golden("tiny.pmck")
    payload = blob[9 + struct.unpack("<I", blob[5:9])[0]:]
    assert struct.unpack("<5d", payload) == (1.0, -2.5, 0.125, 3.0, 7.0)


def test_mstd_roundtrip_idempotent(tmp_path):
    t = tiny_trajectory()
    t.macro = t.macro + 1e-3 / 3  # not exactly representable in float32
    p1, p2 = tmp_path / "a.mstd", tmp_path / "b.mstd"
    write_mstd(t, p1)
    back = read_mstd(p1)
    write_mstd(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(back.macro, t.macro.astype(np.float32))
    assert back.dt_macro / back.dt_micro == back.k


def test_pmck_roundtrip_idempotent(tmp_path):
    write_pmck(tmp_path / "a.pmck", tiny_arrays(), {"x": [1, 2]})
    arrays, meta = read_pmck(tmp_path / "a.pmck")
    write_pmck(tmp_path / "b.pmck", arrays, meta)
    assert (tmp_path / "a.pmck").read_bytes() == (tmp_path / "b.pmck").read_bytes()
    assert meta == {"x": [1, 2]}


def test_empty_burst_list_legal():
    t = tiny_trajectory()
    t.bursts = []
    assert parse_mstd(mstd_bytes(t)).bursts == []


def test_error_categories():
    blob = mstd_bytes(tiny_trajectory())
    with pytest.raises(BadMagicError):
        parse_mstd(b"XSTD" + blob[4:])
    with pytest.raises(UnsupportedVersionError, match="unsupported version 2"):
        parse_mstd(blob[:4] + bytes([2]) + blob[5:])
    with pytest.raises(TruncatedPayloadError):
        parse_mstd(blob[:-4])
    with pytest.raises(InconsistentHeaderError):
        parse_mstd(blob + b"\0\0\0\0")
    flipped = bytearray(blob)
    flipped[-1] ^= 0x01  # payload corruption goes unnoticed: there is no checksum
    parse_mstd(bytes(flipped))


def test_inconsistent_dt_header_rejected():
    blob = mstd_bytes(tiny_trajectory())
    bad = blob.replace(b'"dt_macro":1.0', b'"dt_macro":1.5')
    bad = bad[:5] + struct.pack("<I", struct.unpack("<I", bad[5:9])[0]) + bad[9:]
    with pytest.raises(InconsistentHeaderError):
        parse_mstd(bad)


def test_pmck_manifest_checks():
    blob = pmck_bytes(tiny_arrays())
    with pytest.raises(InconsistentHeaderError):
        parse_pmck(blob + b"\0" * 8)
    with pytest.raises(TruncatedPayloadError):
        parse_pmck(blob[:-8])


def test_io_errors_name_path(tmp_path):
    missing = tmp_path / "nope" / "x.mstd"
    with pytest.raises(OSError, match="nope"):
        write_mstd(tiny_trajectory(), missing)
    with pytest.raises(OSError, match="nope"):
        read_mstd(missing)


def test_kdv_table_configuration_preserves_frame_count(tmp_path):
    # full-scale grid and step sizes; short horizon keeps the test fast
    t = simulate(make_case("kdv"), 0, 0.6, k=15)
    write_mstd(t, tmp_path / "k.mstd")
    back = read_mstd(tmp_path / "k.mstd")
    assert back.n_macro_frames == t.n_macro_frames == 5 and back.grid == (256,)


def test_split_counts():
    files = [f"f{i}" for i in range(8)]
    s = split_dataset(files, 5, 1, 2, seeds=list(range(8)))
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (5, 1, 2)
    assert not set(s["train"]) & set(s["val"]) | set(s["train"]) & set(s["test"])
    fn = split_dataset(files, 5, 0, 3)
    assert (len(fn["train"]), len(fn["val"]), len(fn["test"])) == (5, 0, 3)
    with pytest.raises(ValueError):
        split_dataset(files, 9)


def test_split_rejections():
    files = list("abcd")
    with pytest.raises(ValueError):
        split_dataset(files, [0, 1], [1], [])
    with pytest.raises(ValueError):
        split_dataset(files, [0, 1], 1, 0)
    with pytest.raises(ValueError):
        split_dataset(files, 2, seeds=[1, 1, 2, 3])
    assert split_dataset(files, [3], [0], [1, 2]) == {"train": ["d"], "val": ["a"], "test": ["b", "c"]}
