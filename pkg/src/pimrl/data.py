"""On-disk containers: MSTD trajectories and PMCK checkpoints.

MSTD layout (all integers little-endian)::

    b"MSTD" | version:u8 = 1 | header_len:u32 | header: UTF-8 JSON | payload

The payload holds the macro frames, then every burst's frames, each frame
``n_fields x grid`` float32 LE in C order. PMCK is the same framing with
magic ``b"PMCK"`` and float64 LE entries located by a manifest in the header.
No checksums: a flipped payload byte goes unnoticed, a short payload does not.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MSTD_MAGIC = b"MSTD"
PMCK_MAGIC = b"PMCK"
VERSION = 1


class FormatError(ValueError):
    """Base class for container decoding failures."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class InconsistentHeaderError(FormatError):
    pass


@dataclass
class Burst:
    start_macro_index: int
    frames: np.ndarray  # (n_frames, C, *grid) at dt_micro spacing


@dataclass
class MultiScaleTrajectory:
    case: str
    field_names: list
    domain_length: float
    dx: float
    dt_micro: float
    k: int
    macro: np.ndarray  # (n_macro, C, *grid) at dt_macro spacing
    bursts: list = field(default_factory=list)
    seed: int = 0
    params: dict = field(default_factory=dict)

    @property
    def dt_macro(self):
        return self.k * self.dt_micro

    @property
    def n_fields(self):
        return self.macro.shape[1]

    @property
    def grid(self):
        return tuple(self.macro.shape[2:])

    @property
    def n_macro_frames(self):
        return self.macro.shape[0]

    def macro_times(self):
        return np.arange(self.n_macro_frames) * self.dt_macro


def _encode(magic, header, payload):
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<BI", VERSION, len(hb)) + hb + payload


def _decode(blob, magic):
    if len(blob) < 9 or blob[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {blob[:4]!r}")
    version, hlen = struct.unpack("<BI", blob[4:9])
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if len(blob) < 9 + hlen:
        raise TruncatedPayloadError("header shorter than declared length")
    try:
        header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InconsistentHeaderError(f"unparseable header: {exc}") from exc
    return header, blob[9 + hlen:]


def _write_bytes(path, blob):
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


# ----------------------------------------------------------------------------- MSTD


def mstd_bytes(traj):
    if traj.macro.ndim < 3:
        raise ValueError("macro frames must be (n_frames, n_fields, *grid)")
    frame_shape = traj.macro.shape[1:]
    for b in traj.bursts:
        if b.frames.shape[1:] != frame_shape:
            raise ValueError("burst frame shape differs from macro frame shape")
    header = {
        "case": traj.case,
        "n_fields": int(traj.n_fields),
        "field_names": list(traj.field_names),
        "grid": [int(n) for n in traj.grid],
        "domain_length": float(traj.domain_length),
        "dx": float(traj.dx),
        "dt_micro": float(traj.dt_micro),
        "dt_macro": float(traj.k * traj.dt_micro),
        "k": int(traj.k),
        "n_macro_frames": int(traj.n_macro_frames),
        "bursts": [{"start_macro_index": int(b.start_macro_index), "n_frames": int(b.frames.shape[0])}
                   for b in traj.bursts],
        "dtype": "f32le",
        "layout": "C",
        "seed": int(traj.seed),
        "params": {k: float(v) for k, v in traj.params.items()},
    }
    parts = [np.ascontiguousarray(traj.macro, dtype="<f4").tobytes()]
    parts += [np.ascontiguousarray(b.frames, dtype="<f4").tobytes() for b in traj.bursts]
    return _encode(MSTD_MAGIC, header, b"".join(parts))


def write_mstd(traj, path):
    """Serialize ``traj`` (float32 payload) and fsync before returning."""
    _write_bytes(path, mstd_bytes(traj))


def parse_mstd(blob):
    header, payload = _decode(blob, MSTD_MAGIC)
    try:
        frame_shape = (int(header["n_fields"]),) + tuple(int(n) for n in header["grid"])
        n_macro = int(header["n_macro_frames"])
        bursts = header["bursts"]
        k = int(header["k"])
        dt_micro = float(header["dt_micro"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InconsistentHeaderError(f"missing or malformed header field: {exc}") from exc
    if header.get("dtype") != "f32le" or header.get("layout") != "C":
        raise InconsistentHeaderError("only f32le / C layout is supported")
    if float(header.get("dt_macro", -1)) != k * dt_micro:
        raise InconsistentHeaderError("dt_macro != k * dt_micro")
    if len(header["field_names"]) != frame_shape[0]:
        raise InconsistentHeaderError("field_names length != n_fields")
    frame_len = int(np.prod(frame_shape))
    n_frames = n_macro + sum(int(b["n_frames"]) for b in bursts)
    expected = 4 * n_frames * frame_len
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise InconsistentHeaderError(f"payload has {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    macro = data[:n_macro * frame_len].reshape((n_macro,) + frame_shape)
    pos = n_macro * frame_len
    out_bursts = []
    for b in bursts:
        n = int(b["n_frames"])
        out_bursts.append(Burst(int(b["start_macro_index"]),
                                data[pos:pos + n * frame_len].reshape((n,) + frame_shape)))
        pos += n * frame_len
    return MultiScaleTrajectory(
        case=header["case"], field_names=list(header["field_names"]),
        domain_length=float(header["domain_length"]), dx=float(header["dx"]),
        dt_micro=dt_micro, k=k, macro=macro, bursts=out_bursts,
        seed=int(header["seed"]), params=dict(header["params"]),
    )


def read_mstd(path):
    """Load and validate an MSTD file (values widened to float64)."""
    return parse_mstd(_read_bytes(path))


# ----------------------------------------------------------------------------- PMCK


def pmck_bytes(arrays, meta=None):
    """Encode an ordered ``{name: array}`` map plus JSON-able ``meta``."""
    manifest, parts, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        parts.append(a.tobytes())
        offset += a.nbytes
    header = {"manifest": manifest, "meta": meta or {}, "dtype": "f64le"}
    return _encode(PMCK_MAGIC, header, b"".join(parts))


def parse_pmck(blob):
    header, payload = _decode(blob, PMCK_MAGIC)
    try:
        manifest = header["manifest"]
    except KeyError as exc:
        raise InconsistentHeaderError("missing manifest") from exc
    arrays, pos = {}, 0
    for entry in manifest:
        shape = tuple(int(n) for n in entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if int(entry["offset"]) != pos:
            raise InconsistentHeaderError(f"manifest entry {entry['name']} is not contiguous")
        if pos + nbytes > len(payload):
            raise TruncatedPayloadError(f"payload ends inside {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(payload):
        raise InconsistentHeaderError(f"{len(payload) - pos} payload bytes not covered by manifest")
    return arrays, header.get("meta", {})


def write_pmck(path, arrays, meta=None):
    _write_bytes(path, pmck_bytes(arrays, meta))


def read_pmck(path):
    return parse_pmck(_read_bytes(path))


# ----------------------------------------------------------------------------- splitting


def split_dataset(files, train, val=0, test=0, seeds=None):
    """Partition trajectories (never time windows) into train/val/test.

    Each of ``train``/``val``/``test`` is either a count (taken in file order)
    or an explicit list of file indices; overlapping index lists are rejected.
    ``seeds`` (one per file) must be distinct when given.
    """
    files = list(files)
    if seeds is not None and len(set(seeds)) != len(seeds):
        raise ValueError("trajectories must have distinct seeds")
    spec = {"train": train, "val": val, "test": test}
    if all(isinstance(v, int) for v in spec.values()):
        if min(spec.values()) < 0:
            raise ValueError("split counts must be non-negative")
        if train + val + test > len(files):
            raise ValueError(f"requested {train}+{val}+{test} trajectories from {len(files)} files")
        return {
            "train": files[:train],
            "val": files[train:train + val],
            "test": files[train + val:train + val + test],
        }
    if any(isinstance(v, int) for v in spec.values()):
        raise ValueError("mix of counts and index lists; give index lists for every split")
    used = set()
    out = {}
    for name, sel in spec.items():
        idx = list(sel)
        for i in idx:
            if not 0 <= i < len(files):
                raise ValueError(f"{name}: index {i} out of range for {len(files)} files")
            if i in used:
                raise ValueError(f"{name}: trajectory {i} already assigned to another split")
            used.add(i)
        out[name] = [files[i] for i in idx]
    return out
