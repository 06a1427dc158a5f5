"""Error metrics for forecast frames: RMSE, MAE, Pearson correlation and HCT."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

PCC_THRESHOLD = 0.8


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def rmse(pred, truth):
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth):
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def pcc(a, b):
    """Pearson correlation over all elements; NaN when either input is constant."""
    a, b = _pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    den = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if den == 0.0:
        return float("nan")
    return float(np.clip(np.dot(da, db) / den, -1.0, 1.0))


def _frames(pred_frames, truth_frames):
    p, t = _pair(pred_frames, truth_frames)
    if p.ndim < 2:
        raise ValueError("expected a sequence of frames")
    return p, t


def passing(pred_frames, truth_frames, threshold=PCC_THRESHOLD):
    """Per-frame booleans ``pcc > threshold`` (NaN fails)."""
    p, t = _frames(pred_frames, truth_frames)
    return np.array([pcc(a, b) > threshold for a, b in zip(p, t)], dtype=bool)


def hct(pred_frames, truth_frames, dt_macro, threshold=PCC_THRESHOLD):
    """``dt_macro`` times the number of frames whose correlation exceeds ``threshold``."""
    return float(dt_macro * int(passing(pred_frames, truth_frames, threshold).sum()))


def hct_first_failure(pred_frames, truth_frames, dt_macro, threshold=PCC_THRESHOLD):
    """``dt_macro`` times the number of frames before the first failing one."""
    ok = passing(pred_frames, truth_frames, threshold)
    n = len(ok) if ok.all() else int(np.argmin(ok))
    return float(dt_macro * n)


@dataclass
class MetricsReport:
    times: list
    rmse_per_frame: list
    mae_per_frame: list
    pcc_per_frame: list
    rmse: float
    mae: float
    hct: float
    hct_first_failure: float
    dt_macro: float
    pcc_threshold: float = PCC_THRESHOLD
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        # JSON has no NaN; zero-variance correlations are written as null
        d["pcc_per_frame"] = [None if np.isnan(v) else v for v in self.pcc_per_frame]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pcc_per_frame"] = [float("nan") if v is None else v for v in d["pcc_per_frame"]]
        return cls(**d)


def report(pred_frames, truth_frames, dt_macro, times=None, threshold=PCC_THRESHOLD):
    p, t = _frames(pred_frames, truth_frames)
    r = [rmse(a, b) for a, b in zip(p, t)]
    m = [mae(a, b) for a, b in zip(p, t)]
    c = [pcc(a, b) for a, b in zip(p, t)]
    times = list(np.arange(1, len(p) + 1) * dt_macro) if times is None else [float(x) for x in times]
    return MetricsReport(
        times=times, rmse_per_frame=r, mae_per_frame=m, pcc_per_frame=c,
        rmse=float(np.mean(r)), mae=float(np.mean(m)),
        hct=hct(p, t, dt_macro, threshold), hct_first_failure=hct_first_failure(p, t, dt_macro, threshold),
        dt_macro=float(dt_macro), pcc_threshold=threshold,
    )


def dumps_report(obj):
    return json.dumps(obj, sort_keys=True, indent=1)
