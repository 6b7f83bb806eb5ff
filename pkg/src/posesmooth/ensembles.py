"""Ensemble prediction ingestion and per-keypoint summary statistics.

Predictions from M independently trained networks are stacked into a
T x 2V x M tensor per keypoint (coordinate axis interleaves
[x_1, y_1, ..., x_V, y_V]).  The summary keeps the ensemble median and the
unbiased variance across members; the variance is what downstream smoothing
uses as per-frame observation noise.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, EmptyEnsemble

VARIANCE_FLOOR = 1e-6            # px^2; keeps observation covariances invertible
VARIANCE_FLOOR_MISSING = 1e4     # px^2; cells with < 2 valid members


@dataclass(frozen=True)
class EnsembleSeries:
    """Stacked predictions for one keypoint: data[t, c, m] in pixels."""

    data: np.ndarray                # (T, 2V, M), NaN = missing prediction
    keypoint: str
    view_names: tuple[str, ...]
    frame_index: np.ndarray         # (T,) source frame ids

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise DataError(f"ensemble data must be (T, 2V, M), got {data.shape}")
        T, twoV, M = data.shape
        if T < 1 or M < 1:
            raise DataError(f"need T >= 1 and M >= 1, got T={T}, M={M}")
        if twoV != 2 * len(self.view_names) or len(self.view_names) < 2:
            raise DataError(
                f"coordinate axis {twoV} does not match 2 x {len(self.view_names)} views"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "view_names", tuple(self.view_names))
        object.__setattr__(self, "frame_index", np.asarray(self.frame_index))
        if len(self.frame_index) != T:
            raise DataError("frame_index length does not match T")

    @property
    def n_views(self) -> int:
        return len(self.view_names)


@dataclass(frozen=True)
class EnsembleSummary:
    """Per-frame median / variance / e.s.d. across the ensemble axis."""

    median: np.ndarray       # (T, 2V) pixels
    variance: np.ndarray     # (T, 2V) pixels^2, floored
    esd: np.ndarray          # (T, 2V) pixels, sqrt(variance)
    keypoint: str
    view_names: tuple[str, ...]
    frame_index: np.ndarray

    @property
    def n_views(self) -> int:
        return len(self.view_names)

    @property
    def n_frames(self) -> int:
        return self.median.shape[0]


def summarize(series: EnsembleSeries) -> EnsembleSummary:
    """Median and unbiased variance over valid (finite) ensemble members.

    Cells with < 2 valid members get VARIANCE_FLOOR_MISSING; all variances
    are clamped below by VARIANCE_FLOOR.  Raises EmptyEnsemble if any cell
    has no valid member at all.
    """
    data = series.data
    valid = np.isfinite(data)
    counts = valid.sum(axis=2)
    if np.any(counts == 0):
        t, c = np.argwhere(counts == 0)[0]
        raise EmptyEnsemble(
            f"keypoint {series.keypoint!r}: no valid ensemble member at "
            f"frame {series.frame_index[t]}, coordinate {c}"
        )
    median = np.nanmedian(data, axis=2)
    mean = np.nanmean(data, axis=2)
    dev = np.where(valid, data - mean[:, :, None], 0.0)
    ss = (dev * dev).sum(axis=2)
    var = ss / np.maximum(counts - 1, 1)
    var = np.where(counts >= 2, var, VARIANCE_FLOOR_MISSING)
    var = np.maximum(var, VARIANCE_FLOOR)
    return EnsembleSummary(
        median=median,
        variance=var,
        esd=np.sqrt(var),
        keypoint=series.keypoint,
        view_names=series.view_names,
        frame_index=series.frame_index,
    )


def esd_filter_mask(summary: EnsembleSummary, threshold: float) -> np.ndarray:
    """(T, V) boolean mask, true where max(esd_x, esd_y) > threshold."""
    if threshold < 0:
        raise DataError(f"esd threshold must be >= 0, got {threshold}")
    T = summary.esd.shape[0]
    per_view = summary.esd.reshape(T, summary.n_views, 2).max(axis=2)
    return per_view > threshold


# ---------------------------------------------------------------------------
# prediction CSV ingestion
#
# Directory layout: <root>/<model>/<view>.csv, one CSV per (model, view).
# Header: frame,<kp>_x,<kp>_y,<kp>_likelihood,...  The likelihood column is
# parsed but unused; ensemble variance replaces network confidence.

_COORD_RE = re.compile(r"^(.*)_(x|y|likelihood)$")


def keypoints_in_csv(path) -> list[str]:
    """Keypoint names present in a prediction CSV, in column order."""
    header = pd.read_csv(path, nrows=0).columns
    names = []
    for col in header:
        m = _COORD_RE.match(col)
        if m and m.group(2) == "x" and m.group(1) not in names:
            names.append(m.group(1))
    return names


def _read_view_csv(path, keypoints):
    df = pd.read_csv(path)
    if "frame" not in df.columns:
        raise DataError(f"{path}: prediction CSV needs a 'frame' column")
    frames = df["frame"].to_numpy()
    coords = np.empty((len(df), 2 * len(keypoints)))
    for k, kp in enumerate(keypoints):
        for off, axis in enumerate(("x", "y")):
            col = f"{kp}_{axis}"
            if col not in df.columns:
                raise DataError(f"{path}: missing column {col!r}")
            coords[:, 2 * k + off] = df[col].to_numpy(dtype=float)
    return frames, coords


def load_ensemble(root, view_names=None, model_names=None) -> list[EnsembleSeries]:
    """Load a prediction directory into one EnsembleSeries per keypoint.

    ``root`` holds one subdirectory per ensemble member, each with one CSV
    per view.  Views and models default to the sorted directory contents.
    All files must agree on frames and keypoints.
    """
    root = Path(root)
    if model_names is None:
        model_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not model_names:
        raise DataError(f"{root}: no model subdirectories found")
    if view_names is None:
        view_names = sorted(p.stem for p in (root / model_names[0]).glob("*.csv"))
    if len(view_names) < 2:
        raise DataError(f"{root}: need >= 2 view CSVs, found {view_names}")

    keypoints = keypoints_in_csv(root / model_names[0] / f"{view_names[0]}.csv")
    if not keypoints:
        raise DataError(f"{root}: no keypoint columns found")

    frames_ref = None
    # blocks[m][v] -> (T, 2K) coordinate matrix
    blocks = []
    for model in model_names:
        per_view = []
        for view in view_names:
            path = root / model / f"{view}.csv"
            frames, coords = _read_view_csv(path, keypoints)
            if frames_ref is None:
                frames_ref = frames
            elif not np.array_equal(frames, frames_ref):
                raise DataError(f"{path}: frame ids differ from other files")
            per_view.append(coords)
        blocks.append(per_view)

    T = len(frames_ref)
    V, M = len(view_names), len(model_names)
    out = []
    for k, kp in enumerate(keypoints):
        data = np.empty((T, 2 * V, M))
        for m in range(M):
            for v in range(V):
                data[:, 2 * v: 2 * v + 2, m] = blocks[m][v][:, 2 * k: 2 * k + 2]
        out.append(EnsembleSeries(
            data=data, keypoint=kp, view_names=tuple(view_names),
            frame_index=frames_ref,
        ))
    return out
