"""Overlap scores, bias recovery error and template quality metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .volume import LabelVolume, Volume3, gradient_central


def _masks(a: LabelVolume, b: LabelVolume, label):
    if not a.grid.matches(b.grid):
        raise ValueError("label volumes are on different grids")
    return a.data == label, b.data == label


def dice(a: LabelVolume, b: LabelVolume, label) -> float:
    """``2 |A & B| / (|A| + |B|)``; 1 when both masks are empty."""
    ma, mb = _masks(a, b, label)
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / (na + nb)


def target_overlap(a: LabelVolume, b: LabelVolume, label) -> float:
    """``|A & B| / |B|`` with ``b`` the target."""
    ma, mb = _masks(a, b, label)
    nb = int(mb.sum())
    if nb == 0:
        if ma.any():
            raise ValueError(f"label {label}: target is empty but source is not")
        return 1.0
    return int((ma & mb).sum()) / nb


def bias_rmse(recovered: Volume3, truth: Volume3, mask=None) -> float:
    """Root mean squared difference over ``mask`` (all voxels when ``None``)."""
    if not recovered.grid.matches(truth.grid):
        raise ValueError("volumes are on different grids")
    if mask is None:
        mask = np.ones(truth.dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    d = recovered.data[mask] - truth.data[mask]
    return float(np.sqrt(np.mean(d * d)))


def pearson(a: Volume3, b: Volume3, mask=None) -> float:
    if mask is None:
        mask = np.ones(a.dims, dtype=bool)
    x, y = a.data[mask], b.data[mask]
    x = x - x.mean()
    y = y - y.mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    return float((x * y).sum() / den) if den > 0 else 0.0


def sharpness(vol: Volume3) -> float:
    """Mean gradient magnitude over interior voxels."""
    g = np.linalg.norm(gradient_central(vol), axis=-1)
    inner = tuple(slice(1, -1) if n > 2 else slice(None) for n in vol.dims)
    return float(g[inner].mean())


def rmse(a: Volume3, b: Volume3) -> float:
    return bias_rmse(a, b)


@dataclass
class OverlapReport:
    """Pairwise overlaps: rows of ``(source, target, label, dice, target_overlap)``."""

    rows: list = field(default_factory=list)

    def mean_dice(self, label=None) -> float:
        vals = [r[3] for r in self.rows if label is None or r[2] == label]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_target(self, label=None) -> float:
        vals = [r[4] for r in self.rows if label is None or r[2] == label]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def labels(self):
        return sorted({r[2] for r in self.rows})


def pairwise_overlaps(volumes, labels=None, names=None) -> OverlapReport:
    """Overlaps for every ordered pair of label volumes."""
    volumes = list(volumes)
    names = list(names) if names is not None else [str(i) for i in range(len(volumes))]
    if labels is None:
        labels = sorted(set().union(*(set(v.labels()) for v in volumes)) - {0})
    report = OverlapReport()
    for i, j in itertools.permutations(range(len(volumes)), 2):
        for lab in labels:
            report.rows.append(
                (
                    names[i],
                    names[j],
                    int(lab),
                    dice(volumes[i], volumes[j], lab),
                    target_overlap(volumes[i], volumes[j], lab)
                    if (volumes[j].data == lab).any() or not (volumes[i].data == lab).any()
                    else 0.0,
                )
            )
    return report
