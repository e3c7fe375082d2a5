"""Joint sub-pixel regression for both images and final match assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ._validation import InputError
from .fine import FINE_WINDOW

# A refined point moves at most this far (original pixels at full
# resolution) from its 1/2-scale cell centre: half a fine cell.
OFFSET_SCALE = 1.0
_TANH_LIMIT = 1.0 - 1e-6


@dataclass
class SubPixelMatchSet:
    """Final matches in image pixel coordinates (pixel centres at integers)."""

    xy_a: np.ndarray  # [N, 2]
    xy_b: np.ndarray
    confidence: np.ndarray
    parent: np.ndarray  # index of the coarse match each row came from
    batch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    cell_center_a: np.ndarray | None = None
    cell_center_b: np.ndarray | None = None

    def __post_init__(self):
        if self.batch.size == 0 and len(self.xy_a):
            self.batch = np.zeros(len(self.xy_a), dtype=int)

    def __len__(self):
        return len(self.xy_a)

    def select(self, batch: int) -> "SubPixelMatchSet":
        sel = self.batch == batch
        pick = lambda a: None if a is None else a[sel]
        return SubPixelMatchSet(self.xy_a[sel], self.xy_b[sel], self.confidence[sel],
                                self.parent[sel], self.batch[sel],
                                pick(self.cell_center_a), pick(self.cell_center_b))


class SubPixelRegressor(nn.Module):
    """MLP + tanh over the concatenated fine features of a selected pair."""

    def __init__(self, fine_ch):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2 * fine_ch, 2 * fine_ch),
            nn.ReLU(inplace=True),
            nn.Linear(2 * fine_ch, 4),
        )

    def forward(self, feat_a, feat_b):
        out = torch.tanh(self.mlp(torch.cat([feat_a, feat_b], dim=-1)))
        # float32 tanh saturates to exactly +-1; keep the open interval
        return out.clamp(-_TANH_LIMIT, _TANH_LIMIT)


def regress_offsets(feat_a, feat_b, regressor: SubPixelRegressor):
    """Offsets ``(dx_a, dy_a, dx_b, dy_b)``, each strictly inside (-1, 1)."""
    return regressor(feat_a, feat_b)


def fine_cell_centers(center_rc: torch.Tensor, window_idx: torch.Tensor) -> torch.Tensor:
    """Pixel (x, y) of a 5x5 window cell given the window centre (row, col) at 1/2."""
    half = FINE_WINDOW // 2
    row = center_rc[:, 0] + window_idx // FINE_WINDOW - half
    col = center_rc[:, 1] + window_idx % FINE_WINDOW - half
    return torch.stack([2.0 * col + 0.5, 2.0 * row + 0.5], dim=1)


def unique_by_confidence(keys_a, keys_b, confidence: np.ndarray) -> np.ndarray:
    """Indices kept when each key of A and of B may appear once, best confidence first."""
    order = np.lexsort((np.arange(len(confidence)), -confidence))
    used_a, used_b, keep = set(), set(), []
    for k in order:
        ka, kb = keys_a[k], keys_b[k]
        if ka in used_a or kb in used_b:
            continue
        used_a.add(ka)
        used_b.add(kb)
        keep.append(k)
    return np.sort(np.asarray(keep, dtype=int))


def assemble_matches(coarse, fine, offsets, scales=((1.0, 1.0), (1.0, 1.0)),
                     bounds=None, centers=None) -> SubPixelMatchSet:
    """Turn kept fine matches plus offsets into pixel coordinates.

    ``centers`` are the window centres ``(center_a, center_b)`` at 1/2 scale.
    Coordinates are divided by the per-axis resize ``scales`` so they refer to
    the image files; ``bounds`` gives per-side ``(width, height)`` to clip to.
    A fine cell of A (or of B) used by two matches is kept only for the
    more confident one.
    """
    center_a, center_b = centers
    keep = fine.keep
    idx = torch.nonzero(keep, as_tuple=True)[0]
    cell_a = fine_cell_centers(center_a[idx], fine.idx_a[idx]).double()
    cell_b = fine_cell_centers(center_b[idx], fine.idx_b[idx]).double()
    off = offsets[idx].detach().double() * OFFSET_SCALE if offsets is not None else torch.zeros(len(idx), 4, dtype=torch.float64)
    xy_a = (cell_a + off[:, :2]).cpu().numpy()
    xy_b = (cell_b + off[:, 2:]).cpu().numpy()
    conf = fine.confidence[idx].detach().double().cpu().numpy()
    batch = coarse.b[idx].cpu().numpy()

    ca, cb = cell_a.cpu().numpy(), cell_b.cpu().numpy()
    key_a = [(int(b), float(x), float(y)) for b, (x, y) in zip(batch, ca)]
    key_b = [(int(b), float(x), float(y)) for b, (x, y) in zip(batch, cb)]
    sel = unique_by_confidence(key_a, key_b, conf)
    xy_a, xy_b, conf, batch = xy_a[sel], xy_b[sel], conf[sel], batch[sel]
    ca, cb = ca[sel], cb[sel]
    parent = idx.cpu().numpy()[sel]

    (sxa, sya), (sxb, syb) = scales
    xy_a = xy_a / np.array([sxa, sya])
    xy_b = xy_b / np.array([sxb, syb])
    ca = ca / np.array([sxa, sya])
    cb = cb / np.array([sxb, syb])
    if bounds is not None:
        (wa, ha), (wb, hb) = bounds
        xy_a = np.clip(xy_a, 0, [wa - 1, ha - 1])
        xy_b = np.clip(xy_b, 0, [wb - 1, hb - 1])
    return SubPixelMatchSet(xy_a, xy_b, conf, parent, batch.astype(int), ca, cb)


MATCH_HEADER = "# xA yA xB yB conf"


def write_match_file(path, matches: SubPixelMatchSet):
    lines = [MATCH_HEADER]
    for (xa, ya), (xb, yb), c in zip(matches.xy_a, matches.xy_b, matches.confidence):
        lines.append(f"{xa:.6f} {ya:.6f} {xb:.6f} {yb:.6f} {c:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_match_file(path) -> SubPixelMatchSet:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"match file not found: {path}")
    rows = [list(map(float, line.split())) for line in path.read_text().splitlines()
            if line.strip() and not line.startswith("#")]
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    n = len(arr)
    return SubPixelMatchSet(arr[:, :2], arr[:, 2:4], arr[:, 4], np.arange(n), np.zeros(n, dtype=int))
