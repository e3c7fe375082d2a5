"""The full matcher: encoder, coarse matching, window decoder, sub-pixel head, MIM head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ._validation import InputError, ValidationError
from .coarse import (CoarseMatcher, CoarseMatchSet, CoarseProbabilities, coarse_similarity,
                     select_coarse_matches)
from .fine import (FeatureFusion, FineDecoder, FineMatchSet, WindowBundle, crop_windows,
                   fine_match)
from .mim import MaskedTokens, ReconstructionHead, mask_and_tokenize, paste_patches
from .nn.backbone import ResNetEncoder, downsample_mask
from .subpixel import OFFSET_SCALE, SubPixelMatchSet, SubPixelRegressor, assemble_matches, fine_cell_centers

# keys that change parameter shapes; everything else is a runtime switch
ARCH_KEYS = ("widths", "blocks", "coarse_nhead", "coarse_layers", "fine_nhead", "positional_bias")


@dataclass
class ModelConfig:
    widths: tuple = (64, 128, 256)
    blocks: tuple = (2, 2, 2)
    coarse_nhead: int = 8
    coarse_layers: int = 4
    fine_nhead: int = 1
    positional_bias: bool = True
    tau: float = 0.1
    theta_c: float = 0.3
    theta_f: float = 0.1
    one_to_one_only: bool = False
    use_sprm: bool = True
    use_theta_f: bool = True
    recon_mode: str = "resample"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.widths) != 3 or len(self.blocks) != 3:
            raise ValidationError("widths and blocks need one entry per scale (1/2, 1/4, 1/8)")
        if self.widths[2] % 4 or self.widths[2] % self.coarse_nhead:
            raise ValidationError("coarse width must be divisible by 4 and by coarse_nhead")
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(widths=(8, 16, 32), blocks=(1, 1, 1), coarse_nhead=4, coarse_layers=2)
        base.update(overrides)
        return cls(**base)

    def architecture(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if k in ARCH_KEYS}

    def fingerprint(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MatchOutput:
    probs: CoarseProbabilities
    coarse: CoarseMatchSet
    bundle: WindowBundle
    fine: FineMatchSet
    fa5: torch.Tensor
    fb5: torch.Tensor
    offsets: torch.Tensor
    xy_a: torch.Tensor  # refined points for every window, [M, 2], padded-image pixels
    xy_b: torch.Tensor
    coarse_mask_a: torch.Tensor | None = None
    coarse_mask_b: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


def _flat(mask):
    return None if mask is None else mask.flatten(1)


class CrossModalNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c2, c4, c8 = self.config.widths
        self.encoder = ResNetEncoder(self.config.widths, self.config.blocks)
        self.coarse = CoarseMatcher(c8, self.config.coarse_nhead, self.config.coarse_layers, self.config.tau)
        self.fusion = FeatureFusion(c8, c4)
        self.decoder = FineDecoder(c4, c2, self.config.fine_nhead, self.config.positional_bias)
        self.regressor = SubPixelRegressor(c2)
        self.mim_tokens = MaskedTokens((c8, c4, c2))
        self.mim_head = ReconstructionHead(c2)

    # -- shared pieces -------------------------------------------------------
    def _encode(self, image_a, image_b):
        if image_a.shape == image_b.shape:
            f8, f4, f2 = self.encoder(torch.cat([image_a, image_b]))
            B = image_a.shape[0]
            return (f8[:B], f4[:B], f2[:B]), (f8[B:], f4[B:], f2[B:])
        return self.encoder(image_a), self.encoder(image_b)

    def _refine_and_fuse(self, pyr_a, pyr_b, m8_a, m8_b):
        fa_hat, fb_hat = self.coarse.refine(pyr_a[0], pyr_b[0], m8_a, m8_b)
        fused = []
        for f, f_hat in ((pyr_a[0], fa_hat), (pyr_b[0], fb_hat)):
            grid = f_hat.transpose(1, 2).reshape(f.shape)
            fused.append(self.fusion(grid, f))
        return fa_hat, fb_hat, fused

    # -- matching --------------------------------------------------------------
    def forward(self, image_a, image_b, mask_a=None, mask_b=None, extra_coarse=None,
                max_windows=None, generator=None) -> MatchOutput:
        """Match ``[B, 1, H, W]`` image batches.

        ``extra_coarse`` is an optional ``(b, i, j)`` triple of coarse pairs
        appended to the selected matches (ground truth during training).
        ``max_windows`` caps the number of windows decoded per call.
        """
        cfg = self.config
        pyr_a, pyr_b = self._encode(image_a, image_b)
        m8_a = downsample_mask(mask_a, 8) if mask_a is not None else None
        m8_b = downsample_mask(mask_b, 8) if mask_b is not None else None
        fa_hat, fb_hat, (fused_a, fused_b) = self._refine_and_fuse(pyr_a, pyr_b, m8_a, m8_b)
        probs = coarse_similarity(fa_hat, fb_hat, cfg.tau, self.coarse.proj, _flat(m8_a), _flat(m8_b))

        grid_a = tuple(pyr_a[0].shape[-2:])
        grid_b = tuple(pyr_b[0].shape[-2:])
        coarse = select_coarse_matches(probs, cfg.theta_c, grid_a, grid_b, cfg.one_to_one_only)
        if extra_coarse is not None:
            coarse = coarse.extend(*extra_coarse)
        if max_windows is not None and len(coarse) > max_windows:
            keep = torch.randperm(len(coarse), generator=generator)[:max_windows].sort().values
            coarse = CoarseMatchSet(coarse.b[keep], coarse.i[keep], coarse.j[keep],
                                    coarse.confidence[keep], coarse.source[keep], grid_a, grid_b)

        valid_a = valid_b = None
        if mask_a is not None:
            valid_a = {4: downsample_mask(mask_a, 4), 2: downsample_mask(mask_a, 2)}
        if mask_b is not None:
            valid_b = {4: downsample_mask(mask_b, 4), 2: downsample_mask(mask_b, 2)}
        bundle = crop_windows(coarse, fused_a, fused_b, (pyr_a[1], pyr_a[2]), (pyr_b[1], pyr_b[2]),
                              valid_a, valid_b)
        fa5, fb5 = self.decoder(bundle)
        scale = fa5.shape[-1] ** -0.25
        theta_f = cfg.theta_f if cfg.use_theta_f else 0.0
        fine = fine_match(fa5 * scale, fb5 * scale, cfg.tau, theta_f, bundle.m5_a, bundle.m5_b)

        M = len(coarse)
        rows = torch.arange(M, device=fa5.device)
        sel_a = fa5[rows, fine.idx_a]
        sel_b = fb5[rows, fine.idx_b]
        if cfg.use_sprm:
            offsets = self.regressor(sel_a, sel_b)
        else:
            offsets = sel_a.new_zeros(M, 4)
        xy_a = fine_cell_centers(bundle.center_a, fine.idx_a).to(fa5.dtype) + OFFSET_SCALE * offsets[:, :2]
        xy_b = fine_cell_centers(bundle.center_b, fine.idx_b).to(fa5.dtype) + OFFSET_SCALE * offsets[:, 2:]
        return MatchOutput(probs, coarse, bundle, fine, fa5, fb5, offsets, xy_a, xy_b,
                           _flat(m8_a), _flat(m8_b))

    @torch.no_grad()
    def match(self, image_a, image_b, mask_a=None, mask_b=None, scales=None, bounds=None) -> SubPixelMatchSet:
        out = self.forward(image_a, image_b, mask_a, mask_b)
        scales = scales or ((1.0, 1.0), (1.0, 1.0))
        return assemble_matches(out.coarse, out.fine, out.offsets if self.config.use_sprm else None,
                                scales, bounds, (out.bundle.center_a, out.bundle.center_b))

    # -- masked image modeling ---------------------------------------------------
    def reconstruct(self, image_a, image_b, pixel_mask_a, pixel_mask_b):
        """Reconstruct masked regions of both images.

        Returns ``(recon_a, recon_b)`` as ``[B, H, W]`` with zeros outside the
        masked cells.
        """
        if image_a.shape == image_b.shape:
            # one encoder call, so batch-norm statistics pool both modalities as in forward()
            B = image_a.shape[0]
            pyr = mask_and_tokenize(torch.cat([image_a, image_b]), torch.cat([pixel_mask_a, pixel_mask_b]),
                                    self.encoder, self.mim_tokens)
            feats = (pyr.f_coarse, pyr.f_mid, pyr.f_fine)
            pa, pb = tuple(f[:B] for f in feats), tuple(f[B:] for f in feats)
        else:
            pyr_a = mask_and_tokenize(image_a, pixel_mask_a, self.encoder, self.mim_tokens)
            pyr_b = mask_and_tokenize(image_b, pixel_mask_b, self.encoder, self.mim_tokens)
            pa = (pyr_a.f_coarse, pyr_a.f_mid, pyr_a.f_fine)
            pb = (pyr_b.f_coarse, pyr_b.f_mid, pyr_b.f_fine)
        return reconstruct_patches(self, pa, pb, pixel_mask_a, pixel_mask_b)


def reconstruct_patches(net: CrossModalNet, pyr_a, pyr_b, pixel_mask_a, pixel_mask_b):
    """Decode windows at every masked coarse cell and paste the 10x10 predictions.

    The window at a cell is cropped at the same location in both images and
    passed through the matcher's own window decoder, so both images take
    part through cross-attention.
    """
    _, _, (fused_a, fused_b) = net._refine_and_fuse(pyr_a, pyr_b, None, None)
    ma8 = pixel_mask_a[:, ::8, ::8]
    mb8 = pixel_mask_b[:, ::8, ::8]
    grid = tuple(ma8.shape[-2:])
    b, r, c = torch.nonzero(ma8 | mb8, as_tuple=True)
    idx = r * grid[1] + c
    cells = CoarseMatchSet(b, idx, idx, torch.ones(len(b)), torch.zeros_like(b), grid, grid)
    bundle = crop_windows(cells, fused_a, fused_b, (pyr_a[1], pyr_a[2]), (pyr_b[1], pyr_b[2]))
    fa5, fb5 = net.decoder(bundle)
    shape = (pixel_mask_a.shape[0],) + tuple(pixel_mask_a.shape[-2:])
    out = []
    for f5, m8 in ((fa5, ma8), (fb5, mb8)):
        sel = m8[b, r, c]
        img, _ = paste_patches(net.mim_head(f5[sel]), b[sel], r[sel], c[sel], shape, net.config.recon_mode)
        out.append(img)
    return tuple(out)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(net: CrossModalNet, path, extra: dict | None = None):
    """Single ``.npz`` archive of named parameter arrays plus a config fingerprint."""
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    meta = {"config": asdict(net.config), "extra": extra or {}}
    arrays["__fingerprint__"] = np.array(net.config.fingerprint())
    arrays["__meta__"] = np.array(json.dumps(meta, default=list))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if "__fingerprint__" not in arrays:
        raise ValidationError(f"{path} is not a checkpoint (no fingerprint)")
    fingerprint = str(arrays.pop("__fingerprint__"))
    meta = json.loads(str(arrays.pop("__meta__")))
    return arrays, fingerprint, meta


def load_checkpoint(path, config: ModelConfig | None = None) -> CrossModalNet:
    """Rebuild a network from ``path``; refuses when ``config`` has another architecture.

    Runtime switches (thresholds, ablation toggles) are taken from ``config``
    when it is given.
    """
    arrays, fingerprint, meta = read_checkpoint(path)
    stored = ModelConfig.from_dict(meta["config"])
    if stored.fingerprint() != fingerprint:
        raise ValidationError(f"{path}: stored config does not match its fingerprint")
    if config is not None and config.fingerprint() != fingerprint:
        raise ValidationError(
            f"{path}: architecture fingerprint {fingerprint[:12]} does not match "
            f"the requested config {config.fingerprint()[:12]}"
        )
    net = CrossModalNet(config or stored)
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return net
