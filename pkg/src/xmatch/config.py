"""Run configuration: flat ``key = value`` files, profiles and override precedence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ._validation import InputError, ValidationError
from .augment import AugmentParams
from .model import ModelConfig
from .supervision import LossWeights

PROFILES = {
    "toy": dict(widths=(8, 16, 32), blocks=(1, 1, 1), coarse_nhead=4, coarse_layers=2,
                max_side=64, batch_size=8, epochs=200, lr=2e-3, mim_steps=500),
    "paper": dict(widths=(64, 128, 256), blocks=(2, 2, 2), coarse_nhead=8, coarse_layers=4,
                  max_side=640, batch_size=4, epochs=30, lr=1e-3, mim_steps=20000),
}


@dataclass
class RunConfig:
    profile: str = "toy"
    # model
    widths: tuple = (8, 16, 32)
    blocks: tuple = (1, 1, 1)
    coarse_nhead: int = 4
    coarse_layers: int = 2
    fine_nhead: int = 1
    tau: float = 0.1
    theta_c: float = 0.3
    theta_f: float = 0.1
    recon_mode: str = "resample"
    # loss
    lambda_c: float = 0.5
    lambda_f: float = 0.3
    lambda_sub: float = 1e4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # augmentation
    aug_w0: float = 2 * math.pi / 3
    aug_w_r: float = math.pi / 2
    aug_theta_r: float = math.pi / 2
    aug_hue: float = 0.1
    aug_saturation: float = 0.3
    aug_value: float = 0.3
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    blur_probability: float = 0.5
    # schedule
    lr: float = 2e-3
    batch_size: int = 8
    epochs: int = 200
    max_windows_per_pair: int = 64
    mim_steps: int = 500
    mask_ratio: float = 0.5
    mask_patch: int = 64
    sheet_every: int = 100
    n_synthetic: int = 200
    seed: int = 0
    # data and evaluation
    max_side: int = 64
    pose_threshold_px: float = 1.5
    homography_threshold_px: float = 3.0
    # ablation switches
    pretrain: bool = True
    augment: bool = True
    one_to_one_only: bool = False
    use_sprm: bool = True
    use_theta_f: bool = True
    positional_bias: bool = True

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=self.widths, blocks=self.blocks, coarse_nhead=self.coarse_nhead,
            coarse_layers=self.coarse_layers, fine_nhead=self.fine_nhead,
            positional_bias=self.positional_bias, tau=self.tau, theta_c=self.theta_c,
            theta_f=self.theta_f, one_to_one_only=self.one_to_one_only,
            use_sprm=self.use_sprm, use_theta_f=self.use_theta_f, recon_mode=self.recon_mode,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_f, self.lambda_sub, self.focal_alpha, self.focal_gamma)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(w0=self.aug_w0, w_r=self.aug_w_r, theta_r=self.aug_theta_r,
                             hsv_jitter_ranges=(self.aug_hue, self.aug_saturation, self.aug_value),
                             blur_kernel=self.blur_kernel, blur_sigma=self.blur_sigma,
                             blur_probability=self.blur_probability, seed=self.seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _expected_type(key):
    return type(getattr(_DEFAULTS, key))


def coerce(key: str, raw):
    """Convert ``raw`` (usually a string) to the type of ``key``'s default."""
    if key not in _FIELDS:
        raise ValidationError(f"unknown config key {key!r}")
    kind = _expected_type(key)
    if not isinstance(raw, str):
        if kind is tuple and isinstance(raw, (list, tuple)):
            return tuple(int(v) for v in raw)
        if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind):
            return raw
        raise ValidationError(f"config key {key!r}: expected {kind.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is tuple:
            return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        name = "comma-separated ints" if kind is tuple else kind.__name__
        raise ValidationError(f"config key {key!r}: expected {name}, got {text!r}") from None


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def resolve_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then profile defaults, then the file, then ``overrides`` (highest)."""
    from_file = read_config_file(path) if path else {}
    overrides = {k: coerce(k, v) for k, v in (overrides or {}).items() if v is not None}
    profile = overrides.get("profile", from_file.get("profile", _DEFAULTS.profile))
    if profile not in PROFILES:
        raise ValidationError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    values = asdict(_DEFAULTS)
    values.update(PROFILES[profile])
    values.update(from_file)
    values.update(overrides)
    values["profile"] = profile
    cfg = RunConfig(**values)
    cfg.model_config()  # surfaces invalid combinations early
    cfg.loss_weights()
    cfg.augment_params().validate()
    return cfg


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_snapshot(cfg: RunConfig, path):
    """Write the fully resolved config in the same flat format it is read from."""
    lines = [f"{k} = {format_value(v)}" for k, v in asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
