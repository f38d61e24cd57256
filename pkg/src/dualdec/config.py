"""All run hyperparameters in one validated record, plus the `key = value`
config-file loader.  Unknown keys are rejected so a typo cannot silently
fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

STAGES = ("forward", "backward", "backward_fixed", "joint", "joint_reg")


@dataclass
class TrainConfig:
    # loss weights
    alpha: float = 0.9
    lam: float = 1.0  # char default; bpe runs use 1e-4
    gamma: float = 1.0

    # optimization
    batch_size: int = 8
    patience: int = 3
    eps: float = 1e-8
    eps_decay: float = 0.01
    rho: float = 0.95
    max_epochs: int = 30
    grad_clip: float = 5.0
    seed: int = 0

    # schedule and targets
    stages: tuple[str, ...] = ("forward", "backward_fixed", "joint_reg")
    target_kind: str = "char"
    merges: int = 100
    bpe_r2l_mode: str = "separate"  # "separate" | "shared"

    # model dimensions (paper-scale 4x1024/1024 stays reachable here)
    feat_dim: int = 16
    enc_layers: int = 1
    enc_units: int = 32
    enc_proj: int = 32
    enc_subsample: int = 1  # frames kept every N per layer; 1 = none
    dec_units: int = 32
    embed_dim: int = 16
    att_dim: int = 32
    att_conv_channels: int = 8
    att_conv_width: int = 11
    init_scale: float = 0.1

    # decoding
    beam_size: int = 20
    max_len_ratio: float = 2.0

    # recorded-assumption switches
    omega_compare: str = "probs"  # "probs" | "logits"
    omega_stop_grad: str = "none"  # "none" | "l2r" | "r2l"
    generate_from_prev_state: bool = False
    val_metric: str = "token_acc"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.eps_decay < 1.0:
            raise ValueError(f"eps_decay must be in (0, 1), got {self.eps_decay}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not self.stages:
            raise ValueError("stage list must be non-empty")
        for s in self.stages:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}; valid: {STAGES}")
        if self.target_kind not in ("char", "bpe"):
            raise ValueError(f"target_kind must be char or bpe, got {self.target_kind!r}")
        if self.att_conv_width % 2 == 0:
            raise ValueError(f"att_conv_width must be odd, got {self.att_conv_width}")
        if self.omega_compare not in ("probs", "logits"):
            raise ValueError(f"omega_compare must be probs or logits, got {self.omega_compare!r}")
        if self.omega_stop_grad not in ("none", "l2r", "r2l"):
            raise ValueError(f"omega_stop_grad must be none, l2r or r2l, got {self.omega_stop_grad!r}")

    def override(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
# accepted spelling in config files for the keyword-clashing field
_ALIASES = {"lambda": "lam"}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    if ftype.startswith("tuple"):
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return raw


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key = value` lines; blank lines and #-comments are skipped;
    any unknown key is an error."""
    overrides = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, eq, value = stripped.partition("=")
        if not eq:
            raise ValueError(f"{path}:{ln}: expected `key = value`, got {line!r}")
        key = key.strip()
        key = _ALIASES.get(key, key)
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
        overrides[key] = _parse_value(key, value)
    return (base or TrainConfig()).override(**overrides)
