"""Run configuration and the `key = value` config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .decoder import GenerationConfig
from .errors import ConfigError
from .text import CONTEXTUAL_DIM

VARIANTS = ("hred", "mhred", "mtrans", "multrans")

# Dropout on the slot-attention output: the text-only variant uses the
# lower rate, multimodal variants the higher one.
DROPOUT_BY_VARIANT = {"hred": 0.3, "mhred": 0.5, "mtrans": 0.5, "multrans": 0.5}


@dataclass
class RunConfig:
    variant: str = "mhred"
    use_sa: bool = True
    use_kb: bool = True
    use_pgpt: bool = False
    d_h: int = 512
    d_e: int = 512
    d_img: int = 64
    dropout_sa: float = -1.0  # -1 = pick the variant default
    epochs: int = 15
    batch: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    slot_loss_weight: float = 1.0
    min_count: int = 1
    sa_pool: str = "mean"  # "mean" | "final": text vector fed to the context GRU
    seed: int = 0
    max_len: int = 20
    beam_width: int = 1
    length_norm_alpha: float = 0.7

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.use_pgpt:
            if self.d_e not in (512, CONTEXTUAL_DIM):
                raise ConfigError(
                    f"d_e={self.d_e} is inconsistent with use_pgpt (providers are "
                    f"{CONTEXTUAL_DIM}-dimensional)"
                )
            self.d_e = CONTEXTUAL_DIM
        if self.dropout_sa < 0:
            self.dropout_sa = DROPOUT_BY_VARIANT[self.variant]
        if not 0.0 <= self.dropout_sa < 1.0:
            raise ConfigError(f"dropout_sa must be in [0, 1), got {self.dropout_sa}")
        if self.sa_pool not in ("mean", "final"):
            raise ConfigError(f"sa_pool must be 'mean' or 'final', got {self.sa_pool!r}")
        for name in ("d_h", "d_e", "d_img", "epochs", "batch", "max_len", "beam_width", "min_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.variant in ("mtrans", "multrans") and (2 * self.d_h) % 4 != 0:
            raise ConfigError("transformer variants need 2*d_h divisible by 4 heads")
        if self.variant == "multrans" and self.d_h % 4 != 0:
            raise ConfigError("the image transformer needs d_h divisible by 4 heads")

    @property
    def enc_dim(self) -> int:
        """Embedding dimension seen by the text and KB encoders."""
        return CONTEXTUAL_DIM if self.use_pgpt else self.d_e

    def gencfg(self) -> GenerationConfig:
        return GenerationConfig(
            max_len=self.max_len,
            beam_width=self.beam_width,
            length_norm_alpha=self.length_norm_alpha,
        )


_BOOL_KEYS = {"use_sa", "use_kb", "use_pgpt"}
_INT_KEYS = {
    "d_h", "d_e", "d_img", "epochs", "batch", "seed", "max_len", "beam_width", "min_count",
}
_FLOAT_KEYS = {
    "dropout_sa", "lr", "weight_decay", "clip_norm", "slot_loss_weight", "length_norm_alpha",
}
_STR_KEYS = {"variant", "sa_pool"}
_ALL_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def _parse_value(key: str, value: str):
    try:
        if key in _BOOL_KEYS:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for config key {key!r}")


def config_from_lines(lines, source: str = "<config>") -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, value)
    return RunConfig(**values)


def read_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_lines(fh, source=str(path))


def config_to_text(cfg: RunConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"
