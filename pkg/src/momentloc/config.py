"""Training configuration: desk-scale defaults, a documented paper-scale
preset, and the flat key=value config-file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossWeights

OPTIMIZER_PRESETS = {
    # name: (default learning rate, linear decay to zero over the epochs?)
    "msdetr": (3e-4, False),
    "seqpan": (1e-4, True),
}


@dataclass
class TrainConfig:
    d_model: int = 64
    n_heads: int = 8
    n_encoder_layers: int = 5
    n_decoder_layers: int = 5
    n_templates: int = 10
    batch_size: int = 16
    epochs: int = 100
    early_stop_patience: int = 10
    learning_rate: float | None = None   # None -> optimizer preset default
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    dropout: float = 0.2
    gumbel_tau: float = 0.3
    seed: int = 0
    optimizer: str = "msdetr"
    denoise_groups: int = 1
    lambda_span: float = 1.0
    lambda_mask: float = 1.0
    lambda_iou: float = 1.0
    lambda_l1: float = 1.0
    iou_truncation: float = 0.5
    focal_gamma: float = 2.0
    layer_plan: str = ""                 # "" -> derived from layer count
    reduction: int = 2
    merge_kernel: int = 3
    merge_stride: int = 2
    merge_after: tuple = ()              # () -> derived
    scale_indices: tuple = ()            # () -> derived
    mask_rate: float = 0.15
    bins_per_scale: int = 4
    block_variant: str = "cross_modal"
    use_query_fusion: bool = False
    use_anchor_highlight: bool = True

    def __post_init__(self):
        if self.optimizer not in OPTIMIZER_PRESETS:
            raise ValueError(f"unknown optimizer preset {self.optimizer!r}")
        if not 0 <= self.denoise_groups <= 3:
            raise ValueError("denoise_groups must be in 0..3")
        if self.early_stop_patience > self.epochs and self.epochs > 0:
            raise ValueError("early_stop_patience cannot exceed epochs")
        for name in ("d_model", "n_heads", "n_encoder_layers", "n_decoder_layers",
                     "n_templates", "batch_size", "bins_per_scale"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.layer_plan:
            self.layer_plan = derive_layer_plan(self.n_encoder_layers)
        if len(self.layer_plan) != self.n_encoder_layers:
            raise ValueError("layer_plan length must equal n_encoder_layers")
        if self.block_variant != "cross_modal" and "R" in self.layer_plan:
            self.layer_plan = "B" * self.n_encoder_layers
        self.merge_after = tuple(self.merge_after) or derive_merge_after(
            self.n_encoder_layers)
        self.scale_indices = tuple(self.scale_indices) or derive_scale_indices(
            self.n_encoder_layers, self.merge_after)

    @property
    def effective_lr(self) -> float:
        return (self.learning_rate if self.learning_rate is not None
                else OPTIMIZER_PRESETS[self.optimizer][0])

    @property
    def decays_linearly(self) -> bool:
        return OPTIMIZER_PRESETS[self.optimizer][1]

    def loss_weights(self) -> LossWeights:
        return LossWeights(span=self.lambda_span, mask=self.lambda_mask,
                           iou=self.lambda_iou, l1=self.lambda_l1,
                           truncation=self.iou_truncation,
                           focal_gamma=self.focal_gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["merge_after"] = list(self.merge_after)
        d["scale_indices"] = list(self.scale_indices)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        coerced = dict(values)
        for key in ("merge_after", "scale_indices"):
            if key in coerced and coerced[key] is not None:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)


def derive_layer_plan(n_layers: int) -> str:
    """Sequence-reduced layers sit at the front, base layers behind."""
    if n_layers == 1:
        return "B"
    n_reduced = min(2, n_layers - 1)
    return "R" * n_reduced + "B" * (n_layers - n_reduced)


def derive_merge_after(n_layers: int) -> tuple:
    return tuple(i for i in (0, 1) if i < n_layers - 1)


def derive_scale_indices(n_layers: int, merge_after: tuple) -> tuple:
    """One scale per resolution plateau: the layer just before each merge plus
    the final layer."""
    indices = sorted({*merge_after, n_layers - 1})
    return tuple(indices)


def parse_kv_config(path) -> dict:
    """Flat key=value text; '#' starts a comment; types follow TrainConfig."""
    text = Path(path).read_text()
    type_map = {f.name: f for f in fields(TrainConfig)}
    values: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in type_map:
            raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return values


def _coerce(key: str, val: str):
    if key in ("layer_plan", "optimizer", "block_variant"):
        return val
    if key in ("use_query_fusion", "use_anchor_highlight"):
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key} expects a boolean, got {val!r}")
    if key in ("merge_after", "scale_indices"):
        return tuple(int(v) for v in val.split(",") if v != "")
    if key == "learning_rate" and val.lower() in ("none", ""):
        return None
    int_fields = {"d_model", "n_heads", "n_encoder_layers", "n_decoder_layers",
                  "n_templates", "batch_size", "epochs", "early_stop_patience",
                  "seed", "denoise_groups", "reduction", "merge_kernel",
                  "merge_stride", "bins_per_scale"}
    if key in int_fields:
        return int(val)
    return float(val)


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = parse_kv_config(path) if path else {}
    if overrides:
        values.update(overrides)
    return TrainConfig.from_dict(values)
