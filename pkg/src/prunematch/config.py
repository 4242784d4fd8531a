"""Pipeline configuration: one flat record, JSON round-trippable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError

VARIANTS = ("implicit", "direct")
SUPERVISE = ("last", "all")
COVIS_MODES = ("bbox", "pointwise")
IPRUNE_LABELS = ("covisible", "selected", "depth")
TEXTURES = ("blobs", "gratings", "mixed")


@dataclass
class PipelineConfig:
    # pruning
    alpha: float = 0.5
    n_blocks: int = 4
    pruning_variant: str = "implicit"
    dics_from_block: int = 1
    supervise: str = "last"
    discard_after_prune: bool = False
    covis_mode: str = "bbox"
    iprune_labels: str = "covisible"
    gumbel_tau: float = 1.0
    # model dims
    d_c: int = 64
    d_f: int = 32
    enc_c1: int = 16
    enc_c2: int = 32
    heads: int = 1
    # matching
    tau_m: float = 0.1
    theta_c: float = 0.2
    w: int = 5
    # losses
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    fine_sample_ratio: float = 0.3
    fine_var_floor: float = 0.1
    w_sprune: float = 0.5
    w_iprune: float = 0.3
    w_coarse: float = 1.0
    w_fine: float = 1.0
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 2
    steps: int = 2000
    log_every: int = 50
    seed: int = 0
    # synthetic scenes
    image_size: tuple = (64, 64)
    texture: str = "mixed"
    plane_depth: float = 4.0
    max_rotation_deg: float = 8.0
    max_translation: float = 0.25
    invalid_depth_fraction: float = 0.15
    train_pairs: int = 100_000

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(0.0 < self.alpha <= 1.0, f"alpha must lie in (0, 1], got {self.alpha}")
        need(self.n_blocks >= 1, "n_blocks must be positive")
        need(self.pruning_variant in VARIANTS, f"pruning_variant must be one of {VARIANTS}")
        need(self.supervise in SUPERVISE, f"supervise must be one of {SUPERVISE}")
        need(self.covis_mode in COVIS_MODES, f"covis_mode must be one of {COVIS_MODES}")
        need(self.iprune_labels in IPRUNE_LABELS, f"iprune_labels must be one of {IPRUNE_LABELS}")
        need(self.texture in TEXTURES, f"texture must be one of {TEXTURES}")
        need(self.dics_from_block >= 1, "dics_from_block counts blocks from 1")
        need(self.d_c % 4 == 0, "d_c must be divisible by 4 for the 2-D positional code")
        need(self.d_c % self.heads == 0, "d_c must be divisible by heads")
        need(self.w % 2 == 1 and self.w >= 1, "refinement window w must be odd")
        need(self.gumbel_tau > 0, "gumbel_tau must be positive")
        need(0.0 < self.fine_sample_ratio <= 1.0, "fine_sample_ratio must lie in (0, 1]")
        need(len(self.image_size) == 2 and all(v % 8 == 0 and v > 0 for v in self.image_size),
             f"image_size must be two positive multiples of 8, got {self.image_size}")
        need(0.0 <= self.invalid_depth_fraction < 1.0, "invalid_depth_fraction must lie in [0, 1)")
        need(self.batch_size >= 1 and self.steps >= 0, "batch_size >= 1 and steps >= 0 required")

    @property
    def dics_enabled(self):
        return self.dics_from_block <= self.n_blocks

    def dics_at(self, block):
        """Whether DICS runs after 1-based ``block``."""
        return block >= self.dics_from_block

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def baseline_config(cfg):
    """The unpruned reference: every coarse cell kept, DICS switched off."""
    return cfg.replace(alpha=1.0, dics_from_block=cfg.n_blocks + 1)


def ablation_configs(cfg):
    """Config-only regimes for the direct/implicit, supervision and discard ablations."""
    return {
        "full": cfg,
        "no_self_pruning": cfg.replace(alpha=1.0),
        "no_interactive_pruning": cfg.replace(dics_from_block=cfg.n_blocks + 1),
        "direct_interactive": cfg.replace(pruning_variant="direct"),
        "S1_D1": cfg.replace(supervise="last", discard_after_prune=True),
        "S1_D0": cfg.replace(supervise="last", discard_after_prune=False),
        "S0_D1": cfg.replace(supervise="all", discard_after_prune=True),
        "S0_D0": cfg.replace(supervise="all", discard_after_prune=False),
    }


CONFIG_FIELDS = tuple(dataclasses.fields(PipelineConfig))
