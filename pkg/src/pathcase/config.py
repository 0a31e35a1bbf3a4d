"""Flat ``namespace.key = value`` configuration with typed defaults.

Defaults reproduce the full-scale recipe.  ``desk_overrides`` holds the
small-model profile used for laptop runs and the acceptance suite.
"""

from __future__ import annotations

from .align import AlignConfig
from .encoder import CaseTransformerConfig, ProjectionConfig, SlideEncoderConfig
from .probes import ProbeConfig
from .ssl import SSLConfig
from .synth import SynthSpec
from .views import ViewConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model.d_patch": 384,
    "model.dim": 768,
    "model.heads": 12,
    "model.layers": 6,
    "model.ffn_dim": 3072,
    "model.registers": 4,
    "model.mlp_dropout": 0.1,
    "model.attn_dropout": 0.0,
    "model.drop_path": 0.1,
    "model.precision": 64,
    "proj.hidden": 2048,
    "proj.bottleneck": 256,
    "proj.prototypes": 8192,
    "ssl.global_crops": 2,
    "ssl.global_crop": 20,
    "ssl.local_crops": 4,
    "ssl.local_crop": 12,
    "ssl.min_valid_ratio": 0.25,
    "ssl.max_attempts": 3,
    "ssl.p_hflip": 0.5,
    "ssl.p_vflip": 0.5,
    "ssl.p_rotate": 0.5,
    "ssl.mask_min": 0.1,
    "ssl.mask_max": 0.5,
    "ssl.mask_min_block": 4,
    "ssl.mask_min_aspect": 0.3,
    "ssl.mask_prob": 0.5,
    "ssl.student_temp": 0.1,
    "ssl.teacher_temp_start": 0.04,
    "ssl.teacher_temp": 0.07,
    "ssl.teacher_patch_temp_start": 0.04,
    "ssl.teacher_patch_temp": 0.07,
    "ssl.temp_warmup_epochs": 30.0,
    "ssl.momentum_start": 0.996,
    "ssl.momentum_end": 1.0,
    "ssl.center_momentum": 0.9,
    "ssl.centering": True,
    "ssl.shared_center": False,
    "ssl.freeze_proto_epochs": 3.0,
    "ssl.base_lr": 5e-4,
    "ssl.lr_ref_batch": 256,
    "ssl.min_lr": 2e-6,
    "ssl.warmup_epochs": 5.0,
    "ssl.wd_start": 0.04,
    "ssl.wd_end": 0.4,
    "ssl.clip": 0.3,
    "ssl.micro_batch": 64,
    "ssl.accum_steps": 2,
    "ssl.epochs": 200,
    "ssl.steps": 0,
    "case.layers": 3,
    "case.heads": 12,
    "case.ffn_dim": 3072,
    "case.dropout": 0.1,
    "case.layerscale": 1e-5,
    "case.token_std": 0.02,
    "case.init_std": 0.02,
    "head.kind": "mlp",
    "head.dropout": 0.1,
    "align.lr": 5e-5,
    "align.min_lr": 2e-7,
    "align.weight_decay": 0.4,
    "align.clip": 0.3,
    "align.micro_batch": 1,
    "align.accum_steps": 128,
    "align.epochs": 12,
    "align.token_dropout": 0.1,
    "align.smoothing": 0.03,
    "align.bins_min": 2,
    "align.bins_target": 8,
    "align.bins_max": 16,
    "align.val_fraction": 0.05,
    "align.token_cap": 1024,
    "align.p_hflip": 0.5,
    "align.p_vflip": 0.5,
    "align.p_rotate": 0.5,
    "probe.epochs": 200,
    "probe.batch_size": 64,
    "probe.lr": 1e-3,
    "probe.weight_decay": 1e-2,
    "probe.dropout": 0.25,
    "probe.folds": 5,
    "probe.val_fraction": 0.2,
    "probe.linear_max_iter": 500,
    "diag.thresholds": "0.8,0.9,0.95",
    "diag.ks": "5,10,20,30",
    "diag.rho": 0.8,
    "diag.repeats": 20,
    "diag.downsample": 56.0,
    "synth.n_slides": 500,
    "synth.grid_min": 10,
    "synth.grid_max": 16,
    "synth.d_patch": 16,
    "synth.n_sites": 4,
    "synth.n_tissue": 6,
    "synth.noise": 0.5,
    "synth.lesion_min": 0.08,
    "synth.lesion_max": 0.25,
    "synth.label_prob": 0.9,
    "synth.second_slide_prob": 1 / 3,
}


def _convert(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config(text: str, base: dict | None = None) -> dict:
    """Parse ``key = value`` lines over ``base`` (the full-scale defaults by default)."""
    cfg = dict(DEFAULTS if base is None else base)
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        try:
            cfg[key] = _convert(raw, DEFAULTS[key])
        except ValueError:
            kind = type(DEFAULTS[key]).__name__
            raise ConfigError(f"line {lineno}: {key} expects {kind}, got {raw!r}") from None
        seen[key] = lineno
    return cfg


def load_config(path=None, base=None) -> dict:
    if path is None:
        return dict(DEFAULTS if base is None else base)
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


DESK_TEXT = """\
# laptop-scale profile: narrow model, small crops, short schedules
model.d_patch = 16
model.dim = 32
model.heads = 4
model.layers = 2
model.ffn_dim = 64
model.registers = 2
proj.hidden = 64
proj.bottleneck = 32
proj.prototypes = 64
ssl.global_crop = 8
ssl.local_crop = 5
ssl.micro_batch = 8
ssl.accum_steps = 2
ssl.base_lr = 0.016
ssl.warmup_epochs = 1
ssl.temp_warmup_epochs = 3
ssl.freeze_proto_epochs = 0.5
ssl.steps = 200
case.layers = 1
case.heads = 4
case.ffn_dim = 64
case.layerscale = 1.0
case.init_std = 0.2
align.lr = 1e-3
align.min_lr = 2e-5
align.weight_decay = 0.02
align.accum_steps = 8
align.epochs = 40
align.val_fraction = 0.1
synth.n_slides = 1500
"""


def desk_config() -> dict:
    return parse_config(DESK_TEXT)


def _ns(cfg, prefix):
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def encoder_config(cfg) -> SlideEncoderConfig:
    m = _ns(cfg, "model.")
    m.pop("precision")
    return SlideEncoderConfig(**m)


def projection_config(cfg) -> ProjectionConfig:
    return ProjectionConfig(**_ns(cfg, "proj."))


def case_config(cfg) -> CaseTransformerConfig:
    return CaseTransformerConfig(**_ns(cfg, "case."))


def view_config(cfg) -> ViewConfig:
    s = _ns(cfg, "ssl.")
    return ViewConfig(
        n_global=s["global_crops"], global_size=s["global_crop"], n_local=s["local_crops"],
        local_size=s["local_crop"], min_valid_ratio=s["min_valid_ratio"],
        max_attempts=s["max_attempts"], p_hflip=s["p_hflip"], p_vflip=s["p_vflip"],
        p_rotate=s["p_rotate"], mask_min=s["mask_min"], mask_max=s["mask_max"],
        mask_min_block=s["mask_min_block"], mask_min_aspect=s["mask_min_aspect"],
        mask_prob=s["mask_prob"],
    )


def ssl_config(cfg) -> SSLConfig:
    s = _ns(cfg, "ssl.")
    fields = SSLConfig.__dataclass_fields__
    return SSLConfig(**{k: v for k, v in s.items() if k in fields})


def align_config(cfg) -> AlignConfig:
    a = _ns(cfg, "align.")
    bins = (a.pop("bins_min"), a.pop("bins_target"), a.pop("bins_max"))
    return AlignConfig(**a, bins=bins, head=cfg["head.kind"], head_dropout=cfg["head.dropout"])


def probe_config(cfg) -> ProbeConfig:
    p = _ns(cfg, "probe.")
    p.pop("linear_max_iter")
    return ProbeConfig(**p)


def synth_spec(cfg) -> SynthSpec:
    return SynthSpec(**_ns(cfg, "synth."))


def floats(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def ints(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip())
