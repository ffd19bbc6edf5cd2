"""Experiment configuration: transfer modes, scale profiles, file loading.

A run is described by one JSON-serializable structure. Precedence when
building it: explicit overrides (CLI flags) beat config-file entries, which
beat the defaults implied by the chosen mode and profile. The fully resolved
config is what gets hashed and echoed into run manifests, so a manifest can
be replayed as a config file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

from .env import EnvConfig, TaskSpec, make_task_grids
from .errors import ConfigError
from .nets import LAYER_NAMES
from .pisco import Compose, RandomRotation, RandomShift
from .ppo import PPOConfig

MODES = ("DeNovo", "Frozen", "Finetuned", "FrozenFinetuned",
         "FrozenPisco", "FrozenSimSiam")

PROFILES = ("desk", "paper")

# indices into make_task_grids(): two obstacle columns (15 and 20, so the
# jump rule must generalize across distance) crossed with floor heights
# spanning the full range. Obstacle x stops at 20 because every grounded
# approach step before the trigger is an exploration decision a from-scratch
# run has to get right; at x=25 the downstream chain is 13 such steps and
# plain PPO no longer finds the jump inside the 200-iteration budget
_DESK_TASK_INDICES = (0, 5, 12, 19)

# per-mode training policy: prefix to freeze, learning rates, auxiliary loss
_MODE_DEFAULTS = {
    "DeNovo": dict(freeze_upto=None, head_lr=5e-4, encoder_lr=5e-4,
                   pisco_weight=0.0, pisco_kind="policy_kl"),
    "Frozen": dict(freeze_upto="Linear", head_lr=1e-3, encoder_lr=1e-3,
                   pisco_weight=0.0, pisco_kind="policy_kl"),
    "Finetuned": dict(freeze_upto=None, head_lr=1e-3, encoder_lr=1e-4,
                      pisco_weight=0.0, pisco_kind="policy_kl"),
    "FrozenFinetuned": dict(freeze_upto="Conv3", head_lr=1e-3, encoder_lr=1e-4,
                            pisco_weight=0.0, pisco_kind="policy_kl"),
    "FrozenPisco": dict(freeze_upto="Conv3", head_lr=1e-3, encoder_lr=1e-4,
                        pisco_weight=0.01, pisco_kind="policy_kl"),
    "FrozenSimSiam": dict(freeze_upto="Conv3", head_lr=1e-3, encoder_lr=1e-4,
                          pisco_weight=0.01, pisco_kind="negative_cosine"),
}

_PROFILE_DEFAULTS = {
    # desk normalizes advantages: at 16 episodes the raw advantage scale
    # (about +-60 once an agent first clears an obstacle) dwarfs the entropy
    # bonus, and a couple of crowded updates can unlearn the jump for good
    "desk": dict(iterations=200, episodes_per_iter=16, updates_per_iter=64,
                 batch_size=64, normalize_advantages=True),
    "paper": dict(iterations=500, episodes_per_iter=80, updates_per_iter=320,
                  batch_size=64),
}

# PPOConfig fields that live under the "pisco" section of the file schema
_PISCO_FIELD_MAP = {"weight": "pisco_weight", "kind": "pisco_kind",
                    "augment": "augment", "use_projector": "use_projector"}

_PPO_FILE_FIELDS = tuple(f.name for f in dataclasses.fields(PPOConfig)
                         if f.name not in _PISCO_FIELD_MAP.values())

_ENV_FILE_FIELDS = tuple(f.name for f in dataclasses.fields(EnvConfig)
                         if f.name != "calibrated")

_TOP_LEVEL_KEYS = ("mode", "profile", "seed", "freeze_upto", "checkpoint_in",
                   "out_dir", "deterministic", "svg", "ppo", "pisco", "env")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    profile: str
    seed: int
    freeze_upto: str | None
    ppo: PPOConfig
    env: EnvConfig
    checkpoint_in: str | None
    out_dir: str
    deterministic: bool
    svg: bool


def desk_task_grids() -> tuple[list[TaskSpec], list[TaskSpec]]:
    """The 4-task source and downstream grids of the desk profile."""
    source, downstream = make_task_grids()
    return ([source[i] for i in _DESK_TASK_INDICES],
            [downstream[i] for i in _DESK_TASK_INDICES])


def tasks_for(profile: str, stage: str) -> list[TaskSpec]:
    """Task list for a profile and pipeline stage (pretrain or transfer)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if stage not in ("pretrain", "transfer"):
        raise ConfigError(f"unknown stage {stage!r}")
    if profile == "desk":
        source, downstream = desk_task_grids()
    else:
        source, downstream = make_task_grids()
    return source if stage == "pretrain" else downstream


def parse_augment(spec):
    """Turn a JSON augmentation spec into the matching dataclass."""
    if isinstance(spec, (RandomShift, RandomRotation, Compose)):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"augmentation spec must be a dict with a 'kind': {spec!r}")
    kind = spec["kind"]
    extra = set(spec) - {"kind", "pad", "max_deg", "specs"}
    if extra:
        raise ConfigError(f"unknown augmentation keys {sorted(extra)}")
    if kind == "shift":
        return RandomShift(pad=int(spec.get("pad", 4)))
    if kind == "rotation":
        return RandomRotation(max_deg=float(spec.get("max_deg", 12.0)))
    if kind == "compose":
        return Compose(specs=tuple(parse_augment(s) for s in spec.get("specs", ())))
    raise ConfigError(f"unknown augmentation kind {kind!r}")


def augment_to_dict(spec) -> dict:
    if isinstance(spec, RandomShift):
        return {"kind": "shift", "pad": spec.pad}
    if isinstance(spec, RandomRotation):
        return {"kind": "rotation", "max_deg": spec.max_deg}
    if isinstance(spec, Compose):
        return {"kind": "compose", "specs": [augment_to_dict(s) for s in spec.specs]}
    raise ConfigError(f"unknown augmentation spec {spec!r}")


def load_config_file(path: str) -> dict:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _check_keys(section: dict, allowed, label: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {label} keys {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")


def _normalize_freeze(value):
    if value is None or value == "none":
        return None
    if value not in LAYER_NAMES:
        raise ConfigError(f"freeze_upto must be one of {LAYER_NAMES} or 'none', "
                          f"got {value!r}")
    return value


def build_config(config_file: str | None = None, **overrides) -> ExperimentConfig:
    """Resolve an experiment config from defaults, a file, and overrides.

    `overrides` accepts the top-level fields (mode, profile, seed,
    freeze_upto, checkpoint_in, out_dir, deterministic, svg) plus any
    PPOConfig field name; key presence marks an explicit choice, so later
    layers only replace what they actually set.
    """
    file_data = load_config_file(config_file) if config_file else {}
    _check_keys(file_data, _TOP_LEVEL_KEYS, "config")
    allowed_overrides = set(_TOP_LEVEL_KEYS) - {"ppo", "pisco", "env"} \
        | set(f.name for f in dataclasses.fields(PPOConfig))
    _check_keys(overrides, allowed_overrides, "override")

    def pick(key, default):
        if key in overrides:
            return overrides[key]
        if key in file_data:
            return file_data[key]
        return default

    mode = pick("mode", "DeNovo")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    profile = pick("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")

    mode_d = _MODE_DEFAULTS[mode]
    ppo_kwargs = dict(_PROFILE_DEFAULTS[profile])
    ppo_kwargs.update({k: v for k, v in mode_d.items() if k != "freeze_upto"})

    file_ppo = file_data.get("ppo", {})
    _check_keys(file_ppo, _PPO_FILE_FIELDS, "ppo")
    ppo_kwargs.update(file_ppo)
    file_pisco = file_data.get("pisco", {})
    _check_keys(file_pisco, _PISCO_FIELD_MAP, "pisco")
    for k, v in file_pisco.items():
        ppo_kwargs[_PISCO_FIELD_MAP[k]] = v

    for name in (f.name for f in dataclasses.fields(PPOConfig)):
        if name in overrides:
            ppo_kwargs[name] = overrides[name]
    ppo_kwargs["augment"] = parse_augment(ppo_kwargs.get("augment",
                                                         RandomShift(pad=4)))

    file_env = file_data.get("env", {})
    _check_keys(file_env, _ENV_FILE_FIELDS, "env")

    freeze = _normalize_freeze(pick("freeze_upto", mode_d["freeze_upto"]))
    out_dir = pick("out_dir", os.environ.get("PISCO_OUT_DIR", "runs"))

    try:
        ppo = PPOConfig(**ppo_kwargs)
        env = EnvConfig(**file_env)
    except TypeError as exc:
        raise ConfigError(str(exc))
    return ExperimentConfig(mode=mode, profile=profile,
                            seed=int(pick("seed", 0)), freeze_upto=freeze,
                            ppo=ppo, env=env,
                            checkpoint_in=pick("checkpoint_in", None),
                            out_dir=out_dir,
                            deterministic=bool(pick("deterministic", False)),
                            svg=bool(pick("svg", False)))


def to_json_dict(cfg: ExperimentConfig) -> dict:
    """The effective config as a plain dict matching the file schema."""
    ppo = {}
    pisco = {}
    for f in dataclasses.fields(PPOConfig):
        value = getattr(cfg.ppo, f.name)
        if f.name == "augment":
            pisco["augment"] = augment_to_dict(value)
        elif f.name in _PISCO_FIELD_MAP.values():
            short = next(k for k, v in _PISCO_FIELD_MAP.items() if v == f.name)
            pisco[short] = value
        else:
            ppo[f.name] = value
    env = {name: getattr(cfg.env, name) for name in _ENV_FILE_FIELDS}
    return {"mode": cfg.mode, "profile": cfg.profile, "seed": cfg.seed,
            "freeze_upto": cfg.freeze_upto, "checkpoint_in": cfg.checkpoint_in,
            "out_dir": cfg.out_dir, "deterministic": cfg.deterministic,
            "svg": cfg.svg, "ppo": ppo, "pisco": pisco, "env": env}


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the experiment's identity: everything except output plumbing."""
    payload = to_json_dict(cfg)
    for key in ("out_dir", "checkpoint_in", "svg", "deterministic"):
        payload.pop(key)
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
