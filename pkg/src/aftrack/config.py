"""Run configuration: one flat key=value file covering every component.

Keys carry a section prefix (`net.`, `train.`, `track.`, `scene.`, `paths.`)
or are top-level (`seed`).  Unknown keys are an error that names the key;
every section is validated by its own dataclass before anything runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .network import NetConfig
from .synth import SyntheticSceneConfig
from .tracker import TrackHyper
from .train import TrainConfig


def _parse_bool(v: str) -> bool:
    if v == "true":
        return True
    if v == "false":
        return False
    raise ValueError(f"expected true or false, got {v!r}")


def _parse_int(v: str) -> int:
    return int(v, 10)


def _parse_ints(v: str) -> tuple[int, ...]:
    return tuple(int(t, 10) for t in v.split(","))


def _parse_float_pair(v: str) -> tuple[float, float]:
    parts = v.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {v!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_opt_float_pair(v: str):
    return None if v == "none" else _parse_float_pair(v)


def _parse_opt_int_pair(v: str):
    if v == "none":
        return None
    parts = v.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {v!r}")
    return (int(parts[0], 10), int(parts[1], 10))


def _parse_pair_list(v: str) -> tuple[tuple[int, int], ...]:
    """Dilation branches: semicolon-separated pairs, e.g. 1,1;1,2;2,1."""
    out = []
    for token in v.split(";"):
        parts = token.split(",")
        if len(parts) != 2:
            raise ValueError(f"bad dilation pair {token!r}")
        out.append((int(parts[0], 10), int(parts[1], 10)))
    return tuple(out)


_NET = {
    "stage_channels": _parse_ints,
    "stage_strides": _parse_ints,
    "stage_dilations": _parse_ints,
    "combined_channels": _parse_int,
    "kernel_size": _parse_int,
    "tower_depth": _parse_int,
    "dilation_set": _parse_pair_list,
    "exemplar_size": _parse_int,
    "search_size": _parse_int,
    "couple_offsets": _parse_bool,
}

_TRAIN = {
    "epochs": _parse_int,
    "pairs_per_epoch": _parse_int,
    "batch_size": _parse_int,
    "warmup_lr": float,
    "peak_lr": float,
    "floor_lr": float,
    "momentum": float,
    "weight_decay": float,
    "freeze_backbone_epochs": _parse_int,
    "grad_clip": float,
    "label_radius": float,
    "max_frame_gap": _parse_int,
    "shift_jitter": float,
    "scale_jitter": float,
    "pool_sequences": _parse_int,
    "pool_length": _parse_int,
    "frame_size": _parse_int,
    "lambda1": float,
    "lambda2": float,
}

_TRACK = {
    "omega": float,
    "k_pen": float,
    "beta": float,
    "omega_online": float,
    "window_weight": float,
    "exemplar_size": _parse_int,
    "search_size": _parse_int,
    "penalty_literal": _parse_bool,
}

_SCENE = {
    "frame_size": _parse_int,
    "length": _parse_int,
    "target_kind": str,
    "target_w": float,
    "target_h": float,
    "velocity": _parse_float_pair,
    "scale_drift": float,
    "start": _parse_opt_float_pair,
    "distractors": _parse_int,
    "occlusion": _parse_opt_int_pair,
    "noise": float,
    "seed": _parse_int,
}

_PATH_KEYS = ("weights", "out", "sequence")


@dataclass(frozen=True)
class RunPaths:
    weights: str | None = None
    out: str | None = None
    sequence: str | None = None


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    track: TrackHyper = field(default_factory=TrackHyper)
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    paths: RunPaths = field(default_factory=RunPaths)
    seed: int = 0


def parse_kv_text(text: str, source: str = "config") -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = value
    return out


def _build_section(pairs: dict[str, str], prefix: str, table: dict, defaults,
                   source: str):
    kwargs = {}
    for key, raw in pairs.items():
        name = key[len(prefix):]
        conv = table.get(name)
        if conv is None:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            kwargs[name] = conv(raw)
        except ValueError as err:
            raise ConfigError(f"{source}: bad value for {key!r}: {err}") from None
    if not kwargs:
        return defaults, set()
    return replace(defaults, **kwargs), set(kwargs)


def config_from_pairs(pairs: dict[str, str], source: str = "config") -> RunConfig:
    sections: dict[str, dict[str, str]] = {
        "net": {}, "train": {}, "track": {}, "scene": {}, "paths": {}
    }
    seed = 0
    for key, value in pairs.items():
        if key == "seed":
            try:
                seed = _parse_int(value)
            except ValueError:
                raise ConfigError(f"{source}: bad value for 'seed': {value!r}") from None
            continue
        prefix = key.split(".", 1)[0]
        if "." not in key or prefix not in sections:
            raise ConfigError(f"{source}: unknown key {key!r}")
        sections[prefix][key] = value

    net, _ = _build_section(sections["net"], "net.", _NET, NetConfig(), source)
    train, _ = _build_section(sections["train"], "train.", _TRAIN, TrainConfig(),
                              source)
    scene, _ = _build_section(sections["scene"], "scene.", _SCENE,
                              SyntheticSceneConfig(), source)

    # The tracker's crop sizes follow the network unless set explicitly, in
    # which case they must agree (tracker.init would reject them anyway, but
    # a config error before any work starts names the key).
    track_defaults = replace(TrackHyper(), exemplar_size=net.exemplar_size,
                             search_size=net.search_size)
    track, given = _build_section(sections["track"], "track.", _TRACK,
                                  track_defaults, source)
    for attr in ("exemplar_size", "search_size"):
        if attr in given and getattr(track, attr) != getattr(net, attr):
            raise ConfigError(
                f"{source}: track.{attr}={getattr(track, attr)} does not match "
                f"net.{attr}={getattr(net, attr)}"
            )

    path_kwargs = {}
    for key, value in sections["paths"].items():
        name = key[len("paths."):]
        if name not in _PATH_KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        path_kwargs[name] = value
    paths = RunPaths(**path_kwargs)

    return RunConfig(net=net, train=train, track=track, scene=scene,
                     paths=paths, seed=seed)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except OSError as err:
        raise ConfigError(f"cannot read config {p}: {err}") from None
    return config_from_pairs(parse_kv_text(text, source=str(p)), source=str(p))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(f"{a},{b}" for a, b in v)
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def format_config(run: RunConfig) -> str:
    """Render a RunConfig back to its file form (every key explicit)."""
    lines = [f"seed = {run.seed}"]
    for prefix, obj in (("net", run.net), ("train", run.train),
                        ("track", run.track), ("scene", run.scene)):
        lines.append("")
        for f in fields(obj):
            lines.append(f"{prefix}.{f.name} = {_format_value(getattr(obj, f.name))}")
    extra = [
        f"paths.{name} = {getattr(run.paths, name)}"
        for name in _PATH_KEYS if getattr(run.paths, name) is not None
    ]
    if extra:
        lines.append("")
        lines.extend(extra)
    return "\n".join(lines) + "\n"
