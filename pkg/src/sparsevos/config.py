"""Pipeline configuration and the flat ``key=value`` config file format.

Example file::

    # desk-scale defaults
    model.channels = 16,32,64
    model.window = 2,2
    router.tau = 0.7
    smr.s = 0.95
    memory.m = 6
    seed = 0

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .smr import SmrConfig
from .swr import ConfigError, RouterConfig
from .weights import ModelConfig


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    smr: SmrConfig = field(default_factory=SmrConfig)
    swr_enabled: bool = True
    smr_enabled: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.swr_enabled and self.model.d % 2:
            raise ConfigError(f"sparse window routing needs an even width, got d={self.model.d}")

    @property
    def m(self) -> int:
        return self.model.memory.m

    @property
    def dt(self) -> int:
        return self.model.memory.dt

    def with_modes(self, swr: bool, smr: bool) -> "PipelineConfig":
        return replace(self, swr_enabled=swr, smr_enabled=smr)

    def dense(self) -> "PipelineConfig":
        return self.with_modes(False, False)


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace("x", ",").split(",") if x.strip())


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key -> (section, field, parser)
_KEYS: dict[str, tuple[str, str, Callable[[str], object]]] = {
    "model.image_size": ("encoder", "image_size", _ints),
    "model.patch": ("encoder", "patch", int),
    "model.channels": ("encoder", "channels", _ints),
    "model.layers": ("encoder", "layers", _ints),
    "model.heads": ("encoder", "heads", int),
    "model.window": ("encoder", "window", _ints),
    "model.d": ("encoder", "d", int),
    "model.decoder_blocks": ("model", "decoder_blocks", int),
    "memory.m": ("memory", "m", int),
    "memory.dt": ("memory", "dt", int),
    "memory.layers": ("memory", "layers", int),
    "memory.pool": ("memory", "pool", int),
    "router.tau": ("router", "tau", float),
    "router.theta_obj": ("router", "theta_obj", float),
    "router.dilation_radius": ("router", "dilation_radius", int),
    "router.dilation_iterations": ("router", "dilation_iterations", int),
    "smr.s": ("smr", "s", float),
    "pipeline.swr": ("pipeline", "swr_enabled", _bool),
    "pipeline.smr": ("pipeline", "smr_enabled", _bool),
    "seed": ("pipeline", "seed", int),
}


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    sections: dict[str, dict[str, object]] = {s: {} for s in ("encoder", "model", "memory", "router", "smr", "pipeline")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            sections[section][name] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return build_config(sections, base or PipelineConfig())


def build_config(sections: dict[str, dict[str, object]], base: PipelineConfig) -> PipelineConfig:
    try:
        enc_kw = dict(sections["encoder"])
        enc = base.model.encoder
        d = enc_kw.pop("d", None)
        window = enc_kw.pop("window", None)
        if "channels" in enc_kw or d is not None:
            ch = tuple(enc_kw.get("channels", enc.channels))
            if d is not None:
                if "channels" in enc_kw and ch[-1] != d:
                    raise ConfigError(f"model.d={d} contradicts model.channels={ch}")
                ch = (*ch[:-1], d)
            enc_kw["channels"] = ch
        if window is not None:
            if len(window) != 2:
                raise ConfigError("model.window takes two extents")
            enc_kw["windows"] = (*tuple(enc_kw.get("windows", enc.windows))[:2], tuple(window))
        enc = replace(enc, **enc_kw)
        model = replace(base.model, encoder=enc, memory=replace(base.model.memory, **sections["memory"]), **sections["model"])
        return replace(
            base,
            model=model,
            router=replace(base.router, **sections["router"]),
            smr=replace(base.smr, **sections["smr"]),
            **sections["pipeline"],
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config(Path(path).read_text(), base)


def dump_config(cfg: PipelineConfig) -> str:
    enc, mem = cfg.model.encoder, cfg.model.memory
    lines = [
        f"model.image_size = {enc.image_size[0]},{enc.image_size[1]}",
        f"model.patch = {enc.patch}",
        f"model.channels = {','.join(map(str, enc.channels))}",
        f"model.layers = {','.join(map(str, enc.layers))}",
        f"model.heads = {enc.heads}",
        f"model.window = {enc.windows[2][0]},{enc.windows[2][1]}",
        f"model.decoder_blocks = {cfg.model.decoder_blocks}",
        f"memory.m = {mem.m}",
        f"memory.dt = {mem.dt}",
        f"memory.layers = {mem.layers}",
        f"memory.pool = {mem.pool}",
        f"router.tau = {cfg.router.tau}",
        f"router.theta_obj = {cfg.router.theta_obj}",
        f"router.dilation_radius = {cfg.router.dilation_radius}",
        f"router.dilation_iterations = {cfg.router.dilation_iterations}",
        f"smr.s = {cfg.smr.s}",
        f"pipeline.swr = {str(cfg.swr_enabled).lower()}",
        f"pipeline.smr = {str(cfg.smr_enabled).lower()}",
        f"seed = {cfg.seed}",
    ]
    return "\n".join(lines) + "\n"
