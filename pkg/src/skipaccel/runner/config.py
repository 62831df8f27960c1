"""Model, workload and performance parameters plus the key=value config format.

Config grammar: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Keys are ``section.field`` with section one of ``model``,
``workload``, ``perf``, ``run``; values are Python-style literals for ints,
floats and booleans (``true``/``false``), bare words otherwise. Unknown keys
and malformed lines are errors carrying the line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, msg: str, lineno: int | None = None):
        super().__init__(f"line {lineno}: {msg}" if lineno else msg)
        self.lineno = lineno


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_head: int = 8
    d_ff: int = 64
    vocab: int = 64
    skip_prob: float = 0.25
    seed: int = 0
    weight_mode: str = "fp16"
    routing: str = "deterministic_argmax"
    rms_only: bool = False
    independent_ffn: bool = True

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model={self.d_model} must equal n_heads*d_head={self.n_heads * self.d_head}")
        if self.d_head % 2:
            raise ConfigError("d_head must be even for rotary embeddings")
        if not 0.0 <= self.skip_prob < 1.0:
            raise ConfigError("skip_prob must lie in [0, 1)")
        if self.weight_mode not in ("fp16", "int4_symmetric"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.routing not in ("deterministic_argmax", "sampled"):
            raise ConfigError(f"unknown routing mode {self.routing!r}")
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class Workload:
    prefill_len: int = 512
    decode_len: int = 512
    batch: int = 1

    def __post_init__(self):
        if self.batch != 1:
            raise ConfigError("only batch size 1 is modeled")
        if self.prefill_len <= 0 or self.decode_len < 0:
            raise ConfigError("sequence lengths must be positive")


@dataclass(frozen=True)
class PerfParams:
    """Accelerator parameters for the analytic performance model.

    Compute and nonlinear work run on the core clock; KV traffic moves at the
    HBM-side effective bandwidth; weights stream from DDR.
    """
    pe_macs_per_cycle: int = 64 * 128
    core_freq_mhz: float = 225.0
    hbm_freq_mhz: float = 450.0
    hbm_peak_gbps: float = 460.0
    ddr_gbps: float = 38.4
    nl_cycles_per_element: float | None = None
    model_d: int = 4096
    model_heads: int = 32
    model_layers: int = 32
    weight_bytes: float = 0.5
    kv_bytes: int = 2

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is not None and v <= 0:
                raise ConfigError(f"{f.name} must be positive")


@dataclass(frozen=True)
class RunSettings:
    """Experiment-level knobs. ``tiles`` lists square tile sizes (b_r = b_c = s)."""
    seed: int = 0
    mode: str = "wide"
    prefill_len: int = 16
    decode_len: int = 8
    tiles: tuple = (4, 8, 16)
    trials: int = 100_000
    cases: int = 100

    def __post_init__(self):
        if self.mode not in ("wide", "device"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        tiles = self.tiles if isinstance(self.tiles, tuple) else (self.tiles,)
        if not tiles or any(not isinstance(t, int) or t <= 0 for t in tiles):
            raise ConfigError("tiles must be positive integers")
        object.__setattr__(self, "tiles", tiles)
        if self.prefill_len < 2 or self.decode_len < 0:
            raise ConfigError("need prefill_len >= 2 and decode_len >= 0")
        if self.trials <= 0 or self.cases <= 0:
            raise ConfigError("trials and cases must be positive")


SECTIONS = {"model": ModelConfig, "workload": Workload, "perf": PerfParams, "run": RunSettings}


def _literal(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(_literal(t.strip()) for t in text.split(","))
    return text


def parse_config(text: str) -> dict[str, dict]:
    """Raw ``{section: {field: value}}`` with validation of keys."""
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"key {key!r} needs a section prefix", lineno)
        sec, name = key.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}", lineno)
        names = {f.name for f in dataclasses.fields(SECTIONS[sec])}
        if name not in names:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if not value:
            raise ConfigError(f"empty value for {key!r}", lineno)
        if name in out[sec]:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        out[sec][name] = _literal(value)
    return out


@dataclass(frozen=True)
class ResolvedConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    workload: Workload = field(default_factory=Workload)
    perf: PerfParams = field(default_factory=PerfParams)
    run: RunSettings = field(default_factory=RunSettings)

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, bool):
                    v = str(v).lower()
                elif isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{sec}.{f.name} = {v}")
        return "\n".join(lines) + "\n"


def resolve(raw: dict[str, dict] | None = None, **overrides) -> ResolvedConfig:
    """Typed config from parsed sections; ``overrides`` are {section: {field: value}}."""
    parts = {}
    for sec, cls in SECTIONS.items():
        vals = dict((raw or {}).get(sec, {}))
        vals.update(overrides.get(sec, {}))
        try:
            parts[sec] = cls(**vals)
        except TypeError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    return ResolvedConfig(**parts)


def load_config(path) -> ResolvedConfig:
    return resolve(parse_config(Path(path).read_text()))
