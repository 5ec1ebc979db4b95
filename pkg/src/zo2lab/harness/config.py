"""Run configuration: plain key=value files with dotted keys, flag overrides,
and the OPT-family model presets used by the throughput simulator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..errors import UsageError
from ..model import ModelSpec

# Model family presets (layers, heads, width, context) for simulator runs.
OPT_PRESETS: dict[str, ModelSpec] = {
    "opt-1.3b": ModelSpec(24, 2048, 32, 50272, 2048),
    "opt-2.7b": ModelSpec(32, 2560, 32, 50272, 2048),
    "opt-6.7b": ModelSpec(32, 4096, 32, 50272, 2048),
    "opt-13b": ModelSpec(40, 5120, 40, 50272, 2048),
    "opt-30b": ModelSpec(48, 7168, 56, 50272, 2048),
    "opt-66b": ModelSpec(64, 9216, 72, 50272, 2048),
    "opt-175b": ModelSpec(96, 12288, 96, 50272, 2048),
}

ENGINES = ("mezo", "zo2")
BACKENDS = ("threaded", "simulated")
UPDATE_MODES = ("deferred", "naive")
CODECS = ("none", "f16", "bf16", "f8")
ARITH = ("f64", "f32")

OUTPUT_DIR_ENV = "ZO2_OUTPUT_DIR"


@dataclass
class CostConfig:
    flops_per_sec: float = 19.5e12
    h2d_bytes_per_sec: float = 25e9
    d2h_bytes_per_sec: float = 25e9
    latency_s: float = 30e-6
    alloc_latency_s: float = 0.0
    amp_speedup: float = 8.0


@dataclass
class RunConfig:
    # model
    n_blocks: int = 4
    dim: int = 32
    n_heads: int = 4
    vocab: int = 64
    seq_len: int = 16
    tie_lm_head: bool = False
    arith: str = "f64"
    # optimizer
    eps: float = 1e-3
    lr: float = 1e-3
    steps: int = 20
    seed: int = 1234
    # data
    n_samples: int = 64
    batch_size: int = 2
    pattern: str = "affine"
    # engine / runtime
    engine: str = "zo2"
    preset: str = ""          # named model preset: simulation-only runs
    overlap: bool = True
    arena_slots: int = 3
    codec: str = "none"
    update_mode: str = "deferred"
    backend: str = "threaded"
    arena_reuse: bool = True
    throttle_bytes_per_sec: float = 0.0
    throttle_latency_s: float = 0.0
    device_capacity_bytes: float = float("inf")
    # output
    output_dir: str = ""
    cost: CostConfig = field(default_factory=CostConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("engine", self.engine in ENGINES, ENGINES),
            ("backend", self.backend in BACKENDS, BACKENDS),
            ("update_mode", self.update_mode in UPDATE_MODES, UPDATE_MODES),
            ("codec", self.codec in CODECS, CODECS),
            ("arith", self.arith in ARITH, ARITH),
        ]
        for key, ok, allowed in checks:
            if not ok:
                raise UsageError(f"{key}: must be one of {allowed}, "
                                 f"got {getattr(self, key)!r}")
        if self.arena_slots < 1:
            raise UsageError("arena_slots: must be >= 1")
        if self.overlap and self.arena_slots < 3:
            raise UsageError("arena_slots: overlap needs >= 3 slots "
                             "(set overlap=false for arena_slots < 3)")
        if self.n_samples < 1:
            raise UsageError("n_samples: dataset must not be empty")
        if self.steps < 1:
            raise UsageError("steps: must be >= 1")
        if self.preset:
            if self.preset not in OPT_PRESETS:
                raise UsageError(f"preset: unknown preset {self.preset!r}; "
                                 f"choose from {sorted(OPT_PRESETS)}")
            if self.backend != "simulated":
                raise UsageError("preset: preset-sized models run on the "
                                 "simulated backend only")
        # codec active means transfers are lossy: equivalence claims downgrade
        # to bounded-error mode, which only makes sense off the f64 oracle path
        if self.codec != "none" and self.arith == "f64":
            self.arith = "f32"

    def model_spec(self) -> ModelSpec:
        if self.preset:
            return OPT_PRESETS[self.preset]
        return ModelSpec(self.n_blocks, self.dim, self.n_heads, self.vocab,
                         self.seq_len, self.tie_lm_head)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_DIR_ENV, "runs")) / "latest"

    def to_flat(self) -> dict[str, str]:
        """Config-file-compatible key=value view; build_config() round-trips it."""
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v) if isinstance(v, float) else str(v)

        out = {}
        for f in fields(self):
            if f.name == "cost":
                for cf in fields(CostConfig):
                    out[f"cost.{cf.name}"] = fmt(getattr(self.cost, cf.name))
            else:
                out[f.name] = fmt(getattr(self, f.name))
        return out


_BOOLS = {"true": True, "1": True, "yes": True, "on": True,
          "false": False, "0": False, "no": False, "off": False}


def _coerce(key: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() not in _BOOLS:
                raise ValueError(raw)
            return _BOOLS[raw.lower()]
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {target_type.__name__}")


def parse_config_text(text: str) -> dict[str, str]:
    """key=value lines; '#' comments; dotted keys address sub-sections."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(file_path: str | None = None,
                 overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- config file <- --key=value overrides, validated."""
    flat: dict[str, str] = {}
    if file_path:
        path = Path(file_path)
        if not path.exists():
            raise UsageError(f"config file not found: {file_path}")
        flat.update(parse_config_text(path.read_text()))
    flat.update(overrides or {})

    cost = CostConfig()
    cost_keys = {cf.name for cf in fields(CostConfig)}
    known = {f.name: f.type for f in fields(RunConfig) if f.name != "cost"}
    type_map = {"int": int, "float": float, "bool": bool, "str": str}
    values: dict = {}
    for key, raw in flat.items():
        key = key.replace("-", "_")  # --update-mode and update_mode both work
        if key.startswith("cost."):
            sub = key.split(".", 1)[1]
            if sub not in cost_keys:
                raise UsageError(f"unknown config key: {key}")
            setattr(cost, sub, _coerce(key, raw, float))
        elif key in known:
            tname = known[key] if isinstance(known[key], str) \
                else known[key].__name__
            values[key] = _coerce(key, raw, type_map.get(tname, str))
        else:
            raise UsageError(f"unknown config key: {key}")
    return RunConfig(cost=cost, **values)
