"""Run metrics: the final-params digest is the equivalence criterion."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from ..model import ModelParams

SUMMARY_COLUMNS = [
    "engine", "backend", "overlap", "update_mode", "codec", "arena_slots",
    "n_blocks", "dim", "vocab", "seq_len", "batch_size", "steps", "seed",
    "final_loss", "final_digest", "device_peak_bytes", "host_param_bytes",
    "uploads", "offloads", "wire_bytes_total",
    "tokens_per_sec_incl_warmup", "tokens_per_sec_excl_warmup", "wall_seconds",
]


def params_digest(params: ModelParams) -> str:
    """SHA-256 over canonical bucket bytes; equality means identical models."""
    h = hashlib.sha256()
    for module, bucket in params.buckets():
        h.update(module.encode())
        h.update(bucket.buf.fmt.tag.encode())
        h.update(bucket.flat.tobytes())
    return h.hexdigest()


@dataclass
class MetricsReport:
    config: dict
    losses: list[float]
    final_digest: str
    device_peak_bytes: int
    host_param_bytes: int
    memory_breakdown: dict
    uploads: int
    offloads: int
    wire_bytes_up: int
    wire_bytes_down: int
    makespan_total_s: float
    makespan_mean_s: float
    tokens_per_sec_incl_warmup: float
    tokens_per_sec_excl_warmup: float
    wall_seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def to_json(self) -> dict:
        return asdict(self)

    def summary_row(self) -> dict:
        cfg = self.config
        return {
            "engine": cfg.get("engine"), "backend": cfg.get("backend"),
            "overlap": cfg.get("overlap"), "update_mode": cfg.get("update_mode"),
            "codec": cfg.get("codec"), "arena_slots": cfg.get("arena_slots"),
            "n_blocks": cfg.get("n_blocks"), "dim": cfg.get("dim"),
            "vocab": cfg.get("vocab"), "seq_len": cfg.get("seq_len"),
            "batch_size": cfg.get("batch_size"), "steps": cfg.get("steps"),
            "seed": cfg.get("seed"),
            "final_loss": self.final_loss, "final_digest": self.final_digest,
            "device_peak_bytes": self.device_peak_bytes,
            "host_param_bytes": self.host_param_bytes,
            "uploads": self.uploads, "offloads": self.offloads,
            "wire_bytes_total": self.wire_bytes_up + self.wire_bytes_down,
            "tokens_per_sec_incl_warmup": self.tokens_per_sec_incl_warmup,
            "tokens_per_sec_excl_warmup": self.tokens_per_sec_excl_warmup,
            "wall_seconds": self.wall_seconds,
        }


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
