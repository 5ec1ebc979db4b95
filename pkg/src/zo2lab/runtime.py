"""Two-tier memory system: host-homed block buckets, a fixed ring of reusable
device arenas, a bandwidth-throttled transfer channel with optional low-bit
compression, and byte-accurate accounting.

The "device" here is a tier of ordinary arrays plus an accountant; what makes
it a device is the discipline: blocks must be uploaded into an arena before
compute touches them, arenas are reused round-robin, the embedding and LM
head are pinned for the whole run, and every byte is tracked so the peak is
an assertion, not an estimate.  With a codec active the host master copy is
the low-bit form; the full-precision copy exists only on the device.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, SchedulingContractError
from .model import BlockBucket, ModelParams
from .numerics import ConversionSummary, ElemFormat, TensorBuf, decode, encode

CODEC_FORMATS = {"f16": ElemFormat.F16, "bf16": ElemFormat.BF16, "f8": ElemFormat.F8E4M3}


@dataclass
class TransferRecord:
    module: str
    direction: str            # "upload" | "offload"
    bytes_wire: int
    fmt_wire: ElemFormat
    t_start: float
    t_end: float
    step: int = 0

    def to_json(self) -> dict:
        return {"module": self.module, "direction": self.direction,
                "bytes_wire": self.bytes_wire, "fmt_wire": self.fmt_wire.tag,
                "t_start": self.t_start, "t_end": self.t_end, "step": self.step}


class TransferLog:
    """Append-only, safe for concurrent lane writers."""

    def __init__(self):
        self._records: list[TransferRecord] = []
        self._lock = threading.Lock()

    def append(self, rec: TransferRecord) -> None:
        with self._lock:
            self._records.append(rec)

    def records(self) -> list[TransferRecord]:
        with self._lock:
            return list(self._records)

    def counts(self) -> dict[tuple[str, str], int]:
        """(module, direction) -> number of transfers."""
        out: dict[tuple[str, str], int] = {}
        for r in self.records():
            key = (r.module, r.direction)
            out[key] = out.get(key, 0) + 1
        return out

    def wire_bytes(self, direction: str | None = None) -> int:
        return sum(r.bytes_wire for r in self.records()
                   if direction is None or r.direction == direction)


@dataclass
class Channel:
    """Host<->device pipe model: fixed latency plus bytes/bandwidth.

    bytes_per_sec = 0 disables throttling entirely (pure functional runs).
    """

    bytes_per_sec: float = 0.0
    latency_s: float = 0.0

    def duration(self, nbytes: int) -> float:
        if self.bytes_per_sec <= 0 and self.latency_s <= 0:
            return 0.0
        wire = nbytes / self.bytes_per_sec if self.bytes_per_sec > 0 else 0.0
        return self.latency_s + wire

    def transfer(self, nbytes: int) -> None:
        d = self.duration(nbytes)
        if d > 0:
            time.sleep(d)


class DevicePool:
    """Byte accountant for the capacity-limited tier.

    Conservation (allocated - freed = used) is asserted on every event, and
    used <= capacity on every allocation.  Counters are guarded by one lock,
    so lanes can alloc/free concurrently.
    """

    def __init__(self, capacity_bytes: float = float("inf")):
        self.capacity = capacity_bytes
        self._used: dict[str, int] = {}
        self._allocated = 0
        self._freed = 0
        self.peak_used = 0
        self._lock = threading.Lock()

    def alloc(self, category: str, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("allocation size must be >= 0")
        with self._lock:
            self._used[category] = self._used.get(category, 0) + nbytes
            self._allocated += nbytes
            used = self._allocated - self._freed
            assert used == sum(self._used.values()), "accounting drift"
            if used > self.capacity:
                self._used[category] -= nbytes
                self._allocated -= nbytes
                raise CapacityError(
                    f"alloc {nbytes} B for {category}: {used} B exceeds "
                    f"capacity {self.capacity} B")
            self.peak_used = max(self.peak_used, used)

    def free(self, category: str, nbytes: int) -> None:
        with self._lock:
            have = self._used.get(category, 0)
            if nbytes > have:
                raise ValueError(f"freeing {nbytes} B from {category}, only {have} B live")
            self._used[category] = have - nbytes
            self._freed += nbytes
            assert self._allocated - self._freed == sum(self._used.values())

    @property
    def used(self) -> int:
        with self._lock:
            return self._allocated - self._freed

    def breakdown(self) -> dict[str, int]:
        with self._lock:
            return dict(self._used)


class HostBlockStore:
    """Master copy of one block on the host tier.

    Uncompressed mode aliases the model's own bucket array (zero-copy: the
    bucket IS the host master).  With a codec the master is the encoded
    low-bit buffer and the full-precision bytes live only in a device arena
    between upload and offload.
    """

    def __init__(self, bucket: BlockBucket, codec: ElemFormat | None,
                 summary: ConversionSummary | None = None):
        self.codec = codec
        self.summary = summary
        self._bucket = bucket
        if codec is None:
            self._encoded = None
        else:
            self._encoded = encode(bucket.buf, codec, summary)

    @property
    def nbytes(self) -> int:
        return self._encoded.nbytes if self._encoded is not None else self._bucket.nbytes

    @property
    def wire_fmt(self) -> ElemFormat:
        return self.codec if self.codec is not None else self._bucket.buf.fmt

    def load_into(self, arena: np.ndarray) -> None:
        if self._encoded is None:
            np.copyto(arena, self._bucket.flat)
        else:
            wide = decode(self._encoded, self._bucket.buf.fmt)
            np.copyto(arena, wide.data)

    def store_from(self, arena: np.ndarray) -> None:
        if self._encoded is None:
            np.copyto(self._bucket.flat, arena)
        else:
            src = TensorBuf(arena, (arena.size,), self._bucket.buf.fmt)
            self._encoded = encode(src, self.codec, self.summary)

    def apply(self, fn) -> None:
        """Mutate the master copy in full precision (decode/edit/re-encode)."""
        if self._encoded is None:
            fn(self._bucket.flat)
        else:
            wide = decode(self._encoded, self._bucket.buf.fmt)
            fn(wide.data)
            self._encoded = encode(wide, self.codec, self.summary)

    def export_to_bucket(self) -> None:
        """Write the master bytes back into the model's bucket (codec mode)."""
        if self._encoded is not None:
            wide = decode(self._encoded, self._bucket.buf.fmt)
            np.copyto(self._bucket.flat, wide.data)


class OffloadRuntime:
    """Arena ring + host stores + channel + logs for one training run."""

    def __init__(self, params: ModelParams, *, k_slots: int = 3,
                 codec: str | None = None, channel: Channel | None = None,
                 capacity_bytes: float = float("inf"),
                 clock=time.perf_counter):
        codec_fmt = CODEC_FORMATS[codec] if codec not in (None, "none") else None
        self.params = params
        self.k_slots = k_slots
        self.codec = codec_fmt
        self.channel = channel or Channel()
        self.clock = clock
        self.pool = DevicePool(capacity_bytes)
        self.log = TransferLog()
        self.conversion = ConversionSummary()
        self.current_step = 0

        module_ids = [m for m, _ in params.buckets()]
        block_ids = module_ids[1:-1]
        self._block_ids = block_ids
        self.host: dict[str, HostBlockStore] = {}
        for bid in block_ids:
            self.host[bid] = HostBlockStore(params.bucket(bid), codec_fmt,
                                            self.conversion)

        # persistent device residents: first and last modules (embedding and
        # LM head), never evicted
        self.persistent = {m: params.bucket(m)
                           for m in (module_ids[0], module_ids[-1])}
        for bucket in self.persistent.values():
            self.pool.alloc("persistent_params", bucket.nbytes)

        # K reusable arenas, allocated once, each big enough for one block
        template = params.bucket(block_ids[0]) if block_ids else None
        self._slot_size = template.size if template is not None else 0
        slot_bytes = template.nbytes if template is not None else 0
        dtype = params.fmt.storage_dtype
        self.slots = [np.zeros(self._slot_size, dtype=dtype) for _ in range(k_slots)]
        self._slot_buckets = [
            BlockBucket(TensorBuf(arena, (self._slot_size,), params.fmt),
                        template.segments) if template is not None else None
            for arena in self.slots
        ]
        self._slot_owner: list[str | None] = [None] * k_slots
        self.pool.alloc("block_arenas", slot_bytes * k_slots)

    def slot_for(self, block_index: int) -> int:
        return block_index % self.k_slots

    def slot_bucket(self, slot: int) -> BlockBucket:
        return self._slot_buckets[slot]

    def upload(self, module: str, slot: int, step: int | None = None) -> TransferRecord:
        if self._slot_owner[slot] is not None:
            raise SchedulingContractError(
                f"upload of {module} into slot {slot} still owned by "
                f"{self._slot_owner[slot]} (scheduler bug)")
        store = self.host[module]
        t0 = self.clock()
        self.channel.transfer(store.nbytes)
        store.load_into(self.slots[slot])
        self._slot_owner[slot] = module
        t1 = self.clock()
        rec = TransferRecord(module, "upload", store.nbytes, store.wire_fmt,
                             t0, t1, self.current_step if step is None else step)
        self.log.append(rec)
        return rec

    def offload(self, module: str, slot: int, step: int | None = None) -> TransferRecord:
        if self._slot_owner[slot] != module:
            raise SchedulingContractError(
                f"offload of {module} from slot {slot} owned by "
                f"{self._slot_owner[slot]} (scheduler bug)")
        store = self.host[module]
        t0 = self.clock()
        store.store_from(self.slots[slot])
        self.channel.transfer(store.nbytes)
        self._slot_owner[slot] = None
        t1 = self.clock()
        rec = TransferRecord(module, "offload", store.nbytes, store.wire_fmt,
                             t0, t1, self.current_step if step is None else step)
        self.log.append(rec)
        return rec

    def host_param_bytes(self) -> int:
        return sum(s.nbytes for s in self.host.values())

    def export_params(self) -> ModelParams:
        """Make the model's own buckets reflect the host masters (codec mode)."""
        for store in self.host.values():
            store.export_to_bucket()
        return self.params

    def memory_report(self) -> dict:
        return {
            "device_peak_bytes": self.pool.peak_used,
            "device_used_bytes": self.pool.used,
            "host_param_bytes": self.host_param_bytes(),
            "breakdown": self.pool.breakdown(),
            "conversion": {"nan_count": self.conversion.nan_count,
                           "saturated_count": self.conversion.saturated_count},
        }
