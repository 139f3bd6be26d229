"""Two-level memory simulator: main memory plus a bounded scratchpad.

Workflows execute their tensor traffic through this layer so that byte,
flop, and synchronization counts are exact rather than estimated. Traffic
is counted at element granularity; dtype width only scales byte counters,
the carried values are always float64.

Counting rules used by the workflows (kept consistent so comparisons are
meaningful): a multiply-add pair is 2 flops, squaring-and-accumulating an
element is 2 flops, scaling or adding one element is 1 flop. Scalar
per-sample bookkeeping (clip factors, loop indices) is not counted.

Scratch state does not survive a kernel boundary. The capacity bound
applies to the working set of one simulated block (its SRAM partition);
sequentialized blocks of the same kernel each see the full capacity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import CapacityError, OrderingFault, UsageError

_ALLOWED_WIDTHS = (2, 4, 8)


@dataclass(frozen=True)
class MemSpec:
    scratchpad_capacity_bytes: int
    dtype_width_bytes: int = 8

    def __post_init__(self):
        if self.dtype_width_bytes not in _ALLOWED_WIDTHS:
            raise UsageError(f"dtype_width_bytes must be one of {_ALLOWED_WIDTHS}, got {self.dtype_width_bytes}")
        if self.scratchpad_capacity_bytes < 1:
            raise UsageError(f"scratchpad_capacity_bytes must be positive, got {self.scratchpad_capacity_bytes}")


@dataclass
class TrafficReport:
    bytes_loaded: int = 0
    bytes_stored: int = 0
    flops: int = 0
    redundant_flops: int = 0
    barriers: int = 0
    kernel_launches: int = 0
    peak_scratch_bytes: int = 0
    per_sample_grad_bytes_stored: int = 0

    def to_dict(self) -> dict:
        # Field order is part of the serialization contract.
        return {
            "bytes_loaded": self.bytes_loaded,
            "bytes_stored": self.bytes_stored,
            "flops": self.flops,
            "redundant_flops": self.redundant_flops,
            "barriers": self.barriers,
            "kernel_launches": self.kernel_launches,
            "peak_scratch_bytes": self.peak_scratch_bytes,
            "per_sample_grad_bytes_stored": self.per_sample_grad_bytes_stored,
        }


def merge_reports(reports: Iterable[TrafficReport]) -> TrafficReport:
    """Sum counters across runs; peak is the max, not the sum."""
    out = TrafficReport()
    for r in reports:
        out.bytes_loaded += r.bytes_loaded
        out.bytes_stored += r.bytes_stored
        out.flops += r.flops
        out.redundant_flops += r.redundant_flops
        out.barriers += r.barriers
        out.kernel_launches += r.kernel_launches
        out.peak_scratch_bytes = max(out.peak_scratch_bytes, r.peak_scratch_bytes)
        out.per_sample_grad_bytes_stored += r.per_sample_grad_bytes_stored
    return out


class Region:
    """Handle to a simulated allocation. ``data`` is the carried payload."""

    __slots__ = ("rid", "level", "data", "element_count", "name", "kernel_index", "alive")

    def __init__(self, rid: int, level: str, data: np.ndarray, name: str, kernel_index: int):
        self.rid = rid
        self.level = level  # "main" | "scratch"
        self.data = data
        self.element_count = data.size
        self.name = name
        self.kernel_index = kernel_index
        self.alive = True

    def __repr__(self) -> str:
        return f"Region({self.name or self.rid}, {self.level}, {self.element_count} elems)"


class _KernelScope:
    def __init__(self, sim: "MemSim"):
        self._sim = sim

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        # Leave the failed state inspectable when an error unwinds.
        if exc_type is None:
            self._sim.end_kernel()
        return False


class MemSim:
    """Traffic-counting memory hierarchy. All workflows run through one of these."""

    def __init__(self, spec: MemSpec):
        self.spec = spec
        self._width = spec.dtype_width_bytes
        self._next_rid = 0
        self._kernel_open = False
        self._kernel_index = 0
        self._resident_bytes = 0
        self._scratch: list[Region] = []
        self._pending: set[int] = set()  # regions with unsynchronized accumulations
        self._report = TrafficReport()
        self.loads_by_tag: dict[str, int] = {}

    # ------------------------------------------------------------------ setup

    def alloc_main(self, shape, values=None, name: str = "") -> Region:
        if isinstance(shape, int):
            shape = (shape,)
        data = np.zeros(shape, dtype=np.float64)
        if values is not None:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != data.shape:
                raise UsageError(f"initial values shape {values.shape} != region shape {data.shape}")
            data[...] = values
        region = Region(self._alloc_rid(), "main", data, name, -1)
        return region

    def _alloc_rid(self) -> int:
        self._next_rid += 1
        return self._next_rid

    # ---------------------------------------------------------------- kernels

    def begin_kernel(self) -> _KernelScope:
        if self._kernel_open:
            raise UsageError("begin_kernel inside an open kernel")
        self._kernel_open = True
        self._kernel_index += 1
        self._report.kernel_launches += 1
        return _KernelScope(self)

    def end_kernel(self) -> None:
        if not self._kernel_open:
            raise UsageError("end_kernel without an open kernel")
        for r in self._scratch:
            r.alive = False
        self._scratch.clear()
        self._resident_bytes = 0
        self._pending.clear()  # kernel termination is a synchronization point
        self._kernel_open = False

    def kernel(self) -> _KernelScope:
        """Context-manager spelling of begin_kernel/end_kernel."""
        return self.begin_kernel()

    def _require_kernel(self):
        if not self._kernel_open:
            raise UsageError("operation requires an open kernel")

    # ---------------------------------------------------------------- scratch

    def _admit(self, nbytes: int):
        available = self.spec.scratchpad_capacity_bytes - self._resident_bytes
        if nbytes > available:
            raise CapacityError(nbytes, available, self.spec.scratchpad_capacity_bytes)
        self._resident_bytes += nbytes
        if self._resident_bytes > self._report.peak_scratch_bytes:
            self._report.peak_scratch_bytes = self._resident_bytes

    def alloc_scratch(self, shape, name: str = "") -> Region:
        """On-chip intermediate (e.g. a gradient tile); no memory traffic."""
        self._require_kernel()
        if isinstance(shape, int):
            shape = (shape,)
        data = np.zeros(shape, dtype=np.float64)
        self._admit(data.size * self._width)
        region = Region(self._alloc_rid(), "scratch", data, name, self._kernel_index)
        self._scratch.append(region)
        return region

    def free_scratch(self, region: Region) -> None:
        self._check_scratch(region)
        region.alive = False
        self._scratch.remove(region)
        self._resident_bytes -= region.element_count * self._width

    def _check_scratch(self, region: Region):
        if region.level != "scratch":
            raise UsageError(f"{region!r} is not a scratch region")
        if not region.alive or region.kernel_index != self._kernel_index:
            raise UsageError(f"{region!r} did not survive its kernel")

    @staticmethod
    def _check_main(region: Region):
        if region.level != "main":
            raise UsageError(f"{region!r} is not a main-memory region")

    # ---------------------------------------------------------------- traffic

    def load_to_scratch(self, src: Region, elements: Optional[int] = None, index=None,
                        tag: str = "plain") -> Region:
        """Copy main-memory data into a fresh scratch region (counted)."""
        self._require_kernel()
        self._check_main(src)
        if src.rid in self._pending:
            raise OrderingFault(f"read of reduction destination {src!r} before barrier")
        if index is not None:
            sel = src.data[index]
        elif elements is not None:
            if elements > src.element_count:
                raise UsageError(f"load of {elements} elements from {src!r}")
            sel = src.data.reshape(-1)[:elements]
        else:
            sel = src.data
        nbytes = sel.size * self._width
        self._admit(nbytes)
        region = Region(self._alloc_rid(), "scratch", np.array(sel, dtype=np.float64),
                        src.name, self._kernel_index)
        self._scratch.append(region)
        self._report.bytes_loaded += nbytes
        self.loads_by_tag[tag] = self.loads_by_tag.get(tag, 0) + nbytes
        return region

    def store_to_main(self, src: Region, dst: Region, elements: Optional[int] = None,
                      index=None, tag: str = "plain") -> None:
        """Write scratch data back to main memory (counted)."""
        self._require_kernel()
        self._check_scratch(src)
        self._check_main(dst)
        if index is not None:
            target = dst.data[index]
            if target.size != src.element_count:
                raise UsageError(f"store target selects {target.size} elements, source has {src.element_count}")
            dst.data[index] = src.data.reshape(target.shape)
            n = target.size
        else:
            n = src.element_count if elements is None else elements
            if n > src.element_count or n > dst.element_count:
                raise UsageError(f"store of {n} elements between {src!r} and {dst!r}")
            dst.data.reshape(-1)[:n] = src.data.reshape(-1)[:n]
        nbytes = n * self._width
        self._report.bytes_stored += nbytes
        if tag == "per_sample_grad":
            self._report.per_sample_grad_bytes_stored += nbytes

    def atomic_accumulate(self, dst: Region, values, index=None) -> None:
        """Add values into main memory; costs one store per element, no load.

        The destination is unreadable until the next barrier (or kernel end).
        """
        self._require_kernel()
        self._check_main(dst)
        values = np.asarray(values, dtype=np.float64)
        if index is not None:
            target = dst.data[index]
            if target.shape != values.shape:
                raise UsageError(f"accumulate of shape {values.shape} into selection {target.shape}")
            dst.data[index] += values
        else:
            if values.size > dst.element_count:
                raise UsageError(f"accumulate of {values.size} elements into {dst!r}")
            dst.data.reshape(-1)[:values.size] += values.reshape(-1)
        self._report.bytes_stored += values.size * self._width
        self._pending.add(dst.rid)

    def barrier(self) -> None:
        """Make all pending accumulations visible to subsequent reads."""
        self._require_kernel()
        self._report.barriers += 1
        self._pending.clear()

    def record_flops(self, n: int, redundant: bool = False) -> None:
        self._require_kernel()
        self._report.flops += n
        if redundant:
            self._report.redundant_flops += n

    # ------------------------------------------------------------- inspection

    def read_main(self, region: Region) -> np.ndarray:
        """Host-side result fetch; not part of the simulated traffic."""
        self._check_main(region)
        if region.rid in self._pending:
            raise OrderingFault(f"read of reduction destination {region!r} before barrier")
        return region.data.copy()

    def report(self) -> TrafficReport:
        return TrafficReport(**self._report.to_dict())
