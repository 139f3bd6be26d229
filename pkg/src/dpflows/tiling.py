"""Block planning: choose tile extents whose working set fits the scratchpad.

A block processing tile (b, t, d, p) keeps one input tile, one
output-gradient tile, one gradient tile, and one norm slot per sample
resident at once:

    footprint(b, t, d, p) = b*t*p + b*t*d + b*d*p + b   elements
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InfeasiblePlanError, UsageError
from .memmodel import MemSpec


@dataclass(frozen=True)
class LayerDims:
    B: int
    T: int
    P: int
    D: int

    def __post_init__(self):
        for name in ("B", "T", "P", "D"):
            if getattr(self, name) < 1:
                raise UsageError(f"dimension {name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class BlockPlan:
    b: int
    t: int
    d: int
    p: int
    n_b: int
    n_t: int
    n_d: int
    n_p: int

    def to_dict(self) -> dict:
        return {"b": self.b, "t": self.t, "d": self.d, "p": self.p,
                "n_b": self.n_b, "n_t": self.n_t, "n_d": self.n_d, "n_p": self.n_p}


def footprint(b: int, t: int, d: int, p: int) -> int:
    """Resident elements of one block at tile extents (b, t, d, p)."""
    return b * t * p + b * t * d + b * d * p + b


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def plan_blocks(dims: LayerDims, spec: MemSpec) -> BlockPlan:
    """Shrink tile extents by repeated halving until the footprint fits.

    Each round halves (ceiling) one dimension of the largest footprint
    addend among b*t*p, b*t*d, b*d*p; ties prefer t, then d, then p,
    then b. Deterministic, and monotone in capacity: a larger scratchpad
    stops earlier along the same halving chain.
    """
    width = spec.dtype_width_bytes
    cap = spec.scratchpad_capacity_bytes
    if footprint(1, 1, 1, 1) * width > cap:
        raise InfeasiblePlanError(
            f"scratchpad of {cap} bytes cannot hold even unit tiles "
            f"({footprint(1, 1, 1, 1) * width} bytes needed)")

    b, t, d, p = dims.B, dims.T, dims.D, dims.P
    while footprint(b, t, d, p) * width > cap:
        addends = {
            "x": (b * t * p, ("t", "p", "b")),
            "y": (b * t * d, ("t", "d", "b")),
            "g": (b * d * p, ("d", "p", "b")),
        }
        largest = max(v for v, _ in addends.values())
        candidates = set()
        for value, members in addends.values():
            if value == largest:
                candidates.update(members)
        vals = {"b": b, "t": t, "d": d, "p": p}
        for name in ("t", "d", "p", "b"):  # tie-break order
            if name in candidates and vals[name] > 1:
                vals[name] = _ceil_div(vals[name], 2)
                break
        b, t, d, p = vals["b"], vals["t"], vals["d"], vals["p"]

    return BlockPlan(
        b=b, t=t, d=d, p=p,
        n_b=_ceil_div(dims.B, b), n_t=_ceil_div(dims.T, t),
        n_d=_ceil_div(dims.D, d), n_p=_ceil_div(dims.P, p),
    )
