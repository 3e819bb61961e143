"""Closed-form communication time of 1D and 1.5D SpMM on 8-device nodes.

Times are exact rationals. With ``link_bandwidth=1`` and ``scalar_bytes=1``
the result is in units of ``n*d/l``-scaled element transfers, which makes the
ratios between strategies exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

STRATEGIES = ("1D", "1.5D")


class UnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """Links available to each device.

    ``group_bcast_links``/``group_reduce_links`` describe the 1.5D grouping
    (replication factor 2): links usable by a broadcast within a group and by
    the reduction between the two groups.
    """

    kind: str
    links_per_device: int
    link_bandwidth: Fraction = Fraction(1)
    group_bcast_links: int | None = None
    group_reduce_links: int | None = None

    def __post_init__(self):
        if self.links_per_device < 1:
            raise ValueError("links_per_device must be >= 1")
        if not isinstance(self.link_bandwidth, Fraction):
            object.__setattr__(self, "link_bandwidth", Fraction(self.link_bandwidth))
        if self.link_bandwidth <= 0:
            raise ValueError("link_bandwidth must be positive")
        for name in ("group_bcast_links", "group_reduce_links"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def named(cls, kind: str, link_bandwidth=1) -> Topology:
        if kind == "asymmetric-6-link":
            # two groups of four: 4 links inside a group, 2 across groups
            return cls(kind, 6, Fraction(link_bandwidth), 4, 2)
        if kind == "switched-12-link":
            return cls(kind, 12, Fraction(link_bandwidth), 12, 12)
        raise UnsupportedError(f"unknown topology {kind!r}; use asymmetric-6-link, switched-12-link or a custom Topology")


def cost_model(n: int, d: int, P: int, topology: Topology, strategy: str, scalar_bytes: int = 1, c: int = 2) -> Fraction:
    """Communication time of one SpMM with an ``n x d`` dense operand.

    1D: ``P`` broadcast stages of ``n*d/P`` each over all links, so
    ``n*d / (links * l)``. 1.5D (``P=8``, ``c=2``): ``c`` broadcast rounds
    within groups of ``q = P/c`` devices plus one reduction across groups,
    ``c * n*d/(q * bl * l) + n*d/(q * rl * l)``.
    """
    if n < 0 or d < 0:
        raise ValueError("n and d must be nonnegative")
    if P < 1:
        raise ValueError("P must be >= 1")
    volume = Fraction(n * d * scalar_bytes)
    l = topology.link_bandwidth
    if strategy == "1D":
        return P * (volume / P) / (topology.links_per_device * l)
    if strategy == "1.5D":
        if P != 8 or c != 2:
            raise UnsupportedError("1.5D is modeled for P=8 with replication factor c=2 only")
        if topology.group_bcast_links is None or topology.group_reduce_links is None:
            raise UnsupportedError(f"topology {topology.kind!r} lacks a 1.5D group link split")
        q = P // c
        bcast = c * volume / (q * topology.group_bcast_links * l)
        reduce = volume / (q * topology.group_reduce_links * l)
        return bcast + reduce
    raise UnsupportedError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def strategy_ratio(topology: Topology, n: int = 1, d: int = 1) -> Fraction:
    """1.5D over 1D communication time at ``P=8``."""
    return cost_model(n, d, 8, topology, "1.5D") / cost_model(n, d, 8, topology, "1D")
