"""Parameter-version history, stale snapshots, and bounded-staleness admission.

A ParamHistory is a single-writer ring of recent iterates tagged with a
global version counter. Readers build either consistent snapshots (one
stored iterate) or inconsistent ones (each coordinate from its own
version), mirroring what lock-free shared-memory reads produce. The
staleness of a read is the age, in master updates, of its oldest
coordinate; the admission policy drops gradients older than tau_max, which
is what keeps staleness bounded over a whole run.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .vectormath import as_vec


@dataclass(frozen=True)
class ReadMeta:
    """Per-coordinate version indices recorded when a snapshot was taken."""

    per_coord_version: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.per_coord_version, dtype=np.int64)
        if v.ndim != 1:
            raise ValueError("per_coord_version must be 1-d")
        object.__setattr__(self, "per_coord_version", v)

    @classmethod
    def consistent(cls, n: int, version: int) -> "ReadMeta":
        return cls(np.full(n, version, dtype=np.int64))

    def is_consistent(self) -> bool:
        v = self.per_coord_version
        return bool(v.size == 0 or v.min() == v.max())


@dataclass(frozen=True)
class StalenessPolicy:
    tau_max: int
    mode: str = "consistent"  # or "inconsistent"

    def __post_init__(self):
        if self.tau_max < 0:
            raise ValueError("tau_max must be nonnegative")
        if self.mode not in ("consistent", "inconsistent"):
            raise ValueError(f"unknown read mode {self.mode!r}")


class ParamHistory:
    """Bounded ring of recent iterates with contiguous versions.

    Exactly one writer (the master) calls push(); any number of readers
    may snapshot concurrently. With track_live=True the newest iterate is
    also mirrored into a mutable head buffer whose coordinates carry
    individual version stamps; snapshot_live() reads it coordinate by
    coordinate without any lock, so a concurrent push can interleave and
    the result may mix several versions. Stamps are written after values
    (and read before them), so a recorded stamp never exceeds the version
    of the value actually read: staleness is never under-reported.
    """

    def __init__(self, capacity: int, track_live: bool = False):
        if capacity < 2:
            raise ValueError("history capacity must be at least 2")
        self.capacity = int(capacity)
        self._ring: deque[np.ndarray] = deque()
        self._base_version = 0  # version of the oldest ring entry
        self._count = 0  # total pushes so far
        self._track_live = track_live
        self._live: np.ndarray | None = None
        self._live_stamps: np.ndarray | None = None

    @property
    def occupancy(self) -> int:
        return len(self._ring)

    @property
    def current_version(self) -> int:
        return self._count - 1

    @property
    def oldest_version(self) -> int:
        if not self._ring:
            raise LookupError("history is empty")
        return self._base_version

    def push(self, x) -> int:
        """Store a new iterate; returns its version. Evicts only when full."""
        x = as_vec(x).copy()
        if self._ring and x.shape != self._ring[-1].shape:
            raise ValueError("iterate dimension changed between pushes")
        if len(self._ring) == self.capacity:
            self._ring.popleft()
            self._base_version += 1
        self._ring.append(x)
        version = self._count
        self._count += 1
        if self._track_live:
            if self._live is None:
                self._live = x.copy()
                self._live_stamps = np.full(x.shape[0], version, dtype=np.int64)
            else:
                # values first, then stamps: a torn read can only look staler
                self._live[:] = x
                self._live_stamps[:] = version
        return version

    def get(self, version: int) -> np.ndarray:
        """Stored iterate at the given version (do not mutate the result)."""
        if not self._ring:
            raise LookupError("history is empty")
        idx = version - self._base_version
        if idx < 0 or idx >= len(self._ring):
            raise LookupError(
                f"version {version} not in history "
                f"[{self._base_version}, {self.current_version}]"
            )
        return self._ring[idx]

    def snapshot_live(self) -> tuple[np.ndarray, ReadMeta]:
        """Unlocked coordinate-wise read of the head buffer (threads mode)."""
        if not self._track_live or self._live is None:
            raise RuntimeError("live tracking not enabled or nothing pushed yet")
        live = self._live
        stamps = self._live_stamps
        n = live.shape[0]
        vals = np.empty(n)
        vers = np.empty(n, dtype=np.int64)
        for i in range(n):
            vers[i] = stamps[i]
            vals[i] = live[i]
        return vals, ReadMeta(vers)


def snapshot_consistent(hist: ParamHistory, delay: int) -> tuple[np.ndarray, ReadMeta]:
    """The single stored iterate `delay` versions behind the current one."""
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    if delay >= hist.occupancy:
        raise LookupError(
            f"delay {delay} exceeds available history (occupancy {hist.occupancy})"
        )
    version = hist.current_version - delay
    x = hist.get(version).copy()
    return x, ReadMeta.consistent(x.shape[0], version)


def snapshot_inconsistent(
    hist: ParamHistory, per_coord_delays
) -> tuple[np.ndarray, ReadMeta]:
    """Coordinate i takes its value from the iterate d_i versions back.

    The result in general equals no single stored iterate.
    """
    delays = np.asarray(per_coord_delays, dtype=np.int64)
    if delays.ndim != 1:
        raise ValueError("per_coord_delays must be 1-d")
    if np.any(delays < 0):
        raise ValueError("delays must be nonnegative")
    if np.any(delays >= hist.occupancy):
        raise LookupError(
            f"delay {int(delays.max())} exceeds available history "
            f"(occupancy {hist.occupancy})"
        )
    current = hist.current_version
    n = delays.shape[0]
    out = np.empty(n)
    for d in np.unique(delays):
        mask = delays == d
        out[mask] = hist.get(current - int(d))[mask]
    return out, ReadMeta(current - delays)


def tau_of(meta: ReadMeta, current: int) -> int:
    """Staleness of a read: the age of its oldest coordinate.

    Equals min{j : the read agrees coordinate-wise with iterates at most j
    versions old} whenever consecutive iterates are distinct; the set-based
    construction itself is kept as a test oracle (tau_of_sets).
    """
    v = meta.per_coord_version
    if v.size == 0:
        return 0
    if np.any(v > current):
        raise ValueError("read metadata is newer than the current version")
    return int(current - v.min())


def tau_of_sets(hist: ParamHistory, xhat) -> int:
    """Brute-force staleness from values: smallest j with the union of
    agreement sets I_0..I_j covering every coordinate."""
    xhat = as_vec(xhat)
    current = hist.current_version
    covered = np.zeros(xhat.shape[0], dtype=bool)
    for j in range(hist.occupancy):
        covered |= hist.get(current - j) == xhat
        if covered.all():
            return j
    raise LookupError("snapshot not reconstructible from the available history")


def index_sets(hist: ParamHistory, xhat) -> list[np.ndarray]:
    """Agreement masks I_j = {i : x_i at version current-j equals xhat_i},
    for j = 0 .. tau (inclusive), tau per tau_of_sets."""
    xhat = as_vec(xhat)
    tau = tau_of_sets(hist, xhat)
    current = hist.current_version
    return [hist.get(current - j) == xhat for j in range(tau + 1)]


def admit(meta: ReadMeta, current: int, policy: StalenessPolicy) -> bool:
    """Accept iff the gradient's staleness is within the policy bound."""
    return tau_of(meta, current) <= policy.tau_max


@dataclass(frozen=True)
class MixtureBoundsReport:
    tau: int
    lhs_norm: float       # ||xhat - x_current||
    rhs_norm_sum: float   # sum of consecutive-iterate distances
    lhs_sq: float         # ||xhat - x_current||^2
    rhs_sq_sum: float     # tau * sum of squared consecutive distances

    def ok(self, tol: float = 1e-9) -> bool:
        return (self.lhs_norm <= self.rhs_norm_sum + tol) and (
            self.lhs_sq <= self.rhs_sq_sum + tol
        )


def mixture_bounds_check(hist: ParamHistory, meta: ReadMeta) -> MixtureBoundsReport:
    """Evaluate both sides of the snapshot-distance bounds.

    LHS is the distance between the reconstructed snapshot and the current
    iterate; the first RHS is the triangle-inequality sum of consecutive
    iterate distances over the staleness window, the second its
    Cauchy-Schwarz squared variant.

    Negative versions denote pre-run reads: before the first update the
    parameter vector sat unchanged at its initial value, so they resolve to
    version 0 (possible only while version 0 is still resident) and
    contribute zero consecutive-iterate distance.
    """
    current = hist.current_version
    tau = tau_of(meta, current)
    versions = meta.per_coord_version
    if versions.min() < 0 and hist.oldest_version > 0:
        raise LookupError("pre-run read not reconstructible: initial iterate evicted")
    n = versions.shape[0]
    xhat = np.empty(n)
    for ver in np.unique(versions):
        mask = versions == ver
        xhat[mask] = hist.get(max(int(ver), 0))[mask]  # raises if evicted
    xk = hist.get(current)
    lhs = float(np.linalg.norm(xhat - xk))
    norm_sum = 0.0
    sq_sum = 0.0
    for l in range(min(tau, current)):
        d = hist.get(current - l) - hist.get(current - l - 1)
        nd = float(np.linalg.norm(d))
        norm_sum += nd
        sq_sum += nd * nd
    return MixtureBoundsReport(
        tau=tau,
        lhs_norm=lhs,
        rhs_norm_sum=norm_sum,
        lhs_sq=lhs * lhs,
        rhs_sq_sum=tau * sq_sum,
    )
