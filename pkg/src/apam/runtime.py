"""Master-worker execution engine.

Three modes share one master loop: a deterministic single-threaded
simulation with injected delays, real shared-memory threads with lock-free
parameter reads, and (in wire.py) message passing over a framed byte
protocol. In every mode exactly one context updates the optimizer state
and parameter history; workers only read parameters and produce GradMsg
values, and the admission policy drops anything staler than tau_max before
it can touch the state.
"""

from __future__ import annotations

import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .optimizer import HyperParams, OptimizerState, step
from .problems import derive_batch_seed
from .staleness import (
    ParamHistory,
    ReadMeta,
    StalenessPolicy,
    admit,
    snapshot_consistent,
    snapshot_inconsistent,
    tau_of,
)
from .vectormath import BoxConstraint, as_vec, project_box

_DELAY_TAG = 0x41504D44

TRACE_HEADER = "k,alpha_k,tau_k,dropped,objective,grad_norm_sq,wallclock_ns"


@dataclass
class GradMsg:
    """A worker-produced stochastic gradient plus its read metadata."""

    g: np.ndarray
    read_meta: ReadMeta
    worker_id: int
    batch_seed: int


@dataclass(frozen=True)
class Fixed:
    tau: int

    def draw(self, rng, worker: int) -> int:
        return self.tau

    def max_delay(self) -> int:
        return self.tau


@dataclass(frozen=True)
class UniformInt:
    """Uniform delay on {0, ..., tau}."""

    tau: int

    def draw(self, rng, worker: int) -> int:
        return int(rng.integers(0, self.tau + 1))

    def max_delay(self) -> int:
        return self.tau


@dataclass(frozen=True)
class PerWorkerFixed:
    taus: tuple

    def draw(self, rng, worker: int) -> int:
        return self.taus[worker % len(self.taus)]

    def max_delay(self) -> int:
        return max(self.taus)


DelayModel = Union[Fixed, UniformInt, PerWorkerFixed]


@dataclass
class RunConfig:
    mode: str = "sim"  # sim | threads | wire
    workers: int = 1
    batch_size: int = 32
    total_iterations: int = 1000
    policy: StalenessPolicy = field(default_factory=lambda: StalenessPolicy(tau_max=64))
    delay_model: DelayModel = Fixed(0)
    master_seed: int = 0
    queue_factor: int = 4  # gradient queue capacity = queue_factor * workers
    wire_transport: str = "loopback"  # loopback | socket
    wire_latency: int = 0

    def __post_init__(self):
        if self.mode not in ("sim", "threads", "wire"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")


@dataclass
class TraceRow:
    k: int
    alpha_k: float
    tau_k: int
    dropped: int  # 0 = applied, 1 = discarded by the admission policy
    objective: float
    grad_norm_sq: float
    wallclock_ns: int

    def csv(self) -> str:
        return (
            f"{self.k},{self.alpha_k!r},{self.tau_k},{self.dropped},"
            f"{self.objective!r},{self.grad_norm_sq!r},{self.wallclock_ns}"
        )


@dataclass
class RunTrace:
    mode: str
    rows: list
    final_state: OptimizerState
    applied: int
    dropped: int
    produced: int
    staleness_hist: Counter
    elapsed_s: float = 0.0
    discarded_at_shutdown: int = 0
    comments: list = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.applied / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def max_applied_tau(self) -> int:
        return max(self.staleness_hist) if self.staleness_hist else 0

    def to_csv(self, path, comments=()) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for c in (*self.comments, *comments):
                fh.write(f"# {c}\n")
            fh.write(TRACE_HEADER + "\n")
            for row in self.rows:
                fh.write(row.csv() + "\n")

    def histogram_comment(self) -> str:
        items = " ".join(f"{t}:{c}" for t, c in sorted(self.staleness_hist.items()))
        return f"staleness_histogram {items}" if items else "staleness_histogram empty"


class _Master:
    """Single-writer owner of the optimizer state and parameter history."""

    def __init__(self, problem, hp: HyperParams, box, policy: StalenessPolicy,
                 hist: ParamHistory, hooks, x0, sim_clock: bool):
        self.problem = problem
        self.hp = hp
        self.box = box
        self.policy = policy
        self.hist = hist
        self.hooks = tuple(hooks)
        self.state = OptimizerState.initial(x0)
        self.hist.push(self.state.x)
        self.rows: list[TraceRow] = []
        self.applied = 0
        self.dropped = 0
        self.staleness_hist: Counter = Counter()
        self._sim_clock = sim_clock
        self._t0 = time.perf_counter_ns()

    def _now_ns(self) -> int:
        return 0 if self._sim_clock else time.perf_counter_ns() - self._t0

    def deliver(self, msg: GradMsg) -> bool:
        """Admit-or-drop one gradient; apply the update when admitted."""
        current = self.hist.current_version
        tau = tau_of(msg.read_meta, current)
        g = as_vec(msg.g)
        applied = admit(msg.read_meta, current, self.policy)
        alpha_k = self.hp.alpha_at(self.state.k)
        if applied:
            prev = self.state
            new = step(prev, g, alpha_k, self.hp, self.box)
            # hooks fire while the history still ends at the consumed iterate
            for h in self.hooks:
                fn = getattr(h, "on_apply", None)
                if fn is not None:
                    fn(prev, new, msg, alpha_k, tau, self.hist)
            self.state = new
            self.hist.push(new.x)
            self.applied += 1
            self.staleness_hist[tau] += 1
        else:
            self.dropped += 1
            for h in self.hooks:
                fn = getattr(h, "on_drop", None)
                if fn is not None:
                    fn(msg, tau, current)
        self.rows.append(
            TraceRow(
                k=self.state.k - 1 if applied else self.state.k,
                alpha_k=alpha_k,
                tau_k=tau,
                dropped=0 if applied else 1,
                objective=self.problem.full_value(self.state.x),
                grad_norm_sq=float(np.dot(g, g)),
                wallclock_ns=self._now_ns(),
            )
        )
        return applied


def _resolve_start(problem, box, x0):
    if box is None:
        box = getattr(problem, "box", None)
    if x0 is None:
        x0 = problem.initial_point()
    x0 = as_vec(x0)
    if box is not None:
        x0 = project_box(x0, box)
    return box, x0


def run_sim(problem, hp: HyperParams, cfg: RunConfig, hooks=(),
            box: Optional[BoxConstraint] = None, x0=None) -> RunTrace:
    """Deterministic event loop: same config and seed, identical trace bytes.

    Each of the cfg.total_iterations delivery events takes one worker
    gradient computed at a snapshot whose age the delay model chose, runs it
    through admission, and applies it if fresh enough. Before the run the
    parameter vector sat unchanged at the initial iterate, so a requested
    age reaching past the start reads the initial value while its metadata
    keeps the full (possibly pre-run) age; asking for a version the ring
    has already evicted is an error.
    """
    if cfg.mode != "sim":
        raise ValueError("run_sim requires cfg.mode == 'sim'")
    box, x0 = _resolve_start(problem, box, x0)
    rng = np.random.default_rng(
        np.random.SeedSequence([_DELAY_TAG, cfg.master_seed & ((1 << 64) - 1)])
    )
    capacity = max(cfg.policy.tau_max, cfg.delay_model.max_delay()) + 2
    hist = ParamHistory(capacity)
    master = _Master(problem, hp, box, cfg.policy, hist, hooks, x0, sim_clock=True)
    counters = [0] * cfg.workers
    produced = 0
    for event in range(cfg.total_iterations):
        w = event % cfg.workers
        d = cfg.delay_model.draw(rng, w)
        if d < 0:
            raise ValueError("delay model produced a negative delay")
        current = hist.current_version
        d_eff = min(d, current)  # ages past the start read the initial iterate
        if d_eff >= hist.occupancy:
            raise LookupError(
                f"delay model requested delay {d} but only {hist.occupancy} "
                "versions remain in the ring"
            )
        if cfg.policy.mode == "consistent" or d == 0:
            snap, _ = snapshot_consistent(hist, d_eff)
            meta = ReadMeta.consistent(snap.shape[0], current - d)
        else:
            per_coord = rng.integers(0, d + 1, size=master.state.dim)
            per_coord[int(rng.integers(0, master.state.dim))] = d  # pin the max
            snap, _ = snapshot_inconsistent(hist, np.minimum(per_coord, current))
            meta = ReadMeta(current - per_coord)
        counters[w] += 1
        bseed = derive_batch_seed(cfg.master_seed, w, counters[w])
        g = problem.minibatch_grad(snap, cfg.batch_size, bseed)
        produced += 1
        master.deliver(GradMsg(g, meta, w, bseed))
    return RunTrace(
        mode="sim",
        rows=master.rows,
        final_state=master.state,
        applied=master.applied,
        dropped=master.dropped,
        produced=produced,
        staleness_hist=master.staleness_hist,
    )


def run_threads(problem, hp: HyperParams, cfg: RunConfig, hooks=(),
                box: Optional[BoxConstraint] = None, x0=None) -> RunTrace:
    """Shared-memory mode: W worker threads feed a bounded gradient queue.

    Workers read the live parameter buffer coordinate-by-coordinate without
    locks (each read is individually atomic under the interpreter, but the
    master may overwrite mid-read, so snapshots can mix versions). The
    master is the only writer. Terminates after cfg.total_iterations
    applied gradients; anything still queued at shutdown is counted as
    discarded, never silently lost.
    """
    if cfg.mode != "threads":
        raise ValueError("run_threads requires cfg.mode == 'threads'")
    box, x0 = _resolve_start(problem, box, x0)
    hist = ParamHistory(cfg.policy.tau_max + 2, track_live=True)
    master = _Master(problem, hp, box, cfg.policy, hist, hooks, x0, sim_clock=False)
    q: queue.Queue = queue.Queue(maxsize=cfg.queue_factor * cfg.workers)
    stop = threading.Event()
    produced = [0] * cfg.workers
    failures: list[tuple[int, BaseException]] = []

    def worker_loop(wid: int) -> None:
        counter = 0
        try:
            while not stop.is_set():
                xhat, meta = hist.snapshot_live()
                counter += 1
                bseed = derive_batch_seed(cfg.master_seed, wid, counter)
                g = problem.minibatch_grad(xhat, cfg.batch_size, bseed)
                msg = GradMsg(g, meta, wid, bseed)
                while not stop.is_set():
                    try:
                        q.put(msg, timeout=0.05)
                        produced[wid] += 1
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # noqa: BLE001 - reported to the master
            failures.append((wid, exc))
            stop.set()

    threads = [
        threading.Thread(target=worker_loop, args=(w,), name=f"apam-worker-{w}", daemon=True)
        for w in range(cfg.workers)
    ]
    t_start = time.perf_counter()
    for t in threads:
        t.start()
    try:
        while master.applied < cfg.total_iterations:
            if failures:
                break
            try:
                msg = q.get(timeout=0.1)
            except queue.Empty:
                continue
            master.deliver(msg)
    finally:
        stop.set()
        discarded = 0
        while any(t.is_alive() for t in threads):
            try:
                q.get(timeout=0.01)
                discarded += 1
            except queue.Empty:
                pass
        for t in threads:
            t.join()
        while True:
            try:
                q.get_nowait()
                discarded += 1
            except queue.Empty:
                break
    elapsed = time.perf_counter() - t_start
    if failures:
        wid, exc = failures[0]
        raise RuntimeError(f"worker {wid} failed: {exc!r}") from exc
    return RunTrace(
        mode="threads",
        rows=master.rows,
        final_state=master.state,
        applied=master.applied,
        dropped=master.dropped,
        produced=sum(produced),
        staleness_hist=master.staleness_hist,
        elapsed_s=elapsed,
        discarded_at_shutdown=discarded,
    )


def run(problem, hp: HyperParams, cfg: RunConfig, hooks=(), box=None, x0=None) -> RunTrace:
    """Dispatch on cfg.mode."""
    if cfg.mode == "sim":
        return run_sim(problem, hp, cfg, hooks=hooks, box=box, x0=x0)
    if cfg.mode == "threads":
        return run_threads(problem, hp, cfg, hooks=hooks, box=box, x0=x0)
    from .wire import run_wire

    return run_wire(problem, hp, cfg, hooks=hooks, box=box, x0=x0)
