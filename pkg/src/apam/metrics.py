"""Ergodic averaging, convergence-bound evaluators, and lemma audits.

The bound evaluators compute the right-hand sides of the convex (with and
without delay) and non-convex rate guarantees from a BoundInputs record;
the audit harness replays a recorded trajectory and asserts the inequalities
the analysis promises step by step (second-moment monotonicity, the
non-expansive iterate bound, the normalized-gradient and moment bounds, the
per-coordinate moment caps, and the stale-snapshot mixture bounds). Any
violation beyond an absolute tolerance fails the audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .staleness import MixtureBoundsReport, mixture_bounds_check
from .vectormath import as_vec


def ergodic_weights(alphas, beta1: float) -> np.ndarray:
    """Normalized weights w_k proportional to sum_{j>=k} alpha_j * beta1^(j-k).

    With beta1 = 0 and a constant schedule this is the uniform average; the
    same vector is the sampling distribution used for the averaged-iterate
    guarantees.
    """
    a = as_vec(alphas)
    if a.size < 1:
        raise ValueError("need at least one step size")
    if np.any(a <= 0):
        raise ValueError("step sizes must be positive")
    if not (0.0 <= beta1 < 1.0):
        raise ValueError("beta1 must be in [0,1)")
    raw = np.empty_like(a)
    acc = 0.0
    for k in range(a.size - 1, -1, -1):
        acc = a[k] + beta1 * acc
        raw[k] = acc
    return raw / raw.sum()


def ergodic_average(trajectory, weights) -> np.ndarray:
    """Weighted average sum_k w_k x^(k) of a trajectory of iterates."""
    w = as_vec(weights)
    xs = [as_vec(x) for x in trajectory]
    if len(xs) != w.size:
        raise ValueError(f"{len(xs)} iterates vs {w.size} weights")
    out = np.zeros_like(xs[0])
    for wk, xk in zip(w, xs):
        out += wk * xk
    return out


def ncvx_sample_index(alphas, k0: int, K: int, seed: int) -> int:
    """Draw k in [k0, K] with probability proportional to alpha_{k-1}."""
    a = as_vec(alphas)
    if not (2 <= k0 <= K):
        raise ValueError(f"need 2 <= k0 <= K, got k0={k0}, K={K}")
    if a.size < K:
        raise ValueError(f"need alphas for steps 1..{K}, got {a.size}")
    w = a[k0 - 2 : K - 1]  # alpha_{k-1} for k = k0..K
    p = w / w.sum()
    rng = np.random.default_rng(seed)
    return int(rng.choice(np.arange(k0, K + 1), p=p))


@dataclass
class BoundInputs:
    """Constants feeding the rate-bound evaluators.

    Fields the theorems do not all need default to None; the provenance map
    records where each value came from (exact / estimated / assumed), and
    missing fields fail loudly in the evaluator that needs them.
    """

    n: int
    beta1: float
    beta2: float
    alpha: float
    K: int
    D_inf: float | None = None
    G1: float | None = None
    G_inf: float | None = None
    L: float | None = None
    s: int | None = None
    tau: int = 0
    C_F: float | None = None
    c: float | None = None
    k0: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.beta1 >= 1.0 or self.beta1 < 0.0:
            raise ValueError("beta1 must be in [0,1)")
        if self.beta2 >= 1.0 or self.beta2 < 0.0:
            raise ValueError("beta2 must be in [0,1)")
        if self.alpha <= 0 or self.K < 1:
            raise ValueError("alpha must be positive and K >= 1")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.k0 is not None and not (1 <= self.k0 <= self.K):
            raise ValueError("k0 must lie in [1, K]")

    def require(self, *names) -> None:
        missing = [nm for nm in names if getattr(self, nm) is None]
        if missing:
            raise ValueError(f"bound evaluation needs {', '.join(missing)}")


def _cvx_base_numerator(bi: BoundInputs) -> float:
    return bi.n * bi.D_inf**2 * bi.G_inf + (
        bi.alpha**2 / (1.0 - bi.beta1) ** 2
    ) * bi.G1 / math.sqrt(1.0 - bi.beta2)


def bound_cvx_nodelay(bi: BoundInputs, schedule: str = "const") -> float:
    """Objective-error guarantee at the averaged iterate, no delay.

    schedule="const" is the alpha/sqrt(K) variant; "invsqrt" the
    alpha/sqrt(k) one.
    """
    bi.require("D_inf", "G_inf", "G1")
    if schedule == "const":
        return _cvx_base_numerator(bi) / (
            2.0 * bi.alpha * math.sqrt(bi.K) * (1.0 - bi.beta1)
        )
    if schedule == "invsqrt":
        num = bi.n * bi.D_inf**2 * bi.G_inf + (
            bi.alpha**2 * (1.0 + math.log(bi.K)) / (1.0 - bi.beta1) ** 2
        ) * bi.G1 / math.sqrt(1.0 - bi.beta2)
        return num / (4.0 * bi.alpha * (math.sqrt(bi.K + 1) - 1.0) * (1.0 - bi.beta1))
    raise ValueError(f"unknown schedule {schedule!r}")


def bound_cvx_delay(bi: BoundInputs) -> float:
    """Objective-error guarantee with bounded staleness (alpha/sqrt(K) steps).

    Reduces exactly to the no-delay bound when tau = 0.
    """
    bi.require("D_inf", "G_inf", "G1")
    if bi.tau == 0:
        delay_term = 0.0
    else:
        bi.require("L", "s")
        delay_term = bi.alpha**3 * bi.L * bi.tau**2 * bi.s / (
            math.sqrt(bi.K) * (1.0 - bi.beta2)
        )
    return (_cvx_base_numerator(bi) + delay_term) / (
        2.0 * bi.alpha * math.sqrt(bi.K) * (1.0 - bi.beta1)
    )


def bound_ncvx(bi: BoundInputs, setting: int, E_vtilde_inv_l1: float) -> float:
    """Stationarity guarantee E||grad F||^2 <= C1 + (C2/c)(sqrt(C1) + C2/c).

    Setting 1 uses the constant alpha/sqrt(K-k0+1) schedule; Setting 2 the
    alpha/sqrt(k) schedule with k0 = K/2 >= tau + 2. E_vtilde_inv_l1 is the
    (estimated) expected l1 norm of the inverse square root of the
    floor-corrected second moment at k0-1; it is capped by its provable
    ceiling n/c.
    """
    bi.require("G_inf", "L", "s", "C_F", "c", "k0")
    if bi.c <= 0:
        raise ValueError("c must be positive")
    if E_vtilde_inv_l1 < 0:
        raise ValueError("E_vtilde_inv_l1 must be nonnegative")
    k0, K = bi.k0, bi.K
    if not (2 <= k0 <= K):
        raise ValueError("need 2 <= k0 <= K")
    E = min(E_vtilde_inv_l1, bi.n / bi.c)
    b1, b2 = bi.beta1, bi.beta2
    if setting == 1:
        T = K - k0 + 1
        sqT = math.sqrt(T)
        C2 = bi.alpha * bi.tau * math.sqrt(bi.s) * bi.L * bi.G_inf / (
            math.sqrt(1.0 - b2) * sqT
        )
        C1 = (
            bi.G_inf**3 * E / ((1.0 - b1) * T)
            + 2.0 * bi.C_F * bi.G_inf / (bi.alpha * sqT)
            + 7.0 * bi.s * bi.L * bi.G_inf * (1.0 - 2.0 * b1 + 4.0 * b1**2)
            * bi.alpha / (6.0 * (1.0 - b2) * (1.0 - b1) ** 2 * sqT)
        )
    elif setting == 2:
        if 2 * k0 != K:
            raise ValueError("setting 2 requires k0 = K/2 (K even)")
        if k0 < bi.tau + 2:
            raise ValueError("setting 2 requires K/2 >= tau + 2")
        sqK = math.sqrt(K)
        gap = 2.0 - math.sqrt(2.0)
        C2 = 2.0 * math.sqrt(2.0) * bi.alpha * bi.tau * math.sqrt(bi.s) * bi.L * bi.G_inf / (
            sqK * math.sqrt(1.0 - b2)
        )
        C1 = (
            bi.G_inf**3 * E / (gap * (1.0 - b1) * sqK * math.sqrt(K / 2.0 - 1.0))
            + 2.0 * bi.C_F * bi.G_inf / (gap * bi.alpha * sqK)
            + 7.0 * bi.s * bi.L * bi.G_inf * bi.alpha * math.log(4.0) / (
                6.0 * (1.0 - b2) * gap * sqK
            )
            + 7.0 * bi.s * bi.L * bi.G_inf * b1**2 * bi.alpha * (1.0 + math.log(3.0)) / (
                2.0 * (1.0 - b2) * (1.0 - b1) ** 2 * gap * sqK
            )
        )
    else:
        raise ValueError("setting must be 1 or 2")
    return C1 + (C2 / bi.c) * (math.sqrt(C1) + C2 / bi.c)


class GammaPhiTracker:
    """Running per-coordinate analysis trackers.

    Gamma is the running max of |g_i| over applied gradients, Phi the
    running max of |grad_i F| at visited iterates (opt-in: it costs a full
    gradient), and the floor vector records the first positive value each
    second-moment coordinate ever takes, which is what the floor-corrected
    second moment needs.
    """

    def __init__(self, n: int):
        self.n = n
        self.Gamma = np.zeros(n)
        self.Phi = np.zeros(n)
        self.floor = np.zeros(n)
        self.last_vhat = np.zeros(n)
        self.grad_count = 0
        self.sum_l1 = 0.0
        self.max_l1 = 0.0
        self.max_l0 = 0
        self.vhat_at_k0m1: np.ndarray | None = None

    def observe_gradient(self, g) -> None:
        g = as_vec(g)
        np.maximum(self.Gamma, np.abs(g), out=self.Gamma)
        self.grad_count += 1
        l1 = float(np.abs(g).sum())
        self.sum_l1 += l1
        self.max_l1 = max(self.max_l1, l1)
        self.max_l0 = max(self.max_l0, int(np.count_nonzero(g)))

    def observe_vhat(self, vhat) -> None:
        vhat = as_vec(vhat)
        fresh = (self.floor == 0.0) & (vhat > 0.0)
        self.floor[fresh] = vhat[fresh]
        self.last_vhat = vhat

    def observe_full_grad(self, grad_f) -> None:
        np.maximum(self.Phi, np.abs(as_vec(grad_f)), out=self.Phi)

    def vtilde(self, vhat=None) -> np.ndarray:
        """Floor-corrected second moment for the supplied (or last) vhat."""
        v = self.last_vhat if vhat is None else as_vec(vhat)
        return np.maximum(v, self.floor)

    @property
    def mean_l1(self) -> float:
        return self.sum_l1 / self.grad_count if self.grad_count else 0.0


@dataclass
class StepRecord:
    """Everything one applied update contributes to the audits."""

    k: int
    alpha_k: float
    tau: int
    g: np.ndarray
    m: np.ndarray
    v: np.ndarray
    vhat: np.ndarray
    x: np.ndarray
    dx_norm: float
    mixture: MixtureBoundsReport


class StepRecorder:
    """Runtime hook capturing per-step snapshots for invariant_audit.

    Also doubles as the Gamma/Phi tracker feed. phi_with (a problem) turns
    on full-gradient tracking every phi_stride applied steps; k0 marks the
    step whose post-update second moment should be stashed for the
    non-convex bound estimate; sample_k captures that iterate.
    """

    def __init__(self, n: int, phi_with=None, phi_stride: int = 10,
                 k0: int | None = None, sample_k: int | None = None,
                 keep_states: bool = True):
        self.tracker = GammaPhiTracker(n)
        self.records: list[StepRecord] = []
        self.dropped_taus: list[int] = []
        self._phi_with = phi_with
        self._phi_stride = phi_stride
        self._k0 = k0
        self._sample_k = sample_k
        self._keep = keep_states
        self.sampled_x: np.ndarray | None = None

    def on_apply(self, prev, new, msg, alpha_k, tau, hist) -> None:
        g = as_vec(msg.g)
        self.tracker.observe_gradient(g)
        self.tracker.observe_vhat(new.vhat)
        if self._phi_with is not None and prev.k % self._phi_stride == 0:
            self.tracker.observe_full_grad(self._phi_with.full_grad(new.x))
        if self._k0 is not None and prev.k == self._k0 - 1:
            self.tracker.vhat_at_k0m1 = new.vhat.copy()
        if self._sample_k is not None and new.k == self._sample_k:
            self.sampled_x = new.x.copy()
        if self._keep:
            self.records.append(
                StepRecord(
                    k=prev.k,
                    alpha_k=alpha_k,
                    tau=tau,
                    g=g,
                    m=new.m,
                    v=new.v,
                    vhat=new.vhat,
                    x=new.x,
                    dx_norm=float(np.linalg.norm(new.x - prev.x)),
                    mixture=mixture_bounds_check(hist, msg.read_meta),
                )
            )

    def on_drop(self, msg, tau, current) -> None:
        self.dropped_taus.append(tau)


@dataclass
class AuditCheck:
    name: str
    count: int
    worst_slack: float  # max over instances of (lhs - rhs); <= 0 means satisfied

    def ok(self, tol: float = 1e-9) -> bool:
        return self.worst_slack <= tol


@dataclass
class AuditReport:
    checks: list[AuditCheck]
    tol: float = 1e-9

    def ok(self) -> bool:
        return all(c.ok(self.tol) for c in self.checks)

    def failed(self) -> list[AuditCheck]:
        return [c for c in self.checks if not c.ok(self.tol)]

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.ok(self.tol) else "FAIL"
            lines.append(f"{status}  {c.name:28s} instances={c.count:<8d} worst_slack={c.worst_slack:.3e}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["check,instances,worst_slack,pass"]
        for c in self.checks:
            lines.append(f"{c.name},{c.count},{c.worst_slack!r},{int(c.ok(self.tol))}")
        return "\n".join(lines)


def _div_sqrt(num: np.ndarray, vhat: np.ndarray) -> np.ndarray:
    root = np.sqrt(vhat)
    out = np.zeros_like(num)
    np.divide(num, root, out=out, where=root > 0)
    return out


def invariant_audit(records, beta1: float, beta2: float, eps: float = 0.0,
                    stride: int = 10, tol: float = 1e-9) -> AuditReport:
    """Replay recorded steps and evaluate every assertable inequality.

    The normalized-gradient/moment bounds are exact only for eps = 0; with a
    positive denominator floor they are skipped. The all-history normalized
    gradient check runs every `stride` applied steps; everything else runs
    on every record.
    """
    if not records:
        raise ValueError("no recorded steps to audit")
    n = records[0].g.shape[0]
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}

    def note(name: str, slack: float, times: int = 1) -> None:
        worst[name] = max(worst.get(name, -math.inf), slack)
        counts[name] = counts.get(name, 0) + times

    gs = np.stack([r.g for r in records])  # (K, n): the applied gradient stream
    l0s = np.count_nonzero(gs, axis=1).astype(np.float64)
    Gamma = np.zeros(n)
    s_accum = 0.0  # (1-b1) sum b1^(k-j) sqrt(||g_j||_0)
    t_accum = 0.0  # (1-b1) sum b1^(k-j) ||g_j||_0
    prev_vhat = np.zeros(n)
    check_lemma4 = eps == 0.0
    for idx, r in enumerate(records):
        g, m, v, vhat = r.g, r.m, r.v, r.vhat
        np.maximum(Gamma, np.abs(g), out=Gamma)
        audit_now = r.k % stride == 0 or idx == len(records) - 1

        note("v_nonnegative", float((-v).max()))
        note("vhat_dominates_v", float((v - vhat).max()))
        note("vhat_monotone", float((prev_vhat - vhat).max()))
        prev_vhat = vhat

        mv = _div_sqrt(m, vhat)
        mv_norm = float(np.linalg.norm(mv))
        note("iterate_move_nonexpansive", r.dx_norm - r.alpha_k * mv_norm)

        note("moment_abs_bound", float((np.abs(m) - Gamma).max()))
        note("second_moment_bound", float((vhat - Gamma * Gamma).max()))

        if check_lemma4:
            s_accum = beta1 * s_accum + (1.0 - beta1) * math.sqrt(l0s[idx])
            t_accum = beta1 * t_accum + (1.0 - beta1) * l0s[idx]
            note("moment_over_root_norm", mv_norm - s_accum / math.sqrt(1.0 - beta2))
            note("moment_over_root_sq", mv_norm**2 - t_accum / (1.0 - beta2))
            if audit_now:
                # whole gradient history against the current second moment
                root = np.sqrt(vhat)
                scaled = np.divide(gs[: idx + 1], root,
                                   out=np.zeros((idx + 1, n)), where=root > 0)
                norms = np.linalg.norm(scaled, axis=1)
                bound = np.sqrt(l0s[: idx + 1] / (1.0 - beta2))
                note("grad_over_root_bound", float((norms - bound).max()),
                     times=idx + 1)

        # closed-form first moment by direct summation, different op order
        if audit_now:
            w = (1.0 - beta1) * beta1 ** np.arange(idx, -1, -1.0)
            direct = w @ gs[: idx + 1]
            note("moment_closed_form", float(np.abs(m - direct).max()))

        note("snapshot_mix_triangle", r.mixture.lhs_norm - r.mixture.rhs_norm_sum)
        note("snapshot_mix_squared", r.mixture.lhs_sq - r.mixture.rhs_sq_sum)

    checks = [AuditCheck(nm, counts[nm], worst[nm]) for nm in worst]
    return AuditReport(checks=checks, tol=tol)


def estimate_inputs(tracker: GammaPhiTracker, *, n: int, beta1: float, beta2: float,
                    alpha: float, K: int, k0: int | None = None, tau: int = 0,
                    box=None, L: float | None = None, C_F: float | None = None,
                    D_inf: float | None = None) -> BoundInputs:
    """Empirical BoundInputs from a run's gradient stream.

    Observable quantities are estimated and flagged 'estimated'; the
    smoothness and objective-range constants cannot be observed and must be
    supplied (flagged 'assumed') or stay unavailable. D_inf comes from the
    box when it is bounded.
    """
    prov: dict[str, str] = {}
    g_inf = float(tracker.Gamma.max()) if tracker.grad_count else 0.0
    prov["G_inf"] = "estimated"
    g1 = tracker.mean_l1
    prov["G1"] = "estimated"
    s = tracker.max_l0
    prov["s"] = "estimated"
    c = None
    if tracker.vhat_at_k0m1 is not None:
        vt = tracker.vtilde(tracker.vhat_at_k0m1)
        c = float(np.sqrt(vt.min())) if np.all(vt > 0) else 0.0
        prov["c"] = "estimated"
    else:
        prov["c"] = "unavailable"
    if D_inf is not None:
        prov["D_inf"] = "supplied"
    elif box is not None and box.is_bounded():
        D_inf = box.diameter_inf()
        prov["D_inf"] = "exact-from-box"
    else:
        prov["D_inf"] = "unavailable"
    prov["L"] = "assumed" if L is not None else "unavailable"
    prov["C_F"] = "assumed" if C_F is not None else "unavailable"
    return BoundInputs(
        n=n, beta1=beta1, beta2=beta2, alpha=alpha, K=K, k0=k0, tau=tau,
        D_inf=D_inf, G1=g1, G_inf=g_inf, L=L, s=s, C_F=C_F, c=c,
        provenance=prov,
    )


def vtilde_inv_l1(tracker: GammaPhiTracker) -> float | None:
    """One-sample estimate of the l1 norm of vtilde(k0-1)^(-1/2)."""
    if tracker.vhat_at_k0m1 is None:
        return None
    vt = tracker.vtilde(tracker.vhat_at_k0m1)
    if np.any(vt <= 0):
        return None
    return float(np.sum(1.0 / np.sqrt(vt)))
