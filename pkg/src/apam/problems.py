"""Training objectives with exact gradients and seeded mini-batch gradients.

Three problem families: l2-regularized logistic regression (convex), a
2-layer tanh/softmax network (non-convex), and a diagonal quadratic with
closed-form optimum used as the rate-test oracle. Mini-batch gradients
sample uniformly with replacement and are pure functions of
(x, batch_size, seed), so any number of workers can evaluate them
concurrently; the disjoint-batch average over one epoch goes through the
same batch_grad path and recovers the full gradient.
"""

from __future__ import annotations

import abc
import warnings

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, logsumexp

from .vectormath import BoxConstraint, SparseVec, as_vec, project_box

_MASK64 = (1 << 64) - 1
_BATCH_TAG = 0x41504D42  # distinct SeedSequence stream tags
_INIT_TAG = 0x41504D49


def derive_batch_seed(master_seed: int, worker_id: int, counter: int) -> int:
    """Deterministic 64-bit batch seed for a worker's counter-th gradient."""
    ss = np.random.SeedSequence(
        [_BATCH_TAG, master_seed & _MASK64, worker_id & _MASK64, counter & _MASK64]
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class Dataset:
    """Sparse feature rows plus integer labels.

    Labels are either binary -1/+1 or class ids 0..C-1.
    """

    def __init__(self, X: sp.csr_matrix, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if labels.shape != (X.shape[0],):
            raise ValueError("label count does not match row count")
        self.X = X.tocsr()
        self.labels = labels
        self.n_features = X.shape[1]
        uniq = set(np.unique(labels).tolist())
        if uniq <= {-1, 1}:
            self.n_classes = 2
        elif min(uniq) >= 0:
            self.n_classes = int(max(uniq)) + 1
        else:
            raise ValueError(f"labels must be -1/+1 or 0..C-1, got {sorted(uniq)}")

    @classmethod
    def from_dense(cls, X, labels) -> "Dataset":
        return cls(sp.csr_matrix(np.asarray(X, dtype=np.float64)), labels)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def row(self, i: int) -> SparseVec:
        r = self.X.getrow(i)
        order = np.argsort(r.indices)
        return SparseVec(r.indices[order].astype(np.int64), r.data[order])


def load_libsvm(path) -> Dataset:
    """Parse the plain-text 'label idx:val ...' format (1-based indices)."""
    labels: list[int] = []
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    max_index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                warnings.warn(f"{path}:{lineno}: empty line skipped")
                continue
            toks = line.split()
            try:
                lab = float(toks[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric label {toks[0]!r}") from None
            if lab != int(lab):
                raise ValueError(f"{path}:{lineno}: non-integer label {toks[0]!r}")
            labels.append(int(lab))
            prev = 0
            for tok in toks[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed feature {tok!r}") from None
                if idx < 1:
                    raise ValueError(f"{path}:{lineno}: index {idx} is not 1-based")
                if idx <= prev:
                    raise ValueError(
                        f"{path}:{lineno}: indices must be strictly increasing ({idx} after {prev})"
                    )
                prev = idx
                indices.append(idx - 1)
                data.append(val)
                max_index = max(max_index, idx)
            indptr.append(len(indices))
    if not labels:
        raise ValueError(f"{path}: no data lines")
    X = sp.csr_matrix(
        (np.asarray(data), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(labels), max_index),
    )
    return Dataset(X, labels)


def dump_libsvm(dataset: Dataset, path) -> None:
    """Write a dataset back out in the same text format."""
    X = dataset.X
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(dataset.n_samples):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(
                f"{int(X.indices[j]) + 1}:{float(X.data[j])!r}" for j in range(lo, hi)
            )
            fh.write(f"{int(dataset.labels[i])} {feats}".rstrip() + "\n")


class Problem(abc.ABC):
    """Objective interface used by the optimizer and runtime."""

    dim: int
    n_samples: int
    box: BoxConstraint | None
    init_seed: int

    @abc.abstractmethod
    def full_value(self, x) -> float: ...

    @abc.abstractmethod
    def full_grad(self, x) -> np.ndarray: ...

    @abc.abstractmethod
    def batch_grad(self, x, idx) -> np.ndarray: ...

    def minibatch_grad(self, x, batch_size: int, seed: int) -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        rng = np.random.default_rng(seed & _MASK64)
        idx = rng.integers(0, self.n_samples, size=batch_size)
        return self.batch_grad(x, idx)

    def initial_point(self, seed: int | None = None) -> np.ndarray:
        """Standard Gaussian start, projected into the box when present."""
        if seed is None:
            seed = self.init_seed
        rng = np.random.default_rng(np.random.SeedSequence([_INIT_TAG, seed & _MASK64]))
        x = rng.standard_normal(self.dim)
        if self.box is not None:
            x = project_box(x, self.box)
        return x


class LogisticProblem(Problem):
    """(1/N) sum log(1 + exp(-y_i <x_i, w>)) + (l2/2) ||w||^2, labels in {-1,+1}."""

    def __init__(self, dataset: Dataset, l2: float = 0.0, box=None, init_seed: int = 0):
        uniq = set(np.unique(dataset.labels).tolist())
        if not uniq <= {-1, 1}:
            raise ValueError(f"logistic regression needs -1/+1 labels, got {sorted(uniq)}")
        if l2 < 0:
            raise ValueError("l2 must be nonnegative")
        self._X = dataset.X
        self._y = dataset.labels.astype(np.float64)
        self.l2 = float(l2)
        self.dim = dataset.n_features
        self.n_samples = dataset.n_samples
        self.box = box
        self.init_seed = init_seed

    def full_value(self, x) -> float:
        x = as_vec(x)
        margins = self._y * (self._X @ x)
        reg = 0.5 * self.l2 * float(np.dot(x, x))
        return float(np.mean(np.logaddexp(0.0, -margins))) + reg

    def full_grad(self, x) -> np.ndarray:
        x = as_vec(x)
        margins = self._y * (self._X @ x)
        coef = self._y * expit(-margins)
        return -(self._X.T @ coef) / self.n_samples + self.l2 * x

    def batch_grad(self, x, idx) -> np.ndarray:
        x = as_vec(x)
        idx = np.asarray(idx)
        Xb = self._X[idx]
        yb = self._y[idx]
        coef = yb * expit(-(yb * (Xb @ x)))
        return -(Xb.T @ coef) / idx.size + self.l2 * x


def logistic(dataset: Dataset, l2: float = 0.0, box=None, init_seed: int = 0) -> LogisticProblem:
    return LogisticProblem(dataset, l2=l2, box=box, init_seed=init_seed)


class Mlp2Problem(Problem):
    """2-layer network: tanh hidden layer, softmax cross-entropy output.

    Parameters live in one flat vector laid out row-major as
    [W1 (h x d) | b1 (h) | W2 (C x h) | b2 (C)], so the optimizer sees an
    ordinary dense vector.
    """

    def __init__(self, dataset: Dataset, hidden: int = 50, seed: int = 0, box=None):
        if hidden < 1:
            raise ValueError("hidden width must be positive")
        self._Xd = np.asarray(dataset.X.todense(), dtype=np.float64)
        labels = dataset.labels
        if dataset.n_classes == 2 and set(np.unique(labels).tolist()) <= {-1, 1}:
            labels = ((labels + 1) // 2).astype(np.int64)
        self._y = labels
        self.h = int(hidden)
        self.d = dataset.n_features
        self.C = max(int(dataset.n_classes), 2)
        self.dim = self.h * self.d + self.h + self.C * self.h + self.C
        self.n_samples = dataset.n_samples
        self.box = box
        self.init_seed = seed

    def _unpack(self, theta: np.ndarray):
        h, d, C = self.h, self.d, self.C
        o = 0
        W1 = theta[o : o + h * d].reshape(h, d)
        o += h * d
        b1 = theta[o : o + h]
        o += h
        W2 = theta[o : o + C * h].reshape(C, h)
        o += C * h
        b2 = theta[o : o + C]
        return W1, b1, W2, b2

    def _value_on(self, theta, Xb, yb) -> float:
        W1, b1, W2, b2 = self._unpack(theta)
        Z1 = np.tanh(Xb @ W1.T + b1)
        logits = Z1 @ W2.T + b2
        lse = logsumexp(logits, axis=1)
        return float(np.mean(lse - logits[np.arange(len(yb)), yb]))

    def _grad_on(self, theta, Xb, yb) -> np.ndarray:
        W1, b1, W2, b2 = self._unpack(theta)
        B = Xb.shape[0]
        A1 = Xb @ W1.T + b1
        Z1 = np.tanh(A1)
        logits = Z1 @ W2.T + b2
        P = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        P[np.arange(B), yb] -= 1.0
        P /= B
        gW2 = P.T @ Z1
        gb2 = P.sum(axis=0)
        dZ1 = (P @ W2) * (1.0 - Z1 * Z1)
        gW1 = dZ1.T @ Xb
        gb1 = dZ1.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def full_value(self, x) -> float:
        return self._value_on(as_vec(x), self._Xd, self._y)

    def full_grad(self, x) -> np.ndarray:
        return self._grad_on(as_vec(x), self._Xd, self._y)

    def batch_grad(self, x, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return self._grad_on(as_vec(x), self._Xd[idx], self._y[idx])


def mlp2(dataset: Dataset, hidden: int = 50, seed: int = 0, box=None) -> Mlp2Problem:
    return Mlp2Problem(dataset, hidden=hidden, seed=seed, box=box)


class QuadraticProblem(Problem):
    """F(x) = 1/2 sum a_i x_i^2 - <b, x>, with closed-form optimum.

    With n_samples > 1 and noise_scale > 0 the finite sum gets fixed
    per-sample linear offsets whose column means are subtracted out, so the
    mean objective (hence F* and x*) is unchanged while mini-batch gradients
    become genuinely stochastic. All constants the rate bounds need are then
    computable exactly from (a, b, offsets, box).
    """

    def __init__(
        self,
        a_diag,
        b,
        n_samples: int = 1,
        noise_scale: float = 0.0,
        seed: int = 0,
        box=None,
        init_seed: int = 0,
    ):
        a = as_vec(a_diag)
        b = as_vec(b)
        if a.shape != b.shape:
            raise ValueError("a_diag and b must have the same length")
        if np.any(a < 0):
            raise ValueError("a_diag must be nonnegative")
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        self.a = a
        self.b = b
        self.dim = a.shape[0]
        self.n_samples = int(n_samples)
        self.box = box
        self.init_seed = init_seed
        if noise_scale > 0.0 and n_samples > 1:
            rng = np.random.default_rng(seed)
            E = rng.standard_normal((n_samples, self.dim)) * noise_scale
            E -= E.mean(axis=0)
        else:
            E = np.zeros((n_samples, self.dim))
        self._noise = E

    def full_value(self, x) -> float:
        x = as_vec(x)
        return float(0.5 * np.dot(self.a, x * x) - np.dot(self.b, x))

    def full_grad(self, x) -> np.ndarray:
        return self.a * as_vec(x) - self.b

    def batch_grad(self, x, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return self.a * as_vec(x) - self.b - self._noise[idx].mean(axis=0)

    def x_star(self) -> np.ndarray:
        if np.any(self.a == 0):
            raise ValueError("minimizer is closed-form only where a_i > 0")
        return self.b / self.a

    def f_star(self) -> float:
        return float(-0.5 * np.sum(self.b * self.b / self.a))

    def bound_constants(self, box: BoxConstraint | None = None) -> dict:
        """Exact per-assumption constants over the given box.

        Returns G_inf (a.s. sup of |grad f| per coordinate, maxed), G1
        (sum of per-coordinate sups, an upper bound on E||grad f||_1),
        L (max curvature), s (support bound = n), D_inf (box diameter).
        """
        box = box if box is not None else self.box
        if box is None or not box.is_bounded():
            raise ValueError("exact constants need a bounded box")
        lo, up = box.lower, box.upper
        det = np.maximum(np.abs(self.a * lo - self.b), np.abs(self.a * up - self.b))
        coordwise = det + np.abs(self._noise).max(axis=0)
        return {
            "G_inf": float(coordwise.max()),
            "G1": float(coordwise.sum()),
            "L": float(self.a.max()),
            "s": int(self.dim),
            "D_inf": box.diameter_inf(),
        }


def quadratic(
    a_diag,
    b,
    n_samples: int = 1,
    noise_scale: float = 0.0,
    seed: int = 0,
    box=None,
    init_seed: int = 0,
) -> QuadraticProblem:
    return QuadraticProblem(
        a_diag, b, n_samples=n_samples, noise_scale=noise_scale, seed=seed,
        box=box, init_seed=init_seed,
    )


def grad_check(problem: Problem, x, h: float = 1e-6, max_coords: int = 200, seed: int = 0) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Coordinates are subsampled (200, seeded) when the dimension exceeds 1000.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_vec(x).copy()
    g = problem.full_grad(x)
    n = x.shape[0]
    if n > 1000:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)
    worst = 0.0
    for i in coords:
        xi = x[i]
        x[i] = xi + h
        fp = problem.full_value(x)
        x[i] = xi - h
        fm = problem.full_value(x)
        x[i] = xi
        fd = (fp - fm) / (2.0 * h)
        rel = abs(fd - g[i]) / max(1.0, abs(g[i]))
        worst = max(worst, rel)
    return worst


def synth_classification(
    n_samples: int,
    n_features: int,
    separable: bool,
    seed: int,
    n_classes: int = 2,
) -> Dataset:
    """Gaussian class clouds; deterministic per seed.

    Binary datasets get -1/+1 labels. With separable=True the binary clouds
    are shifted along a unit normal so a zero-error linear classifier exists
    by construction (margin >= 1); multiclass separation just widens the
    class means.
    """
    if n_samples < 1 or n_features < 1:
        raise ValueError("n_samples and n_features must be positive")
    rng = np.random.default_rng(seed)
    if n_classes == 2:
        w = rng.standard_normal(n_features)
        w /= np.linalg.norm(w)
        X = rng.standard_normal((n_samples, n_features))
        if separable:
            labels = np.where(X @ w >= 0, 1, -1)
            X = X + labels[:, None] * w[None, :]
        else:
            labels = rng.integers(0, 2, size=n_samples) * 2 - 1
            X = X + 0.5 * labels[:, None] * w[None, :]
    else:
        means = rng.standard_normal((n_classes, n_features)) * (3.0 if separable else 1.0)
        labels = rng.integers(0, n_classes, size=n_samples)
        X = means[labels] + rng.standard_normal((n_samples, n_features))
    return Dataset.from_dense(X, labels)
