"""Objective suite: distributed finite-sum problems with exact constants.

Provides diagonal quadratic ensembles (every smoothness constant, minimizer
and initial suboptimality exact), a synthetic softmax classification problem
with a Dirichlet non-IID partition, and the shared stochastic-gradient draw
machinery. Per-worker sample streams are keyed by (run_seed, worker_id) and
addressed by draw index, so evaluation order cannot change sampled values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

# Stream tags keep the independent RNG consumers of one run seed apart.
_STREAM_NOISE = 0
_STREAM_TAU = 1
_STREAM_PARTITION = 2
_STREAM_PROBLEM = 3


class ConfigurationError(ValueError):
    """Invalid problem or run configuration."""


@dataclass(frozen=True)
class SmoothnessConstants:
    """Smoothness constants of f = (1/n) sum f_i.

    `objective` is the constant of f itself; `bound` is the quadratic-mean
    bound sqrt((1/n) sum per_worker^2) that every stepsize formula uses;
    `max_worker` is the largest per-worker constant. They always satisfy
    objective <= bound <= max_worker.
    """

    objective: float
    bound: float
    max_worker: float
    per_worker: tuple[float, ...]


def worker_stream(run_seed: int, worker_id: int, tag: int = _STREAM_NOISE) -> np.random.Generator:
    """Dedicated generator for one (run seed, worker) pair."""
    ss = np.random.SeedSequence(entropy=(int(run_seed), int(tag), int(worker_id)))
    return np.random.Generator(np.random.Philox(ss))


def tau_stream(run_seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(run_seed), _STREAM_TAU, 0))))


def worker_noise(run_seed: int, worker_id: int, count: int, dim: int) -> np.ndarray:
    """First `count` standard-normal noise rows of the worker's stream.

    Row j is draw j; generating a longer block leaves earlier rows unchanged,
    which replay code relies on.
    """
    gen = worker_stream(run_seed, worker_id, _STREAM_NOISE)
    return gen.standard_normal((count, dim))


def worker_sample_indices(run_seed: int, worker_id: int, count: int, pool: int) -> np.ndarray:
    """First `count` uniform sample indices in [0, pool) of the worker's stream."""
    gen = worker_stream(run_seed, worker_id, _STREAM_NOISE)
    return gen.integers(0, pool, size=count)


@dataclass
class Problem:
    """f = (1/n) sum f_i with exact full/worker gradients and a stochastic oracle.

    Subclasses provide the oracles; this base carries the quantities every
    run and audit needs: dimension, worker count, noise level, smoothness
    constants, the starting point, and the initial suboptimality.
    """

    dim: int
    n: int
    sigma_sq: float
    constants: SmoothnessConstants
    x0: np.ndarray
    delta: float  # f(x0) - f_star (exact when f_star is; upper bound otherwise)
    f_star: Optional[float]
    sigma_sq_is_estimate: bool = False

    # --- oracles (subclass responsibility) -------------------------------
    def worker_gradient(self, worker_id: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def full_value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def draw_block(self, run_seed: int, worker_id: int, count: int) -> np.ndarray:
        """Draw material for the worker's first `count` stochastic draws."""
        raise NotImplementedError

    def apply_draw(self, worker_id: int, x: np.ndarray, draw_row) -> np.ndarray:
        """Stochastic gradient at x from one row of draw material."""
        raise NotImplementedError

    def fresh_draws(self, rng: np.random.Generator, worker_id: int, count: int):
        """Draw material from a caller-supplied generator, same shape as
        draw_block rows. Lets audits re-sample estimators without touching
        the worker streams."""
        raise NotImplementedError

    def grad_norm_sq(self, x: np.ndarray) -> float:
        g = self.full_gradient(x)
        # Overflow to inf is meaningful here: it is how divergence surfaces.
        with np.errstate(over="ignore", invalid="ignore"):
            return float(g @ g)

    def describe(self) -> dict:
        raise NotImplementedError


def stochastic_gradient(
    problem: Problem, worker_id: int, x: np.ndarray, run_seed: int, draw_index: int
) -> np.ndarray:
    """One stochastic gradient, deterministic in (run_seed, worker, draw index)."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite iterate passed to the stochastic oracle")
    block = problem.draw_block(run_seed, worker_id, draw_index + 1)
    return problem.apply_draw(worker_id, x, block[draw_index])


class QuadraticEnsemble(Problem):
    """Diagonal quadratics f_i(x) = 0.5 x' diag(a_i) x + c_i' x.

    Gradient noise is isotropic Gaussian with covariance (sigma^2/dim) I, so
    E||noise||^2 = sigma^2 exactly. All smoothness constants and the global
    minimizer are exact (diagonal spectra).
    """

    def __init__(self, curvatures: np.ndarray, linears: np.ndarray, sigma_sq: float,
                 x0: np.ndarray):
        curvatures = np.asarray(curvatures, dtype=np.float64)
        linears = np.asarray(linears, dtype=np.float64)
        n, dim = curvatures.shape
        if linears.shape != (n, dim):
            raise ConfigurationError("curvature and linear terms disagree in shape")
        if np.any(curvatures < 0):
            raise ConfigurationError("curvatures must be non-negative")
        mean_curv = curvatures.mean(axis=0)
        mean_lin = linears.mean(axis=0)
        if np.any(mean_curv <= 0):
            raise ConfigurationError("mean curvature is singular; no unique minimizer")
        per_worker = tuple(float(v) for v in curvatures.max(axis=1))
        constants = SmoothnessConstants(
            objective=float(mean_curv.max()),
            bound=float(math.sqrt(np.mean(np.square(per_worker)))),
            max_worker=float(max(per_worker)),
            per_worker=per_worker,
        )
        x_star = -mean_lin / mean_curv
        x0 = np.asarray(x0, dtype=np.float64)
        self.curvatures = curvatures
        self.linears = linears
        self.mean_curvature = mean_curv
        self.mean_linear = mean_lin
        self.x_star = x_star
        f0 = self._value(x0)
        f_star = self._value(x_star)
        super().__init__(
            dim=dim, n=n, sigma_sq=float(sigma_sq), constants=constants,
            x0=x0, delta=f0 - f_star, f_star=f_star,
        )
        self.noise_scale = math.sqrt(self.sigma_sq / dim)

    def _value(self, x: np.ndarray) -> float:
        return float(0.5 * self.mean_curvature @ (x * x) + self.mean_linear @ x)

    def worker_gradient(self, worker_id, x):
        return self.curvatures[worker_id] * x + self.linears[worker_id]

    def full_gradient(self, x):
        return self.mean_curvature * x + self.mean_linear

    def full_value(self, x):
        return self._value(x)

    def draw_block(self, run_seed, worker_id, count):
        return worker_noise(run_seed, worker_id, count, self.dim)

    def apply_draw(self, worker_id, x, draw_row):
        return self.worker_gradient(worker_id, x) + self.noise_scale * draw_row

    def fresh_draws(self, rng, worker_id, count):
        return rng.standard_normal((count, self.dim))

    def describe(self):
        return {
            "kind": "quadratic",
            "dimension": self.dim,
            "workers": self.n,
            "sigma_sq": self.sigma_sq,
        }


def make_quadratic(
    dim: int,
    n: int,
    heterogeneity: float = 2.0,
    sigma_sq: float = 0.0,
    seed: int = 0,
    delta: Optional[float] = None,
) -> QuadraticEnsemble:
    """Random diagonal quadratic ensemble with exact constants.

    `heterogeneity` >= 1 spreads per-worker spectra over
    [1/heterogeneity, heterogeneity]; 1 makes all workers identical. When
    `delta` is given, x0 is scaled so f(x0) - f* equals it exactly.
    """
    if dim < 1 or n < 1:
        raise ConfigurationError("need dim >= 1 and n >= 1")
    if sigma_sq < 0:
        raise ConfigurationError("sigma_sq must be non-negative")
    if heterogeneity < 1:
        raise ConfigurationError("heterogeneity must be >= 1")
    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed), _STREAM_PROBLEM, 0))))
    if heterogeneity == 1.0:
        curv = np.ones((1, dim)) * np.linspace(0.5, 1.0, dim)
        curv = np.repeat(curv, n, axis=0)
        lin = np.repeat(gen.normal(size=(1, dim)), n, axis=0)
    else:
        log_h = math.log(heterogeneity)
        curv = np.exp(gen.uniform(-log_h, log_h, size=(n, dim)))
        lin = gen.normal(size=(n, dim))
    problem = QuadraticEnsemble(curv, lin, sigma_sq, x0=np.zeros(dim))
    if delta is not None:
        # Move x0 along the top-curvature coordinate until f(x0)-f* = delta.
        j = int(np.argmax(problem.mean_curvature))
        x0 = problem.x_star.copy()
        x0[j] += math.sqrt(2.0 * delta / problem.mean_curvature[j])
        problem = QuadraticEnsemble(curv, lin, sigma_sq, x0=x0)
    return problem


@dataclass(frozen=True)
class DirichletPartition:
    """Equal-size Dirichlet allocation of a labeled pool across n clients."""

    alpha: float
    n: int
    class_counts: np.ndarray      # (n, classes) ints, rows sum to quota
    client_indices: tuple         # n arrays of sample indices into the pool
    trimmed_size: int

    @property
    def quota(self) -> int:
        return self.trimmed_size // self.n


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Round proportions*total to integers summing exactly to total."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # Largest fractional parts win the leftover units; ties go to the
        # lowest class id (stable argsort on negated remainders).
        remainders = raw - counts
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels: np.ndarray, n: int, alpha: float, seed: int) -> DirichletPartition:
    """Equal-size Dirichlet split with deterministic top-up.

    The pool is trimmed so its size divides n (tail dropped). Each client
    draws class proportions ~ Dirichlet(alpha), rounded to a vector summing
    to the quota. Requests run against per-class pools; shortfalls are topped
    up from the classes with the most remaining samples (ties: lowest id).
    """
    if n < 1 or alpha <= 0:
        raise ConfigurationError("need n >= 1 and alpha > 0")
    labels = np.asarray(labels)
    trimmed = len(labels) - (len(labels) % n)
    labels = labels[:trimmed]
    classes = int(labels.max()) + 1 if trimmed else 0
    quota = trimmed // n
    pools = [list(np.flatnonzero(labels == c)) for c in range(classes)]
    remaining = np.array([len(p) for p in pools], dtype=np.int64)
    taken = np.zeros(classes, dtype=np.int64)

    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed), _STREAM_PARTITION, 0))))
    counts = np.zeros((n, classes), dtype=np.int64)
    client_indices = []
    for j in range(n):
        proportions = gen.dirichlet(np.full(classes, alpha))
        want = _largest_remainder(proportions, quota)
        got = np.minimum(want, remaining)
        shortfall = quota - int(got.sum())
        remaining -= got
        while shortfall > 0:
            c = int(np.argmax(remaining))  # argmax takes the lowest id on ties
            if remaining[c] <= 0:
                raise ConfigurationError("pool exhausted before all clients filled")
            extra = min(shortfall, int(remaining[c]))
            got[c] += extra
            remaining[c] -= extra
            shortfall -= extra
        counts[j] = got
        idx = []
        for c in range(classes):
            lo = int(taken[c])
            idx.extend(pools[c][lo:lo + int(got[c])])
            taken[c] += got[c]
        client_indices.append(np.array(sorted(idx), dtype=np.int64))
    return DirichletPartition(
        alpha=alpha, n=n, class_counts=counts,
        client_indices=tuple(client_indices), trimmed_size=trimmed,
    )


class SoftmaxClassification(Problem):
    """Linear softmax over synthetic Gaussian-mixture features.

    Parameters are the flattened (classes x dim) weight matrix. Local
    objectives are mean cross-entropy over each client's shard; the
    stochastic oracle evaluates one uniformly drawn shard sample per draw.
    sigma^2 is an empirical 95th-percentile estimate and is flagged as such.
    """

    def __init__(self, features, labels, partition: DirichletPartition, classes: int,
                 probe_seed: int = 0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.partition = partition
        self.classes = classes
        feat_dim = self.features.shape[1]
        n = partition.n
        self.shards = [
            (self.features[idx], self.labels[idx]) for idx in partition.client_indices
        ]
        dim = classes * feat_dim
        # Per-worker smoothness of mean softmax cross-entropy: at most
        # 0.5 * lambda_max of the shard's second-moment matrix.
        per_worker = []
        for fx, _ in self.shards:
            second = fx.T @ fx / len(fx)
            per_worker.append(0.5 * float(np.linalg.eigvalsh(second)[-1]))
        all_second = self.features.T @ self.features / len(self.features)
        objective = 0.5 * float(np.linalg.eigvalsh(all_second)[-1])
        bound = math.sqrt(sum(v * v for v in per_worker) / n)
        constants = SmoothnessConstants(
            objective=min(objective, bound),  # keep the exact ordering
            bound=bound,
            max_worker=max(per_worker),
            per_worker=tuple(per_worker),
        )
        x0 = np.zeros(dim)
        sigma_sq = self._estimate_sigma_sq(x0, probe_seed)
        f0 = self._mean_cross_entropy(self.features, self.labels, x0)
        # Cross-entropy is bounded below by 0; delta is an upper bound.
        super().__init__(
            dim=dim, n=n, sigma_sq=sigma_sq, constants=constants, x0=x0,
            delta=f0, f_star=None, sigma_sq_is_estimate=True,
        )

    # --- softmax pieces --------------------------------------------------
    def _weights(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.classes, -1)

    @staticmethod
    def _log_softmax(z: np.ndarray) -> np.ndarray:
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def _mean_cross_entropy(self, fx, fy, x) -> float:
        logits = fx @ self._weights(x).T
        logp = self._log_softmax(logits)
        return float(-logp[np.arange(len(fy)), fy].mean())

    def _grad_on(self, fx, fy, x) -> np.ndarray:
        logits = fx @ self._weights(x).T
        p = np.exp(self._log_softmax(logits))
        p[np.arange(len(fy)), fy] -= 1.0
        return (p.T @ fx / len(fy)).ravel()

    def worker_gradient(self, worker_id, x):
        fx, fy = self.shards[worker_id]
        return self._grad_on(fx, fy, x)

    def full_gradient(self, x):
        return self._grad_on(self.features, self.labels, x)

    def full_value(self, x):
        return self._mean_cross_entropy(self.features, self.labels, x)

    def draw_block(self, run_seed, worker_id, count):
        pool = len(self.shards[worker_id][0])
        return worker_sample_indices(run_seed, worker_id, count, pool)

    def apply_draw(self, worker_id, x, draw_row):
        fx, fy = self.shards[worker_id]
        s = int(draw_row)
        return self._grad_on(fx[s:s + 1], fy[s:s + 1], x)

    def fresh_draws(self, rng, worker_id, count):
        pool = len(self.shards[worker_id][0])
        return rng.integers(0, pool, size=count, dtype=np.int64)

    def _estimate_sigma_sq(self, x0, probe_seed, probes: int = 8) -> float:
        """95th percentile of exact per-sample gradient variance over probes."""
        gen = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=(int(probe_seed), _STREAM_PROBLEM, 1))))
        values = []
        for _ in range(probes):
            x = x0 + 0.5 * gen.standard_normal(x0.shape)
            for i in range(self.partition.n):
                fx, fy = self.shards[i]
                mean_g = self._grad_on(fx, fy, x)
                acc = 0.0
                for s in range(len(fx)):
                    g = self._grad_on(fx[s:s + 1], fy[s:s + 1], x)
                    d = g - mean_g
                    acc += float(d @ d)
                values.append(acc / len(fx))
        return float(np.percentile(values, 95))

    def describe(self):
        return {
            "kind": "softmax",
            "dimension": self.dim,
            "workers": self.n,
            "classes": self.classes,
            "sigma_sq": self.sigma_sq,
            "sigma_sq_is_estimate": True,
            "alpha": self.partition.alpha,
        }


def make_softmax_classification(
    dim: int,
    classes: int,
    n: int,
    alpha: float,
    samples_per_client: int,
    seed: int = 0,
) -> SoftmaxClassification:
    """Synthetic Gaussian-mixture classification with a Dirichlet partition.

    Per-class means sit on a sphere of radius 3 with unit covariance.
    `dim` is the feature dimension; the parameter dimension is classes*dim.
    """
    if classes < 2:
        raise ConfigurationError("need at least two classes")
    if n < 1 or samples_per_client < 1:
        raise ConfigurationError("need n >= 1 and samples_per_client >= 1")
    total = n * samples_per_client
    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed), _STREAM_PROBLEM, 0))))
    means = gen.standard_normal((classes, dim))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.arange(total) % classes  # balanced pool before partitioning
    features = means[labels] + gen.standard_normal((total, dim))
    partition = dirichlet_partition(labels, n, alpha, seed)
    return SoftmaxClassification(features, labels, partition, classes, probe_seed=seed)


def verify_smoothness_ordering(problem: Problem, trials: int = 200, seed: int = 0) -> dict:
    """Check the constant ordering and the mean-gradient smoothness inequality.

    Samples random (x, y_1..y_n) tuples and asserts
    ||grad f(x) - (1/n) sum grad f_i(y_i)||^2 <= (L^2/n) sum ||x - y_i||^2
    with L = constants.bound. Returns a report dict with any witness tuple.
    """
    c = problem.constants
    report = {
        "ordering_ok": c.objective <= c.bound * (1 + 1e-12) and c.bound <= c.max_worker * (1 + 1e-12),
        "violations": 0,
        "trials": trials,
        "witness": None,
    }
    gen = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed), _STREAM_PROBLEM, 2))))
    L_sq = c.bound * c.bound
    for _ in range(trials):
        x = gen.standard_normal(problem.dim)
        ys = x + gen.standard_normal((problem.n, problem.dim))
        mean_stale = np.zeros(problem.dim)
        spread = 0.0
        for i in range(problem.n):
            mean_stale += problem.worker_gradient(i, ys[i])
            d = x - ys[i]
            spread += float(d @ d)
        mean_stale /= problem.n
        lhs = problem.full_gradient(x) - mean_stale
        lhs_sq = float(lhs @ lhs)
        rhs = L_sq * spread / problem.n
        if lhs_sq > rhs * (1 + 1e-9):
            report["violations"] += 1
            if report["witness"] is None:
                report["witness"] = (lhs_sq, rhs)
    report["ok"] = report["ordering_ok"] and report["violations"] == 0
    return report
