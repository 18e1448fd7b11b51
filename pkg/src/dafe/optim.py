"""Stochastic optimizers over finite sums: SGD, SAGA, q-SAGA, SVRG and N-SAGA.

Every variant keeps a per-sample gradient memory (zeros for SGD) and
follows the corrected step

    w <- w - gamma * (g_n(w) - memory[n] + mean(memory))

The index sequence comes from one rng stream and auxiliary draws (refresh
sets, refresh coin flips) from another, so variants that degenerate to
SAGA reproduce its trajectory bitwise under the same seed.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, ParameterError
from .tensor import SeededRng, as_tensor

VARIANTS = ("sgd", "sgd-const", "saga", "qsaga", "svrg", "nsaga")


class FiniteSumProblem:
    """Ridge least squares ``f(w) = mean_n 0.5 (a_n.w - y_n)^2 + 0.5 mu |w|^2``."""

    def __init__(self, A, y, mu):
        self.A = as_tensor(A)
        self.y = as_tensor(y)
        if self.A.ndim != 2 or self.A.shape[0] != self.y.shape[0] or self.A.shape[0] < 1:
            raise DataError("need A of shape (N, d) and y of shape (N,) with N >= 1")
        if mu <= 0:
            raise ParameterError("mu must be positive")
        self.mu = float(mu)
        self._w_star = None

    @property
    def n_samples(self):
        return self.A.shape[0]

    @property
    def dim(self):
        return self.A.shape[1]

    def grad(self, n, w):
        a = self.A[n]
        return a * (a @ w - self.y[n]) + self.mu * w

    def all_grads(self, w):
        r = self.A @ w - self.y
        return self.A * r[:, None] + self.mu * w

    def full_grad(self, w):
        return self.A.T @ (self.A @ w - self.y) / self.n_samples + self.mu * w

    def value(self, w):
        r = self.A @ w - self.y
        return 0.5 * float(r @ r) / self.n_samples + 0.5 * self.mu * float(w @ w)

    @property
    def w_star(self):
        if self._w_star is None:
            N = self.n_samples
            H = self.A.T @ self.A / N + self.mu * np.eye(self.dim)
            self._w_star = np.linalg.solve(H, self.A.T @ self.y / N)
        return self._w_star

    def suboptimality(self, w):
        return max(self.value(w) - self.value(self.w_star), 0.0)

    def points(self):
        """Per-sample coordinates used to define neighbourhoods."""
        return np.column_stack([self.A, self.y])


def make_benchmark(n_samples=1000, dim=20, mu=0.1, clusters=100, spread=0.05, noise=0.1, seed=0):
    """Least squares over clustered inputs.

    ``clusters`` centres are drawn from N(0, I); sample n sits at centre
    ``n % clusters`` plus N(0, spread^2) jitter, so every sample has close
    neighbours.  Targets are ``a.w_true`` plus N(0, noise^2).  ``clusters=0``
    gives an unclustered N(0, I) design.
    """
    rng = SeededRng(seed, stream=7)
    if clusters:
        centres = rng.normal(1.0, (clusters, dim))
        A = centres[np.arange(n_samples) % clusters] + rng.normal(spread, (n_samples, dim))
    else:
        A = rng.normal(1.0, (n_samples, dim))
    w_true = rng.normal(1.0, dim)
    y = A @ w_true + rng.normal(noise, n_samples)
    return FiniteSumProblem(A, y, mu)


@dataclass
class OptimizerState:
    w: np.ndarray
    memory: np.ndarray
    mean: np.ndarray
    gamma: float
    variant: str = "saga"
    q: int = 1
    neighborhoods: np.ndarray = None
    t: int = 0
    evaluations: int = 0
    aux: SeededRng = field(default=None, repr=False)


def step_size(problem, q=1):
    """The rule ``gamma = q / (mu N)``."""
    return q / (problem.mu * problem.n_samples)


def init_state(problem, variant="saga", gamma=None, q=1, k=1, seed=0, w0=None, memory_init="zeros"):
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}")
    N, d = problem.n_samples, problem.dim
    w = np.zeros(d) if w0 is None else as_tensor(w0).copy()
    gamma = step_size(problem, 1) if gamma is None else float(gamma)
    state = OptimizerState(w=w, memory=np.zeros((N, d)), mean=np.zeros(d), gamma=gamma,
                           variant=variant, q=int(q), aux=SeededRng(seed, stream=1))
    if memory_init == "full":
        state.memory = problem.all_grads(w)
        state.mean = state.memory.mean(axis=0)
        state.evaluations += N
    elif memory_init != "zeros":
        raise ParameterError(f"unknown memory init {memory_init!r}")
    if variant == "nsaga":
        state.neighborhoods = build_neighborhoods(problem.points(), k)
    return state


def _write(state, j, g):
    state.mean += (g - state.memory[j]) / state.memory.shape[0]
    state.memory[j] = g


def _corrected_step(state, g, n):
    state.w = state.w - state.gamma * (g - state.memory[n] + state.mean)


def step_sgd(state, problem, n, constant=False):
    g = problem.grad(n, state.w)
    gamma = state.gamma if constant else state.gamma / (1.0 + state.t * problem.mu * state.gamma)
    state.w = state.w - gamma * g
    state.t += 1
    state.evaluations += 1
    return state


def step_saga(state, problem, n):
    g = problem.grad(n, state.w)
    _corrected_step(state, g, n)
    _write(state, n, g)
    state.t += 1
    state.evaluations += 1
    return state


def step_q_saga(state, problem, n, q=None, forced=None):
    """SAGA step at ``n``, then refresh ``q`` memory slots at the pre-step point.

    ``forced`` overrides the uniformly drawn refresh set.
    """
    q = state.q if q is None else q
    N = problem.n_samples
    if not 1 <= q <= N:
        raise ParameterError(f"q must lie in [1, {N}]")
    w = state.w
    g = problem.grad(n, w)
    _corrected_step(state, g, n)
    refresh = state.aux.choice(N, q) if forced is None else np.atleast_1d(forced)
    for j in refresh:
        j = int(j)
        _write(state, j, g if j == n else problem.grad(j, w))
    state.t += 1
    state.evaluations += 1 + sum(1 for j in refresh if int(j) != n)
    return state


def step_svrg(state, problem, n, q=None):
    """With probability ``q/N`` recompute the whole memory, then take a corrected step."""
    q = state.q if q is None else q
    N = problem.n_samples
    if state.aux.uniform() < q / N:
        state.memory = problem.all_grads(state.w)
        state.mean = state.memory.mean(axis=0)
        state.evaluations += N
    g = problem.grad(n, state.w)
    _corrected_step(state, g, n)
    state.t += 1
    state.evaluations += 1
    return state


def build_neighborhoods(points, k):
    """Exact ``k`` nearest neighbours (Euclidean, self first, ties by index), shape (N, k)."""
    P = as_tensor(points)
    N = P.shape[0]
    if not 1 <= k <= N:
        raise ParameterError(f"k must lie in [1, {N}]")
    out = np.empty((N, k), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, N * P.shape[1]))
    for start in range(0, N, chunk):
        rows = np.arange(start, min(N, start + chunk))
        diff = P[rows, None, :] - P[None, :, :]
        D = np.einsum("ijk,ijk->ij", diff, diff)
        D[np.arange(len(rows)), rows] = -1.0
        out[rows] = np.argsort(D, axis=1, kind="stable")[:, :k]
    return out


def step_n_saga(state, problem, n):
    """SAGA step whose single gradient is written into every neighbour's slot."""
    if state.neighborhoods is None:
        raise ContractError("n-saga needs a neighbourhood index")
    g = problem.grad(n, state.w)
    _corrected_step(state, g, n)
    for j in state.neighborhoods[n]:
        _write(state, int(j), g)
    state.t += 1
    state.evaluations += 1
    return state


def step(state, problem, n):
    v = state.variant
    if v == "sgd":
        return step_sgd(state, problem, n)
    if v == "sgd-const":
        return step_sgd(state, problem, n, constant=True)
    if v == "saga":
        return step_saga(state, problem, n)
    if v == "qsaga":
        return step_q_saga(state, problem, n)
    if v == "svrg":
        return step_svrg(state, problem, n)
    return step_n_saga(state, problem, n)


def run(problem, variant="saga", epochs=30, seed=0, gamma=None, q=1, k=10, log_every=None,
        memory_init="zeros"):
    """Run ``variant`` for ``epochs * N`` data-point evaluations.

    Returns ``(state, rows)`` with rows ``(evaluations, suboptimality, wall_seconds)``,
    logged every ``log_every`` evaluations (default ``N / 20``) and at the end.
    """
    N = problem.n_samples
    log_every = max(1, N // 20) if log_every is None else int(log_every)
    state = init_state(problem, variant, gamma, q=q, k=k, seed=seed, memory_init=memory_init)
    sampler = SeededRng(seed, stream=0)
    budget = int(epochs * N)
    start = time.perf_counter()
    rows = [(state.evaluations, problem.suboptimality(state.w), 0.0)]
    next_log = state.evaluations + log_every
    while state.evaluations < budget:
        step(state, problem, int(sampler.integers(N)))
        if state.evaluations >= next_log or state.evaluations >= budget:
            rows.append((state.evaluations, problem.suboptimality(state.w), time.perf_counter() - start))
            next_log = (state.evaluations // log_every + 1) * log_every
    return state, rows


def first_epoch_log_mean(rows, n_samples):
    """Mean of log10 suboptimality over logged points within the first epoch."""
    vals = [s for e, s, _ in rows if 0 < e <= n_samples]
    return float(np.mean(np.log10(np.maximum(vals, 1e-300))))


def evaluations_to_reach(rows, level):
    for e, s, _ in rows:
        if s <= level:
            return e
    return None
