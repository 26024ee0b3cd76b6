"""Convergence analysis tools.

* curvature constants (L, mu) of the global loss via power iteration,
* samplers that check the smooth-convex inequalities on point pairs,
* exact enumeration of the memoryless global-parameter distribution,
* the averaged-gap bound for stale-reuse aggregation,
* the optimum ``w*`` and the distance series ``delta_t`` / ``delta_bar_t``.

The global loss is ``F = sum_i (D_i / D) F_i``, the objective whose
minimizer is the fixed point of size-weighted FedAvg. With equal local
dataset sizes it is the plain device average ``(1/N) sum_i F_i``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from erasure_fl.channel import ErasureChannelSet
from erasure_fl.data import FederatedDataset
from erasure_fl.errors import (
    DimensionError,
    InvalidConfigError,
    NotApplicableError,
    NumericalError,
    RankDeficiencyError,
)
from erasure_fl.model import LINEAR_MSE, SOFTMAX_XENT, LossSpec, local_gradient, local_loss

PMF_MAX_DEVICES = 24
INEQUALITY_TOL = 1e-9


# -- objectives ---------------------------------------------------------------


class Objective:
    """Weighted sum of device losses, ``sum_i weights_i * F_i``."""

    def __init__(self, fed: FederatedDataset, spec: LossSpec, weights: Sequence[float]) -> None:
        if len(weights) != fed.n_devices:
            raise DimensionError(f"{len(weights)} weights for {fed.n_devices} devices")
        self.fed = fed
        self.spec = spec
        self.weights = np.asarray(weights, dtype=float)
        self._active = [i for i, a in enumerate(self.weights) if a != 0.0]
        self.dim = spec.param_size(fed.width)

    def value(self, w: np.ndarray) -> float:
        return float(sum(self.weights[i] * local_loss(w, self.fed.parts[i], self.spec) for i in self._active))

    def gradient(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim)
        for i in self._active:
            g += self.weights[i] * local_gradient(w, self.fed.parts[i], self.spec)
        return g


def global_objective(fed: FederatedDataset, spec: LossSpec) -> Objective:
    return Objective(fed, spec, fed.sizes / fed.sizes.sum())


def subset_objective(fed: FederatedDataset, spec: LossSpec, subset: Sequence[int]) -> Objective:
    """``(1/N) * sum_{i in subset} F_i``."""
    n = fed.n_devices
    members = set(int(i) for i in subset)
    if any(i < 0 or i >= n for i in members):
        raise InvalidConfigError(f"subset {sorted(members)} not within 0..{n - 1}")
    return Objective(fed, spec, [1.0 / n if i in members else 0.0 for i in range(n)])


# -- curvature ----------------------------------------------------------------


@dataclass(frozen=True)
class CurvatureConstants:
    L: float
    mu: float
    per_device_L: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not (0 <= self.mu <= self.L * (1 + 1e-12)):
            raise InvalidConfigError(f"need 0 <= mu <= L, got mu={self.mu}, L={self.L}")

    @property
    def epsilon_limit(self) -> float:
        """Largest erasure probability the convergence bound admits, mu/(2L)."""
        return self.mu / (2.0 * self.L)


def _start_vector(n: int) -> np.ndarray:
    # Fixed, non-symmetric start so no eigenvector of a typical Hessian is missed.
    v = 1.0 + np.arange(n) / (n + 1.0) + 0.1 * np.sin(np.arange(1, n + 1))
    return v / np.linalg.norm(v)


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    n: int,
    tol: float = 1e-12,
    max_iter: int = 200_000,
) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD operator given by ``apply``.

    Stops when the residual ``|A v - lam v|`` falls below ``tol * lam``; for a
    symmetric operator this bounds the eigenvalue error by the same amount.
    """
    v = _start_vector(n)
    lam = 0.0
    for _ in range(max_iter):
        Av = apply(v)
        lam = float(v @ Av)
        res = float(np.linalg.norm(Av - lam * v))
        norm = float(np.linalg.norm(Av))
        if norm == 0.0:
            return 0.0, v
        if res <= tol * abs(lam):
            return lam, v
        v = Av / norm
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")


def extreme_eigenvalues(H: np.ndarray, tol: float = 1e-12) -> tuple[float, float]:
    """(lambda_min, lambda_max) of a symmetric PSD matrix.

    lambda_max by power iteration; lambda_min by inverse iteration on the
    Cholesky factor, or, when H is singular, by power iteration on
    ``lambda_max * I - H``.
    """
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + H.T)
    n = H.shape[0]
    lam_max, _ = power_iteration(lambda v: H @ v, n, tol)
    if lam_max == 0.0:
        return 0.0, 0.0
    try:
        chol = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        chol = None
    if chol is not None and np.all(np.diag(chol) > 1e-7 * math.sqrt(lam_max)):

        def solve(v: np.ndarray) -> np.ndarray:
            return np.linalg.solve(chol.T, np.linalg.solve(chol, v))

        inv_max, _ = power_iteration(solve, n, tol)
        return 1.0 / inv_max, lam_max
    gap, _ = power_iteration(lambda v: lam_max * v - H @ v, n, tol)
    return max(0.0, lam_max - gap), lam_max


def global_hessian(fed: FederatedDataset, spec: LossSpec) -> np.ndarray:
    """Exact Hessian of the global linear-mse loss."""
    if spec.kind != LINEAR_MSE:
        raise InvalidConfigError("exact Hessian only available for linear-mse")
    weights = fed.sizes / fed.sizes.sum()
    H = sum(a * (p.features.T @ p.features) / p.size for a, p in zip(weights, fed.parts))
    return H + spec.reg * np.eye(fed.width)


def curvature_quadratic(fed: FederatedDataset, spec: LossSpec) -> CurvatureConstants:
    """L and mu of the global quadratic loss, plus every device's own L_i."""
    lo, hi = extreme_eigenvalues(global_hessian(fed, spec))
    per_device = []
    for p in fed.parts:
        _, l_i = extreme_eigenvalues(p.features.T @ p.features / p.size)
        per_device.append(l_i + spec.reg)
    return CurvatureConstants(L=hi, mu=min(lo, hi), per_device_L=tuple(per_device))


def curvature_softmax(fed: FederatedDataset, spec: LossSpec) -> CurvatureConstants:
    """Bounds for softmax cross-entropy.

    The per-sample Hessian is dominated by ``(1/2) x x^T`` per class block,
    so ``L <= lambda_max(X^T X / D) / 2 + reg``; ``mu`` is the ridge
    coefficient, a valid lower bound.
    """
    if spec.kind != SOFTMAX_XENT:
        raise InvalidConfigError("curvature_softmax needs a softmax-xent spec")
    weights = fed.sizes / fed.sizes.sum()
    G = sum(a * (p.features.T @ p.features) / p.size for a, p in zip(weights, fed.parts))
    _, hi = extreme_eigenvalues(G)
    per_device = []
    for p in fed.parts:
        _, l_i = extreme_eigenvalues(p.features.T @ p.features / p.size)
        per_device.append(0.5 * l_i + spec.reg)
    return CurvatureConstants(L=0.5 * hi + spec.reg, mu=spec.reg, per_device_L=tuple(per_device))


def curvature(fed: FederatedDataset, spec: LossSpec) -> CurvatureConstants:
    if spec.kind == LINEAR_MSE:
        return curvature_quadratic(fed, spec)
    return curvature_softmax(fed, spec)


# -- optimum and distance series -------------------------------------------------


def optimal_params(fed: FederatedDataset, spec: LossSpec) -> tuple[np.ndarray, float]:
    """Minimizer of the global loss and its value.

    linear-mse: pooled normal equations. softmax-xent: damped Newton on the
    pooled problem (requires reg > 0).
    """
    F = global_objective(fed, spec)
    if spec.kind == LINEAR_MSE:
        return quadratic_minimum(F)
    return _newton_softmax(F)


def _softmax_hessian(F: Objective, w: np.ndarray) -> np.ndarray:
    C = F.spec.n_classes
    d = F.fed.width
    H = np.zeros((d * C, d * C))
    for a, p in zip(F.weights, F.fed.parts):
        if a == 0.0:
            continue
        logits = p.features @ w.reshape(d, C)
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        S = np.einsum("nc,ce->nce", P, np.eye(C)) - np.einsum("nc,ne->nce", P, P)
        H += a * np.einsum("nj,nk,nce->jcke", p.features, p.features, S).reshape(d * C, d * C) / p.size
    return H + F.spec.reg * np.eye(d * C)


def _newton_softmax(F: Objective, tol: float = 1e-10, max_iter: int = 200) -> tuple[np.ndarray, float]:
    if F.spec.reg <= 0:
        raise RankDeficiencyError("softmax optimum needs a ridge coefficient reg > 0")
    w = np.zeros(F.dim)
    f = F.value(w)
    for _ in range(max_iter):
        g = F.gradient(w)
        if np.linalg.norm(g) < tol:
            return w, f
        step = np.linalg.solve(_softmax_hessian(F, w), g)
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = F.value(w_new)
            if f_new <= f - 0.25 * t * float(g @ step) or t < 1e-12:
                break
            t *= 0.5
        w, f = w_new, f_new
    raise NumericalError(f"Newton iteration did not reach gradient norm {tol} in {max_iter} steps")


def quadratic_minimum(f: Objective) -> tuple[np.ndarray, float]:
    """Exact minimizer of a weighted linear-mse objective."""
    if f.spec.kind != LINEAR_MSE:
        raise InvalidConfigError("exact minimum only available for linear-mse objectives")
    d = f.fed.width
    A = f.spec.reg * float(f.weights.sum()) * np.eye(d)
    b = np.zeros(d)
    for a, p in zip(f.weights, f.fed.parts):
        A += a * (p.features.T @ p.features) / p.size
        b += a * (p.features.T @ p.targets) / p.size
    if np.linalg.cond(A) > 1e12:
        raise RankDeficiencyError("normal equations are singular or nearly so; use a ridge coefficient reg > 0")
    w = np.linalg.solve(A, b)
    w = w + np.linalg.solve(A, b - A @ w)
    return w, f.value(w)


def delta_metrics(trajectory: Sequence[np.ndarray], w_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared distances to the optimum and their running averages.

    Returns ``(delta, delta_bar)`` with ``delta[t] = |w_t - w*|^2`` for
    ``t = 0..T`` and ``delta_bar[k-1] = (1/k) sum_{i<k} delta[i]`` for
    ``k = 1..T+1``; that is, ``delta_bar[k-1]`` is the average over the
    first ``k`` entries.
    """
    traj = np.asarray(trajectory, dtype=float)
    diff = traj - np.asarray(w_star, dtype=float)
    delta = np.einsum("ij,ij->i", diff, diff)
    delta_bar = np.cumsum(delta) / np.arange(1, delta.size + 1)
    return delta, delta_bar


# -- convergence bound ---------------------------------------------------------


@dataclass(frozen=True)
class BoundParameters:
    beta_sq: float
    f0_gap: float
    applicable: bool
    reason: str = ""

    def __post_init__(self) -> None:
        if self.applicable and not (self.beta_sq > 0 and self.f0_gap >= 0):
            raise InvalidConfigError("an applicable bound needs beta^2 > 0 and a non-negative gap")


def beta_squared(constants: CurvatureConstants, epsilon: float) -> float:
    """``mu^2 / (2L) - 2 L eps^2``."""
    return constants.mu**2 / (2.0 * constants.L) - 2.0 * constants.L * epsilon**2


def bound_parameters(
    constants: CurvatureConstants,
    epsilon: float,
    f0_gap: float,
    eta: float | None = None,
) -> BoundParameters:
    """Evaluate the preconditions of the averaged-gap bound.

    Requires ``eps <= mu/(2L)`` with ``beta^2 > 0`` strictly (equality makes
    the bound infinite) and, when ``eta`` is given, ``eta == 1/L`` to within
    1e-9 relative.
    """
    beta_sq = beta_squared(constants, epsilon)
    limit = constants.epsilon_limit
    if not 0 <= epsilon <= 1:
        return BoundParameters(beta_sq, f0_gap, False, f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > limit:
        return BoundParameters(
            beta_sq, f0_gap, False, f"condition epsilon <= mu/(2L) fails: epsilon={epsilon:.6g} > mu/(2L)={limit:.6g}"
        )
    if epsilon == limit or beta_sq <= 0:
        return BoundParameters(
            beta_sq, f0_gap, False, f"condition beta^2 > 0 fails: beta^2={beta_sq:.6g} (epsilon at the mu/(2L) boundary)"
        )
    if eta is not None and not math.isclose(eta * constants.L, 1.0, rel_tol=1e-9):
        return BoundParameters(beta_sq, f0_gap, False, f"condition eta = 1/L fails: eta={eta:.6g}, 1/L={1 / constants.L:.6g}")
    if f0_gap < 0:
        return BoundParameters(beta_sq, f0_gap, False, f"initial optimality gap must be >= 0, got {f0_gap}")
    return BoundParameters(beta_sq, f0_gap, True)


def _condition_name(reason: str) -> str:
    for name in ("epsilon <= mu/(2L)", "beta^2 > 0", "eta = 1/L"):
        if name in reason:
            return name
    return "input"


def convergence_bound(constants: CurvatureConstants, epsilon: float, f0_gap: float, t: int) -> float:
    """Upper bound ``(F(w0) - F(w*)) / (t * beta^2)`` on ``delta_bar_t``.

    Raises NotApplicableError naming the failed precondition.
    """
    if t < 1:
        raise InvalidConfigError(f"t must be >= 1, got {t}")
    params = bound_parameters(constants, epsilon, f0_gap)
    if not params.applicable:
        raise NotApplicableError(_condition_name(params.reason), params.reason)
    return f0_gap / (t * params.beta_sq)


def bound_curve(
    delta_bar: np.ndarray,
    constants: CurvatureConstants,
    epsilon: float,
    f0_gap: float,
    eta: float | None = None,
) -> list[tuple[int, float, float]]:
    """``(t, delta_bar_t, bound_t)`` for ``t = 1..len(delta_bar)``."""
    params = bound_parameters(constants, epsilon, f0_gap, eta)
    if not params.applicable:
        raise NotApplicableError(_condition_name(params.reason), params.reason)
    return [(t, float(delta_bar[t - 1]), f0_gap / (t * params.beta_sq)) for t in range(1, len(delta_bar) + 1)]


# -- inequality checks ---------------------------------------------------------


@dataclass
class Violation:
    inequality: str
    slack: float
    x: list[float]
    y: list[float]


@dataclass
class InequalityReport:
    worst_slack: dict[str, float]
    pairs_checked: int
    violations: list[Violation] = field(default_factory=list)
    tolerance: float = INEQUALITY_TOL

    @property
    def ok(self) -> bool:
        return not self.violations

    def violated(self) -> set[str]:
        return {v.inequality for v in self.violations}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def random_pairs(rng: np.random.Generator, dim: int, count: int, scale: float = 1.0, center=None) -> list[tuple[np.ndarray, np.ndarray]]:
    c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    return [(c + scale * rng.standard_normal(dim), c + scale * rng.standard_normal(dim)) for _ in range(count)]


def _normalized(slack: float, *terms: float) -> float:
    return slack / max(1.0, *(abs(t) for t in terms))


class _Collector:
    def __init__(self, names: Sequence[str], tol: float) -> None:
        self.worst = {n: math.inf for n in names}
        self.violations: list[Violation] = []
        self.tol = tol

    def add(self, name: str, slack: float, x: np.ndarray, y: np.ndarray) -> None:
        if slack < self.worst[name]:
            self.worst[name] = slack
        if slack < -self.tol:
            self.violations.append(Violation(name, slack, x.tolist(), y.tolist()))


INEQUALITIES = ("descent-lemma", "optimality-gap", "gradient-lipschitz", "cocoercivity", "gradient-lower-lipschitz")


def check_inequalities(
    f: Objective,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    constants: CurvatureConstants,
    f_star: float | None = None,
    tol: float = INEQUALITY_TOL,
) -> InequalityReport:
    """Check the smooth-convex inequalities on every ``(x, y)`` pair.

    Slacks are ``rhs - lhs`` (non-negative when the inequality holds)
    divided by ``max(1, |lhs|, |rhs|)``; anything below ``-tol`` is a
    violation. Checked per pair:

    * descent-lemma: f(y) <= f(x) + <grad f(x), y - x> + L/2 |y - x|^2
    * optimality-gap: f* - f(x) <= -|grad f(x)|^2 / (2L), at x and at y
    * gradient-lipschitz: |grad f(x) - grad f(y)| <= L |x - y|
    * cocoercivity: <grad f(x) - grad f(y), x - y> >= |grad f(x) - grad f(y)|^2 / L
    * gradient-lower-lipschitz: |grad f(x) - grad f(y)| >= mu |x - y|

    ``f_star`` (the minimum of ``f``) is computed exactly for linear-mse
    objectives when omitted.
    """
    L, mu = constants.L, constants.mu
    if f_star is None:
        f_star = quadratic_minimum(f)[1]
    acc = _Collector(INEQUALITIES, tol)
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        fx, fy = f.value(x), f.value(y)
        gx, gy = f.gradient(x), f.gradient(y)
        dxy = y - x
        dist = float(np.linalg.norm(dxy))
        dg = gx - gy
        dg_norm = float(np.linalg.norm(dg))

        rhs = fx + float(gx @ dxy) + 0.5 * L * dist**2
        acc.add("descent-lemma", _normalized(rhs - fy, fy, rhs), x, y)
        for fz, gz in ((fx, gx), (fy, gy)):
            lhs = f_star - fz
            rhs = -float(gz @ gz) / (2.0 * L)
            acc.add("optimality-gap", _normalized(rhs - lhs, lhs, rhs), x, y)
        acc.add("gradient-lipschitz", _normalized(L * dist - dg_norm, L * dist, dg_norm), x, y)
        inner = float(dg @ (x - y))
        acc.add("cocoercivity", _normalized(inner - dg_norm**2 / L, inner, dg_norm**2 / L), x, y)
        acc.add("gradient-lower-lipschitz", _normalized(dg_norm - mu * dist, dg_norm, mu * dist), x, y)
    worst = {k: (0.0 if v == math.inf else v) for k, v in acc.worst.items()}
    return InequalityReport(worst, len(pairs), acc.violations, tol)


def check_subset_smoothness(
    subset: Sequence[int],
    fed: FederatedDataset,
    spec: LossSpec,
    L: float,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    tol: float = INEQUALITY_TOL,
) -> InequalityReport:
    """Check that ``F_G = (1/N) sum_{i in G} F_i`` is convex and
    ``|G| L / N``-smooth, where ``L`` bounds every device's smoothness.

    Convexity is sampled at the midpoint of each pair.
    """
    F_G = subset_objective(fed, spec, subset)
    L_G = len(set(subset)) * L / fed.n_devices
    acc = _Collector(("subset-gradient-lipschitz", "subset-midpoint-convexity"), tol)
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dg_norm = float(np.linalg.norm(F_G.gradient(x) - F_G.gradient(y)))
        bound = L_G * float(np.linalg.norm(x - y))
        acc.add("subset-gradient-lipschitz", _normalized(bound - dg_norm, bound, dg_norm), x, y)
        mid = F_G.value(0.5 * (x + y))
        avg = 0.5 * (F_G.value(x) + F_G.value(y))
        acc.add("subset-midpoint-convexity", _normalized(avg - mid, avg, mid), x, y)
    worst = {k: (0.0 if v == math.inf else v) for k, v in acc.worst.items()}
    return InequalityReport(worst, len(pairs), acc.violations, tol)


# -- memoryless aggregation distribution ------------------------------------------


@dataclass(frozen=True)
class PmfAtom:
    bits: str
    probability: float
    weights: np.ndarray
    value: np.ndarray | None

    @property
    def all_erased(self) -> bool:
        return self.value is None

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "probability": self.probability,
            "weights": self.weights.tolist(),
            "value": "previous-global" if self.value is None else self.value.tolist(),
            "all_erased": self.all_erased,
        }


@dataclass(frozen=True, eq=False)
class GlobalParamPmf:
    """Distribution of the memoryless global parameter over all 2^N
    reception patterns, in pattern-bit order (``bits[i]`` is device i,
    ``"1"`` = received; index ``m`` has device 0 as the most significant bit).

    The all-erased pattern has no numeric value: the aggregate keeps the
    previous global parameter there.
    """

    local_params: np.ndarray
    sizes: np.ndarray
    probabilities: np.ndarray

    @property
    def n_devices(self) -> int:
        return int(self.local_params.shape[0])

    def __len__(self) -> int:
        return int(self.probabilities.size)

    def total_mass(self) -> float:
        return float(math.fsum(self.probabilities))

    def atom(self, m: int) -> PmfAtom:
        n = self.n_devices
        mask = np.array([(m >> (n - 1 - i)) & 1 for i in range(n)], dtype=bool)
        bits = "".join("1" if b else "0" for b in mask)
        total = float(self.sizes[mask].sum())
        if total == 0.0:
            return PmfAtom(bits, float(self.probabilities[m]), np.zeros(n), None)
        weights = np.where(mask, self.sizes, 0.0) / total
        return PmfAtom(bits, float(self.probabilities[m]), weights, weights @ self.local_params)

    def atoms(self) -> Iterator[PmfAtom]:
        for m in range(len(self)):
            yield self.atom(m)

    def support(self) -> list[PmfAtom]:
        """Atoms with non-zero probability."""
        return [self.atom(int(m)) for m in np.flatnonzero(self.probabilities > 0)]

    def to_dict(self, include_zero: bool = False) -> dict:
        atoms = list(self.atoms()) if include_zero else self.support()
        return {
            "n_devices": self.n_devices,
            "total_mass": self.total_mass(),
            "atoms": [a.to_dict() for a in atoms],
        }


def pattern_probabilities(epsilons: Sequence[float]) -> np.ndarray:
    """``prod_i eps_i^(1 - I_i) (1 - eps_i)^I_i`` for every pattern, by
    repeated outer products (device 0 most significant)."""
    probs = np.ones(1)
    for e in epsilons:
        probs = np.outer(probs, [e, 1.0 - e]).reshape(-1)
    return probs


def memoryless_pmf(
    local_params: Sequence[np.ndarray],
    channels: ErasureChannelSet,
    sizes: Sequence[float] | None = None,
) -> GlobalParamPmf:
    """Enumerate the distribution of the memoryless aggregate of fixed local
    parameters. Sizes default to equal, giving the plain average over the
    received set."""
    params = np.asarray(local_params, dtype=float)
    if params.ndim == 1:
        params = params[:, None]
    n = params.shape[0]
    if n != channels.n_devices:
        raise DimensionError(f"{n} local parameters for {channels.n_devices} channels")
    if n > PMF_MAX_DEVICES:
        raise InvalidConfigError(
            f"refusing to enumerate 2^{n} patterns; at most {PMF_MAX_DEVICES} devices supported"
        )
    sz = np.ones(n) if sizes is None else np.asarray(sizes, dtype=float)
    if sz.shape != (n,):
        raise DimensionError("need one size per device")
    return GlobalParamPmf(params, sz, pattern_probabilities(channels.epsilons))

