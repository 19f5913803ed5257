"""Monomial observable dictionaries, EDMD fitting and lifted prediction."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla


class KoopmanError(ValueError):
    """Fit or prediction failure."""


@dataclass(frozen=True)
class Dictionary:
    """Ordered monomial observables over the state coordinates.

    Observable ``i`` is ``prod_j (x_j / scales[j]) ** exponents[i][j]``. With the
    default unit scales this is the plain monomial; power-of-two scales keep
    mixed-unit regressors well conditioned without changing the span.
    """

    exponents: tuple
    scales: tuple = None

    def __post_init__(self):
        exps = tuple(tuple(int(e) for e in row) for row in self.exponents)
        if not exps:
            raise KoopmanError("dictionary needs at least one observable")
        n = len(exps[0])
        if any(len(row) != n for row in exps) or any(e < 0 for row in exps for e in row):
            raise KoopmanError("exponent tuples must be non-negative and of equal length")
        if len(set(exps)) != len(exps):
            raise KoopmanError("duplicate observables in dictionary")
        for j in range(n):
            unit = tuple(1 if i == j else 0 for i in range(n))
            if unit not in exps:
                raise KoopmanError(f"identity observable for coordinate {j} missing")
        scales = (1.0,) * n if self.scales is None else tuple(float(s) for s in self.scales)
        if len(scales) != n or any(not s > 0 for s in scales):
            raise KoopmanError("scales must be positive, one per coordinate")
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "scales", scales)
        # factor index lists for the scalar fast path
        factors = tuple(tuple(j for j in range(n) for _ in range(row[j])) for row in exps)
        object.__setattr__(self, "_factors", factors)
        object.__setattr__(self, "_lift_code", _compile_lift(factors, scales))

    def __reduce__(self):
        return (type(self), (self.exponents, self.scales))

    @classmethod
    def polynomial(cls, n_state: int, degree: int = 2, constant: bool = True,
                   scales: Sequence[float] = None) -> "Dictionary":
        """All monomials of total degree ``<= degree``, graded then lexicographic."""
        exps = []
        start = 0 if constant else 1
        for total in range(start, degree + 1):
            block = [e for e in itertools.product(range(total + 1), repeat=n_state) if sum(e) == total]
            exps.extend(sorted(block, reverse=True))
        return cls(tuple(exps), scales)

    @classmethod
    def identity(cls, n_state: int) -> "Dictionary":
        return cls.polynomial(n_state, degree=1, constant=False)

    @property
    def n_state(self) -> int:
        return len(self.exponents[0])

    @property
    def dimension(self) -> int:
        return len(self.exponents)

    @property
    def identity_index(self) -> tuple:
        n = self.n_state
        return tuple(self.exponents.index(tuple(1 if i == j else 0 for i in range(n)))
                     for j in range(n))

    def lift(self, x) -> np.ndarray:
        return lift(x, self)

    def lift_many(self, X) -> np.ndarray:
        """Lift each row of ``X`` (samples x n_state)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_state:
            raise KoopmanError(f"state dimension {X.shape[1]} != dictionary {self.n_state}")
        Z = X / np.asarray(self.scales)
        out = np.ones((X.shape[0], self.dimension))
        for i, factors in enumerate(self._factors):
            for j in factors:
                out[:, i] *= Z[:, j]
        return out

    def lift_fast(self, x) -> list:
        """Scalar-arithmetic lift for the per-tick render loop.

        Same operations in the same order as :meth:`lift_many`, unrolled into
        one generated expression.
        """
        return self._lift_code(x)

    def project(self, phi) -> np.ndarray:
        """Recover state coordinates from a lifted vector."""
        phi = np.asarray(phi, dtype=float)
        idx = list(self.identity_index)
        return phi[..., idx] * np.asarray(self.scales)


def _compile_lift(factors, scales):
    n = len(scales)
    lines = ["def lift(x):"]
    lines += [f"    z{j} = x[{j}] / {scales[j]!r}" for j in range(n)]
    terms = ["1.0" if not f else " * ".join(f"z{j}" for j in f) for f in factors]
    lines.append("    return [" + ", ".join(terms) + "]")
    namespace = {}
    exec("\n".join(lines), namespace)
    return namespace["lift"]


def lift(x, dictionary: Dictionary) -> np.ndarray:
    """Evaluate every observable of ``dictionary`` at state ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (dictionary.n_state,):
        raise KoopmanError(f"state of shape {x.shape} does not match dictionary")
    return dictionary.lift_many(x[None, :])[0]


@dataclass(frozen=True)
class KoopmanModel:
    """Discrete-time lifted linear model ``phi_{k+1} = K phi_k + B u_k``."""

    K: np.ndarray
    B: np.ndarray
    dictionary: Dictionary
    ridge_lambda: float
    fit_residual: float
    dt: float

    def __post_init__(self):
        N = self.dictionary.dimension
        K = np.array(self.K, dtype=float)
        B = np.array(self.B, dtype=float).reshape(N, -1)
        if K.shape != (N, N):
            raise KoopmanError(f"K has shape {K.shape}, expected {(N, N)}")
        if not self.fit_residual >= 0:
            raise KoopmanError("fit_residual must be non-negative")
        K.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "B", B)

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    def one_step(self, phi, u) -> np.ndarray:
        return self.K @ np.asarray(phi, dtype=float) + self.B @ np.atleast_1d(np.asarray(u, dtype=float))

    def continuous_operator(self) -> np.ndarray:
        """Generator estimate ``log(K)/dt``; raises when no real logarithm exists."""
        ev = np.linalg.eigvals(self.K)
        if np.any((np.abs(ev.imag) < 1e-12) & (ev.real <= 0)):
            raise KoopmanError("K has non-positive real eigenvalues; log(K) is not real")
        L = sla.logm(self.K)
        return np.real(L) / self.dt

    def horizon_operators(self, h: int):
        """``(K^h, sum_{j<h} K^j B)`` for held-input prediction ``h`` steps ahead."""
        N = self.K.shape[0]
        Kh = np.eye(N)
        G = np.zeros_like(self.B)
        for _ in range(h):
            G = self.K @ G + self.B
            Kh = self.K @ Kh
        return Kh, G


def _snapshot_pairs(trajectories, dictionary):
    if not trajectories:
        raise KoopmanError("no trajectories supplied")
    dts = [tr.dt for tr in trajectories]
    if max(dts) - min(dts) > 1e-12 * max(dts):
        raise KoopmanError("trajectories must share dt")
    X, Y, U = [], [], []
    for tr in trajectories:
        phi = dictionary.lift_many(tr.states)
        X.append(phi[:-1])
        Y.append(phi[1:])
        U.append(np.asarray(tr.inputs, dtype=float).reshape(len(tr), -1)[:-1])
    return np.vstack(X), np.vstack(Y), np.vstack(U), float(np.mean(dts))


def fit_edmd(trajectories, dictionary: Dictionary, ridge_lambda: float = None) -> KoopmanModel:
    """Ridge-regularized EDMD.

    Minimizes ``sum ||phi(x_{k+1}) - K phi(x_k) - B u_k||^2 + lam ||[K B]||_F^2``.

    Parameters
    ----------
    trajectories : list of Trajectory
        Snapshot sources sharing one sample period.
    dictionary : Dictionary
    ridge_lambda : float, optional
        Regularization weight. ``None`` selects ``1e-8 * trace(G) / dim(G)`` with
        ``G`` the regressor Gram matrix; ``0`` gives plain least squares.
    """
    X, Y, U, dt = _snapshot_pairs(trajectories, dictionary)
    Z = np.hstack([X, U])
    p = Z.shape[1]
    if Z.shape[0] < p:
        raise KoopmanError(f"need at least {p} snapshot pairs, got {Z.shape[0]}")
    G = Z.T @ Z
    if ridge_lambda is None:
        ridge_lambda = 1e-8 * float(np.trace(G)) / p
    if ridge_lambda < 0:
        raise KoopmanError("ridge_lambda must be non-negative")
    rhs = Z.T @ Y
    W = None
    if ridge_lambda > 0:
        W = sla.cho_solve(sla.cho_factor(G + ridge_lambda * np.eye(p)), rhs)
    else:
        s = np.linalg.svd(Z, compute_uv=False)
        if s[-1] <= s[0] * max(Z.shape) * np.finfo(float).eps:
            raise KoopmanError("rank-deficient regressors with ridge_lambda = 0; increase data or lambda")
        cond = s[0] / s[-1]
        if cond < 1e6:
            try:
                W = sla.cho_solve(sla.cho_factor(G), rhs)
            except np.linalg.LinAlgError:
                W = None
        if W is None:
            W = np.linalg.lstsq(Z, Y, rcond=None)[0]
    N = dictionary.dimension
    resid = Y - Z @ W
    return KoopmanModel(K=W[:N].T, B=W[N:].T, dictionary=dictionary,
                        ridge_lambda=float(ridge_lambda),
                        fit_residual=float(np.linalg.norm(resid)), dt=dt)


def predict_lifted(model: KoopmanModel, phi0, inputs, horizon_steps: int) -> np.ndarray:
    """Roll the lifted model forward.

    Returns an array of shape ``(horizon_steps + 1, N)`` whose row ``n`` is
    ``K^n phi0 + sum_{j<n} K^{n-1-j} B u_j``.
    """
    if horizon_steps < 0:
        raise KoopmanError("horizon_steps must be non-negative")
    phi = np.asarray(phi0, dtype=float)
    N = model.K.shape[0]
    if phi.shape != (N,):
        raise KoopmanError(f"phi0 has shape {phi.shape}, expected {(N,)}")
    m = model.n_inputs
    if inputs is None:
        U = np.zeros((horizon_steps, m))
    else:
        U = np.asarray(inputs, dtype=float).reshape(-1, m)
        if len(U) < horizon_steps:
            raise KoopmanError(f"need {horizon_steps} inputs, got {len(U)}")
    out = np.empty((horizon_steps + 1, N))
    out[0] = phi
    for n in range(horizon_steps):
        phi = model.K @ phi + model.B @ U[n]
        out[n + 1] = phi
    return out


def save_model(model: KoopmanModel, path) -> None:
    """Flat text: header lines then row-major matrices at 17 significant digits."""
    d = model.dictionary
    lines = ["koopman-model 1",
             f"dims {d.n_state} {d.dimension} {model.n_inputs}",
             f"dt {model.dt:.17g}",
             f"ridge_lambda {model.ridge_lambda:.17g}",
             f"fit_residual {model.fit_residual:.17g}",
             "scales " + " ".join(f"{s:.17g}" for s in d.scales),
             "exponents"]
    lines += [" ".join(str(e) for e in row) for row in d.exponents]
    lines.append("K")
    lines += [" ".join(f"{v:.17g}" for v in row) for row in model.K]
    lines.append("B")
    lines += [" ".join(f"{v:.17g}" for v in row) for row in model.B]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> KoopmanModel:
    rows = Path(path).read_text().split("\n")
    it = iter(rows)
    if next(it).split()[0] != "koopman-model":
        raise KoopmanError("not a koopman model file")
    n, N, m = (int(v) for v in next(it).split()[1:])
    dt = float(next(it).split()[1])
    lam = float(next(it).split()[1])
    res = float(next(it).split()[1])
    scales = tuple(float(v) for v in next(it).split()[1:])
    next(it)
    exps = tuple(tuple(int(v) for v in next(it).split()) for _ in range(N))
    next(it)
    K = np.array([[float(v) for v in next(it).split()] for _ in range(N)])
    next(it)
    B = np.array([[float(v) for v in next(it).split()] for _ in range(N)]).reshape(N, m)
    return KoopmanModel(K, B, Dictionary(exps, scales), lam, res, dt)


@dataclass(frozen=True)
class OrderResult:
    """Outcome of a step-halving study of one-step prediction error."""

    dts: tuple
    errors: tuple
    ratio: float
    cumulative: float
    regime: str

    @property
    def ratios(self) -> tuple:
        return tuple(a / b for a, b in zip(self.errors[:-1], self.errors[1:]))


def _perturbed(rng, x_op, scales, amplitude):
    return tuple(float(c) for c in np.asarray(x_op) + amplitude * scales * rng.uniform(-1.0, 1.0, 3))


def verify_error_order(plant, dt: float, model_factory: Callable = None, *, halvings: int = 1,
                       operating_force: float = 0.5, amplitude: float = 0.03,
                       state_scales=None, n_train: int = 40, train_steps: int = 60,
                       n_test: int = 300, substeps: int = 100, seed: int = 0,
                       exact_tol: float = 1e-9) -> OrderResult:
    """Step-halving study of the one-step lifted prediction error.

    For each step ``h`` in ``dt, dt/2, ...`` a model is fitted by
    ``model_factory(trajectories)`` on zero-noise trajectories sampled at ``h``
    by the plant's own integrator, excited by inputs and initial states drawn
    within ``amplitude`` (relative) of the equilibrium under
    ``operating_force``. The error ``e(h)`` is the mean over a fixed test set of
    ``||phi(x(t+h)) - K phi(x) - B u||`` where ``x(t+h)`` comes from a
    ``substeps``-times finer integration of the same plant.

    Returns
    -------
    OrderResult
        ``ratio = e(dt)/e(dt/2)``; ``cumulative = e(dt)/e(dt/2**halvings)``.
        ``regime`` is ``"exact"`` when every error is below ``exact_tol``
        times the lifted test-signal scale.
    """
    from .dynamics import Trajectory, simulate_trajectory

    if halvings < 1:
        raise KoopmanError("need at least one halving")
    x_op = np.asarray(plant.operating_state(operating_force), dtype=float)
    if state_scales is None:
        # velocity scale: position scale over a 1/30 s excursion time
        pos = max(abs(x_op[0]), 1e-6)
        state_scales = (pos, 30.0 * pos, max(abs(x_op[2]), 1e-6))
    scales = np.asarray(state_scales, dtype=float)
    if model_factory is None:
        dictionary = Dictionary.polynomial(3, 2, scales=tuple(scales))

        def model_factory(trajs):
            return fit_edmd(trajs, dictionary, ridge_lambda=0.0)

    rng = np.random.default_rng(seed)
    test_x = [_perturbed(rng, x_op, scales, amplitude) for _ in range(n_test)]
    test_u = operating_force * (1.0 + amplitude * rng.uniform(-1.0, 1.0, n_test))
    train_x = [_perturbed(rng, x_op, scales, amplitude) for _ in range(n_train)]
    train_u = operating_force * (1.0 + amplitude * rng.uniform(-1.0, 1.0, (n_train, train_steps + 1)))
    test_x = [plant.constrain(x) for x in test_x]
    train_x = [plant.constrain(x) for x in train_x]

    dts, errors, signal = [], [], 0.0
    for level in range(halvings + 1):
        h = dt / 2 ** level
        trajs = [simulate_trajectory(plant, train_u[i], train_steps * h, h, seed=0, x0=train_x[i])
                 for i in range(n_train)]
        try:
            model = model_factory(trajs)
        except (KoopmanError, np.linalg.LinAlgError) as exc:
            raise KoopmanError(f"fit failed at dt={h:g}: {exc}") from exc
        D = model.dictionary
        errs = []
        for x, u in zip(test_x, test_u):
            ref = simulate_trajectory(plant, float(u), h, h, seed=0, x0=x, substeps=substeps)
            target = D.lift(ref.states[-1])
            errs.append(np.linalg.norm(target - model.one_step(D.lift(x), u)))
            signal = max(signal, float(np.linalg.norm(target)))
        dts.append(h)
        errors.append(float(np.mean(errs)))
    if max(errors) <= exact_tol * max(signal, 1.0):
        regime = "exact"
        ratio = cumulative = float("nan")
    else:
        ratio = errors[0] / errors[1]
        cumulative = errors[0] / errors[-1]
        regime = "second-order" if 3.2 <= ratio <= 4.8 else (
            "first-order" if 1.6 <= ratio <= 2.4 else "mixed")
    return OrderResult(tuple(dts), tuple(errors), ratio, cumulative, regime)
