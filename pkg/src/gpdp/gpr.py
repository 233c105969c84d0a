"""Exact Gaussian process regression with a squared-exponential kernel.

Outputs are independent GPs that share one kernel and one set of
hyperparameters, so the posterior variance is a single scalar per query
state while the mean has one entry per action dimension. Training states
are standardized column-wise before any kernel evaluation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

DEFAULT_CAP = 2048
LOG_BOUNDS = (np.log(1e-4), np.log(1e4))
BASE_JITTER = 1e-10
MAX_JITTER = 1e-4

SNAPSHOT_MAGIC = b"GPRS"
SNAPSHOT_VERSION = 1


class GprFitError(RuntimeError):
    """Kernel matrix could not be factorized even with maximal jitter."""


@dataclass(frozen=True)
class KernelHyperparams:
    noise: float  # sigma_n, action units
    signal: float  # sigma_p, action units
    lengthscale: float  # ell, standardized state units

    def __post_init__(self):
        for name in ("noise", "signal", "lengthscale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")

    @property
    def log_values(self) -> np.ndarray:
        return np.log([self.noise, self.signal, self.lengthscale])

    @classmethod
    def from_log(cls, theta) -> "KernelHyperparams":
        n, p, l = np.exp(np.asarray(theta, dtype=np.float64))
        return cls(float(n), float(p), float(l))


def se_kernel(s1, s2, hp: KernelHyperparams) -> float:
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise ValueError(f"state dimension mismatch: {s1.shape} vs {s2.shape}")
    d2 = float(np.sum((s1 - s2) ** 2))
    return hp.signal ** 2 * np.exp(-0.5 * d2 / hp.lengthscale ** 2)


def sq_dists(X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    d = (X1 * X1).sum(1)[:, None] + (X2 * X2).sum(1)[None, :] - 2.0 * X1 @ X2.T
    return np.maximum(d, 0.0)


def kernel_matrix(X1, X2, hp: KernelHyperparams) -> np.ndarray:
    return hp.signal ** 2 * np.exp(-0.5 * sq_dists(X1, X2) / hp.lengthscale ** 2)


@dataclass(frozen=True)
class GprPosterior:
    mean: np.ndarray  # (m,) or (batch, m)
    var: np.ndarray  # scalar or (batch,)
    prior_var: float  # k(s*, s*) = sigma_p^2


@dataclass
class GprModel:
    S: np.ndarray  # raw training states (H, d)
    A: np.ndarray  # training actions (H, m)
    hp: KernelHyperparams
    x_mean: np.ndarray
    x_std: np.ndarray
    chol: np.ndarray  # lower factor of K_SS + (sigma_n^2 + jitter) I
    alpha: np.ndarray  # (K_SS + sigma_n^2 I)^-1 A
    jitter: float

    @property
    def H(self) -> int:
        return self.S.shape[0]

    @property
    def d(self) -> int:
        return self.S.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    def normalize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    @property
    def S_norm(self) -> np.ndarray:
        return self.normalize(self.S)

    def min_distance(self, s_star) -> np.ndarray:
        """Distance to the nearest training state, in lengthscale units."""
        q = np.atleast_2d(self.normalize(s_star))
        return np.sqrt(sq_dists(q, self.S_norm).min(axis=1)) / self.hp.lengthscale


def standardization(S) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=np.float64)
    mean = S.mean(axis=0)
    std = S.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def _factorize(K: np.ndarray, signal_var: float) -> tuple[np.ndarray, float]:
    # plain factorization first so well-conditioned fits are exact
    try:
        return cholesky(K, lower=True), 0.0
    except LinAlgError:
        pass
    jitter = BASE_JITTER * signal_var
    eye = np.eye(K.shape[0])
    while True:
        try:
            return cholesky(K + jitter * eye, lower=True), jitter
        except LinAlgError:
            if jitter >= MAX_JITTER * signal_var * (1 - 1e-9):
                raise GprFitError(
                    f"kernel matrix not positive definite with jitter {jitter:.3g}; "
                    f"check for duplicated states or a degenerate lengthscale") from None
            jitter *= 10.0


def _prepare(S, A, cap):
    S = np.asarray(S, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("S must be (H, d)")
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[0] != S.shape[0]:
        raise ValueError(f"S has {S.shape[0]} rows but A has {A.shape[0]}")
    if S.shape[0] < 2:
        raise ValueError("need at least two training points")
    if S.shape[0] > cap:
        raise ValueError(f"{S.shape[0]} training points exceed the cap of {cap}")
    return S, A


def condition(S, A, hp: KernelHyperparams, stats=None, cap: int = DEFAULT_CAP) -> GprModel:
    """Build the posterior cache for fixed hyperparameters (no optimization)."""
    S, A = _prepare(S, A, cap)
    if stats is None:
        x_mean, x_std = np.zeros(S.shape[1]), np.ones(S.shape[1])
    else:
        x_mean, x_std = (np.asarray(v, dtype=np.float64) for v in stats)
    Sn = (S - x_mean) / x_std
    K = kernel_matrix(Sn, Sn, hp)
    K[np.diag_indices_from(K)] += hp.noise ** 2
    L, jitter = _factorize(K, hp.signal ** 2)
    alpha = cho_solve((L, True), A)
    return GprModel(S.copy(), A.copy(), hp, x_mean, x_std, L, alpha, jitter)


def nll(theta, Sn: np.ndarray, A: np.ndarray, with_grad: bool = True):
    """Negative log marginal likelihood summed over the columns of A.

    ``theta`` holds log(sigma_n), log(sigma_p), log(ell). Returns the value
    and, optionally, its gradient with respect to ``theta``.
    """
    hp = KernelHyperparams.from_log(theta)
    H, m = A.shape
    D = sq_dists(Sn, Sn)
    Kf = hp.signal ** 2 * np.exp(-0.5 * D / hp.lengthscale ** 2)
    K = Kf.copy()
    K[np.diag_indices_from(K)] += hp.noise ** 2
    L, _ = _factorize(K, hp.signal ** 2)
    alpha = cho_solve((L, True), A)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    value = 0.5 * np.sum(A * alpha) + 0.5 * m * logdet + 0.5 * m * H * np.log(2 * np.pi)
    if not with_grad:
        return value
    Kinv = cho_solve((L, True), np.eye(H))
    W = m * Kinv - alpha @ alpha.T
    grad = np.array([
        0.5 * np.trace(W) * 2.0 * hp.noise ** 2,
        0.5 * np.sum(W * Kf) * 2.0,
        0.5 * np.sum(W * Kf * D) / hp.lengthscale ** 2,
    ])
    return value, grad


def model_nll(model: GprModel) -> float:
    return nll(model.hp.log_values, model.S_norm, model.A, with_grad=False)


def _descend(theta0, Sn, A, iters, lr, bounds=LOG_BOUNDS):
    """Adam-scaled gradient descent on log-hyperparameters; keeps the best iterate."""
    lo, hi = bounds
    theta = np.clip(np.asarray(theta0, dtype=np.float64), lo, hi)
    m1 = np.zeros(3)
    m2 = np.zeros(3)
    best_theta, best_val = theta.copy(), np.inf
    for t in range(1, iters + 1):
        try:
            val, g = nll(theta, Sn, A)
        except GprFitError:
            break
        if val < best_val:
            best_val, best_theta = val, theta.copy()
        m1 = 0.9 * m1 + 0.1 * g
        m2 = 0.999 * m2 + 0.001 * g * g
        step = lr * (m1 / (1 - 0.9 ** t)) / (np.sqrt(m2 / (1 - 0.999 ** t)) + 1e-8)
        theta = np.clip(theta - step, lo, hi)
    try:
        val = nll(theta, Sn, A, with_grad=False)
        if val < best_val:
            best_val, best_theta = val, theta.copy()
    except GprFitError:
        pass
    return best_theta, best_val


def fit(S, A, init: KernelHyperparams | None = None, restarts: int = 4, *,
        seed: int = 0, iters: int = 200, lr: float = 0.05, normalize: bool = True,
        stats=None, cap: int = DEFAULT_CAP, bounds=LOG_BOUNDS, return_trace: bool = False):
    """Fit hyperparameters by minimizing the negative log marginal likelihood.

    The first start point is ``init``; the remaining ``restarts - 1`` are
    log-normal perturbations of it drawn from ``seed``. ``stats`` overrides the
    (mean, std) used to standardize states; by default they come from ``S``.
    ``bounds`` clips every log-hyperparameter during the search.
    """
    if not bounds[0] < bounds[1]:
        raise ValueError(f"empty log-hyperparameter bounds {bounds}")
    S, A = _prepare(S, A, cap)
    if init is None:
        init = KernelHyperparams(0.1, float(max(A.std(), 1e-3)), 1.0)
    if stats is None:
        stats = standardization(S) if normalize else (np.zeros(S.shape[1]), np.ones(S.shape[1]))
    x_mean, x_std = (np.asarray(v, dtype=np.float64) for v in stats)
    Sn = (S - x_mean) / x_std

    rng = np.random.default_rng(seed)
    starts = [init.log_values]
    for _ in range(max(restarts, 1) - 1):
        starts.append(init.log_values + rng.normal(0.0, 1.0, size=3))

    trace = []
    best_theta, best_val = None, np.inf
    for th0 in starts:
        th0 = np.clip(th0, *bounds)
        try:
            start_val = nll(th0, Sn, A, with_grad=False)
        except GprFitError:
            start_val = np.inf
        theta, val = _descend(th0, Sn, A, iters, lr, bounds)
        trace.append((th0, start_val, theta, val))
        if val < best_val:
            best_theta, best_val = theta, val
    if best_theta is None:
        raise GprFitError("no restart produced a factorizable kernel matrix")
    model = condition(S, A, KernelHyperparams.from_log(best_theta), (x_mean, x_std), cap)
    return (model, trace) if return_trace else model


def posterior(model: GprModel, s_star) -> GprPosterior:
    """Predictive mean and (latent) variance at one state or a batch of states."""
    q = np.asarray(s_star, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != model.d:
        raise ValueError(f"query has dimension {q.shape[1]}, model expects {model.d}")
    qn = model.normalize(q)
    Ks = kernel_matrix(qn, model.S_norm, model.hp)  # (B, H)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    prior = model.hp.signal ** 2
    var = prior - np.sum(v * v, axis=0)
    if np.any(var < -1e-12 * max(prior, 1.0)):
        raise FloatingPointError(f"negative posterior variance {var.min():.3g}")
    var = np.maximum(var, 0.0)
    if single:
        return GprPosterior(mean[0], float(var[0]), prior)
    return GprPosterior(mean, var, prior)


def save_snapshot(model: GprModel, path) -> None:
    header = {
        "d": model.d, "m": model.m, "H": model.H,
        "omega": {"noise": model.hp.noise, "signal": model.hp.signal,
                  "lengthscale": model.hp.lengthscale},
        "x_mean": model.x_mean.tolist(), "x_std": model.x_std.tolist(),
        "jitter": model.jitter,
    }
    raw = json.dumps(header).encode()
    chunks = [SNAPSHOT_MAGIC, struct.pack("<II", SNAPSHOT_VERSION, len(raw)), raw]
    for arr in (model.S, model.A, model.chol, model.alpha):
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_snapshot(path) -> GprModel:
    data = Path(path).read_bytes()
    if data[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a GPR snapshot")
    version, n = struct.unpack_from("<II", data, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    header = json.loads(data[12:12 + n])
    off = 12 + n
    H, d, m = header["H"], header["d"], header["m"]
    arrays = []
    for shape in ((H, d), (H, m), (H, H), (H, m)):
        count = shape[0] * shape[1]
        arrays.append(np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64))
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in snapshot")
    om = header["omega"]
    hp = KernelHyperparams(om["noise"], om["signal"], om["lengthscale"])
    S, A, L, alpha = arrays
    return GprModel(S, A, hp, np.array(header["x_mean"], dtype=np.float64),
                    np.array(header["x_std"], dtype=np.float64), L, alpha, header["jitter"])
