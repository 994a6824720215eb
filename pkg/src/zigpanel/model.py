"""Zero-inflated Gamma model with wallet fixed effects and spline time terms.

For wallet ``i`` on day ``t``::

    log mu[i, t]   = alpha_i + f(t) + zeta . X_t
    logit pi[i, t] = gamma_i + g(t) + kappa . X_t

``Y = 0`` with probability ``pi`` and otherwise ``Y ~ Gamma(shape=k,
scale=mu/k)`` so that ``E[Y | Y > 0] = mu``. Variants ``A`` and ``B`` use a
single global intercept per part, ``A`` drops the covariates.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from . import kernels
from .basis import SplineBasis, day_grid

STREAMS = ("eth_sale", "eth_purchase", "stable_sale", "stable_purchase")
STREAM_LABELS = {
    "eth_sale": "Ethereum Sale",
    "eth_purchase": "Ethereum Purchase",
    "stable_sale": "Stablecoin Sale",
    "stable_purchase": "Stablecoin Purchase",
}
VARIANTS = ("A", "B", "Full")
DUST = 1e-300


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    stream: str
    basis: SplineBasis

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}; expected one of {STREAMS}")

    @property
    def use_covariates(self):
        return self.variant != "A"

    @property
    def per_wallet(self):
        return self.variant == "Full"

    def to_dict(self):
        return {"variant": self.variant, "stream": self.stream, "basis": self.basis.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["variant"], d["stream"], SplineBasis.from_dict(d["basis"]))


@dataclass
class ParameterSet:
    """Model parameters. ``alpha``/``gamma`` have length 1 for variants A and B."""

    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    zeta: np.ndarray
    kappa: np.ndarray
    log_k: float

    def __post_init__(self):
        for name in ("alpha", "gamma", "beta", "delta", "zeta", "kappa"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        self.log_k = float(self.log_k)

    @property
    def k(self):
        return math.exp(self.log_k)

    def to_vector(self):
        return np.concatenate([self.alpha, self.gamma, self.beta, self.delta,
                               self.zeta, self.kappa, [self.log_k]])

    @classmethod
    def from_vector(cls, vec, layout):
        vec = np.asarray(vec, dtype=float)
        parts = {name: vec[sl].copy() for name, sl in layout.slices.items()}
        return cls(log_k=float(vec[-1]), **{k: v for k, v in parts.items() if k != "log_k"})

    @classmethod
    def zeros(cls, spec, m, p):
        layout = Layout(spec, m, p)
        return cls.from_vector(np.zeros(layout.size), layout)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))

    def to_dict(self):
        return {
            "alpha": self.alpha.tolist(),
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "delta": self.delta.tolist(),
            "zeta": self.zeta.tolist(),
            "kappa": self.kappa.tolist(),
            "log_k": self.log_k,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["alpha"], d["gamma"], d["beta"], d["delta"], d["zeta"], d["kappa"], d["log_k"])


class Layout:
    """Positions of each parameter block inside the flat parameter vector."""

    def __init__(self, spec, m, p):
        self.m = m
        self.n_int = m if spec.per_wallet else 1
        self.K = spec.basis.df
        self.p = p if spec.use_covariates else 0
        sizes = [("alpha", self.n_int), ("gamma", self.n_int), ("beta", self.K),
                 ("delta", self.K), ("zeta", self.p), ("kappa", self.p), ("log_k", 1)]
        self.slices = {}
        pos = 0
        for name, size in sizes:
            self.slices[name] = slice(pos, pos + size)
            pos += size
        self.size = pos

    def names(self, covariate_names=None):
        cov = list(covariate_names or [f"x{j + 1}" for j in range(self.p)])[: self.p]
        if self.n_int == 1:
            alpha, gamma = ["mean:(Intercept)"], ["zero:(Intercept)"]
        else:
            alpha = [f"mean:alpha[{i}]" for i in range(self.n_int)]
            gamma = [f"zero:gamma[{i}]" for i in range(self.n_int)]
        return (alpha + gamma
                + [f"mean:spline{j + 1}" for j in range(self.K)]
                + [f"zero:spline{j + 1}" for j in range(self.K)]
                + [f"mean:{c}" for c in cov] + [f"zero:{c}" for c in cov] + ["log_k"])

    def shared_index(self):
        """Indices of the parameters shared by all wallets (everything but per-wallet intercepts)."""
        idx = np.arange(self.size)
        if self.n_int == 1:
            return idx
        wallet = np.r_[self.slices["alpha"].start:self.slices["gamma"].stop]
        return np.setdiff1d(idx, wallet)

    def wallet_index(self):
        if self.n_int == 1:
            return np.array([], dtype=int)
        return np.r_[self.slices["alpha"].start:self.slices["gamma"].stop]


def n_params(spec, m=1, p=2):
    """Free-parameter count: ``A = 2 + 2K + 1``, ``B = A + 2p``, ``Full = B - 2 + 2m``."""
    K = spec.basis.df if isinstance(spec, ModelSpec) else int(spec)
    variant = spec.variant if isinstance(spec, ModelSpec) else "A"
    count = 2 + 2 * K + 1
    if variant in ("B", "Full"):
        count += 2 * p
    if variant == "Full":
        count += 2 * m - 2
    return count


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def expit(x):
    """Logistic function without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


class Problem:
    """A model spec bound to one response matrix and its covariates.

    Caches the basis design on the daily grid so that the likelihood and its
    derivatives can be evaluated from a flat parameter vector.
    """

    def __init__(self, spec, y, covariates=None, ridge=0.0, kernel=None):
        y = np.ascontiguousarray(y, dtype=float)
        if y.ndim != 2:
            raise ValueError("response must be an m x n matrix")
        bad = ~np.isfinite(y) | (y < 0)
        if bad.any():
            i, t = np.argwhere(bad)[0]
            raise ValueError(f"response must be finite and nonnegative; bad value {y[i, t]!r} at (i={i}, t={t + 1})")
        self.spec = spec
        self.m, self.n = y.shape
        # dust values are structural zeros
        self.y = np.where(y < DUST, 0.0, y)
        self.B = spec.basis.evaluate(day_grid(self.n))
        if spec.use_covariates:
            if covariates is None:
                raise ValueError(f"variant {spec.variant} needs covariates")
            X = np.asarray(covariates, dtype=float).reshape(self.n, -1)
        else:
            X = np.zeros((self.n, 0))
        self.X = X
        self.layout = Layout(spec, self.m, X.shape[1])
        self.ridge = float(ridge) if spec.per_wallet else 0.0
        self.kernel = kernel or kernels
        self.pos = self.y >= DUST
        self.n_pos = int(self.pos.sum())
        self.T = np.hstack([self.B, self.X])

    @property
    def n_obs(self):
        return self.m * self.n

    def unpack(self, theta):
        L = self.layout.slices
        return (theta[L["alpha"]], theta[L["gamma"]], theta[L["beta"]], theta[L["delta"]],
                theta[L["zeta"]], theta[L["kappa"]], float(theta[-1]))

    def predictors(self, theta):
        """Per-wallet and per-day parts of both linear predictors."""
        alpha, gamma, beta, delta, zeta, kappa, _ = self.unpack(theta)
        a_mu = np.ascontiguousarray(np.broadcast_to(alpha, (self.m,)), dtype=float)
        a_pi = np.ascontiguousarray(np.broadcast_to(gamma, (self.m,)), dtype=float)
        f_mu = np.ascontiguousarray(self.B @ beta + self.X @ zeta)
        g_pi = np.ascontiguousarray(self.B @ delta + self.X @ kappa)
        for name, v in (("mean", a_mu), ("zero", a_pi)):
            if not np.all(np.isfinite(v)):
                i = int(np.argmin(np.isfinite(v)))
                raise FloatingPointError(f"non-finite {name} predictor at wallet i={i}")
        for name, v in (("mean", f_mu), ("zero", g_pi)):
            if not np.all(np.isfinite(v)):
                t = int(np.argmin(np.isfinite(v)))
                raise FloatingPointError(f"non-finite {name} predictor at day t={t + 1}")
        return a_mu, f_mu, a_pi, g_pi

    def _kernel_call(self, theta, want_grad):
        a_mu, f_mu, a_pi, g_pi = self.predictors(theta)
        log_k = float(theta[-1])
        k = math.exp(log_k)
        if not (np.isfinite(k) and k > 0):
            raise FloatingPointError(f"Gamma shape out of range: log_k={log_k}")
        log_norm = k * log_k - float(gammaln(k))
        dk_const = log_k + 1.0 - float(digamma(k))
        bufs = [np.empty(self.m), np.empty(self.n), np.empty(self.m), np.empty(self.n)]
        ll, dk = self.kernel.loglik_grad(self.y, a_mu, f_mu, a_pi, g_pi, k, log_norm, dk_const,
                                         *bufs, want_grad)
        return ll, dk, bufs, k

    def loglik(self, theta):
        return self._kernel_call(np.asarray(theta, dtype=float), False)[0]

    def loglik_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        ll, dk, (row_mu, col_mu, row_pi, col_pi), k = self._kernel_call(theta, True)
        L = self.layout.slices
        g = np.empty(self.layout.size)
        if self.layout.n_int == 1:
            g[L["alpha"]] = k * row_mu.sum()
            g[L["gamma"]] = row_pi.sum()
        else:
            g[L["alpha"]] = k * row_mu
            g[L["gamma"]] = row_pi
        g[L["beta"]] = k * (self.B.T @ col_mu)
        g[L["delta"]] = self.B.T @ col_pi
        g[L["zeta"]] = k * (self.X.T @ col_mu)
        g[L["kappa"]] = self.X.T @ col_pi
        g[-1] = k * dk
        return ll, g

    def penalty(self, theta):
        if not self.ridge:
            return 0.0
        w = self.layout.wallet_index()
        return self.ridge * float(theta[w] @ theta[w])

    def objective(self, theta):
        """Penalized negative log-likelihood and its gradient (optimizer target)."""
        ll, g = self.loglik_and_grad(theta)
        f = -ll
        g = -g
        if self.ridge:
            w = self.layout.wallet_index()
            f += self.ridge * float(theta[w] @ theta[w])
            g[w] += 2.0 * self.ridge * theta[w]
        return f, g

    def hessian(self, theta):
        """Analytic Hessian of the penalized negative log-likelihood."""
        theta = np.asarray(theta, dtype=float)
        a_mu, f_mu, a_pi, g_pi = self.predictors(theta)
        k = math.exp(float(theta[-1]))
        ratio = np.empty((self.m, self.n))
        pq = np.empty((self.m, self.n))
        self.kernel.cell_weights(self.y, a_mu, f_mu, a_pi, g_pi, ratio, pq)
        resid = np.where(self.pos, ratio - 1.0, 0.0)
        W = k * ratio
        L = self.layout.slices
        T = self.T
        H = np.zeros((self.layout.size, self.layout.size))
        # mean block indices: intercepts then [beta, zeta]
        mean_shared = np.r_[L["beta"], L["zeta"]]
        zero_shared = np.r_[L["delta"], L["kappa"]]
        ia, ig = np.r_[L["alpha"]], np.r_[L["gamma"]]
        for Wm, ii, shared in ((W, ia, mean_shared), (pq, ig, zero_shared)):
            col = Wm.sum(axis=0)
            if self.layout.n_int == 1:
                H[ii[0], ii[0]] = Wm.sum()
                cross = col @ T
                H[ii[0], shared] = cross
                H[shared, ii[0]] = cross
            else:
                H[ii, ii] = Wm.sum(axis=1)
                cross = Wm @ T
                H[np.ix_(ii, shared)] = cross
                H[np.ix_(shared, ii)] = cross.T
            H[np.ix_(shared, shared)] = T.T @ (col[:, None] * T)
        # Gamma shape: d2/dlogk2 of -ll and cross terms with the mean block
        _, g = self.loglik_and_grad(theta)
        kr_row = k * resid.sum(axis=1)
        kr_col = k * resid.sum(axis=0)
        cross = (np.array([kr_row.sum()]) if self.layout.n_int == 1 else kr_row)
        H[ia, -1] = -cross
        H[-1, ia] = -cross
        ts = -(T.T @ kr_col)
        H[mean_shared, -1] = ts
        H[-1, mean_shared] = ts
        H[-1, -1] = -(g[-1] + self.n_pos * (k - k * k * float(polygamma(1, k))))
        if self.ridge:
            w = self.layout.wallet_index()
            H[w, w] += 2.0 * self.ridge
        return 0.5 * (H + H.T)


def linear_predictors(spec, phi, panel):
    """Fitted ``mu`` and ``pi`` matrices (m x n) for one stream of ``panel``."""
    prob = Problem(spec, panel.streams[spec.stream], panel.covariates)
    a_mu, f_mu, a_pi, g_pi = prob.predictors(phi.to_vector())
    eta_mu = a_mu[:, None] + f_mu[None, :]
    eta_pi = a_pi[:, None] + g_pi[None, :]
    with np.errstate(over="raise"):
        try:
            mu = np.exp(eta_mu)
        except FloatingPointError:
            i, t = np.unravel_index(np.argmax(eta_mu), eta_mu.shape)
            raise FloatingPointError(f"mean predictor overflows at (i={i}, t={t + 1})") from None
    return mu, expit(eta_pi)


def loglik(spec, phi, panel):
    return Problem(spec, panel.streams[spec.stream], panel.covariates).loglik(phi.to_vector())


def loglik_grad(spec, phi, panel):
    return Problem(spec, panel.streams[spec.stream], panel.covariates).loglik_and_grad(phi.to_vector())[1]


def cell_loglik(y, mu, pi, k):
    """Log-likelihood of a single cell from ``mu``, ``pi`` and shape ``k``."""
    if y < DUST:
        return math.log(pi)
    return (math.log1p(-pi) + k * math.log(k / mu) - math.lgamma(k)
            + (k - 1.0) * math.log(y) - k * y / mu)
