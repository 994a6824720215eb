"""Panel simulation and parametric-bootstrap simultaneous bands for the spline curves."""
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .basis import day_grid, make_basis
from .fit import FitOptions, fit_problem
from .model import ModelSpec, ParameterSet, Problem, expit


class BootstrapInstabilityError(RuntimeError):
    pass


def _wallet_rng(seed, key, i):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key) + (int(i),))
    return np.random.Generator(np.random.Philox(ss))


def simulate(spec, phi, shape, seed, key=()):
    """Draw one response matrix from the fitted mixture.

    ``shape`` is ``(m, n, X)``. Each wallet row has its own counter-based
    substream derived from ``(seed, *key, i)``, so rows can be generated in
    any order or split across workers with identical results.
    """
    m, n, X = shape
    n_int = m if spec.per_wallet else 1
    if phi.alpha.size != n_int:
        raise ValueError(f"parameter set has {phi.alpha.size} intercepts, variant {spec.variant} needs {n_int}")
    B = spec.basis.evaluate(day_grid(n))
    f = B @ phi.beta
    g = B @ phi.delta
    if spec.use_covariates:
        X = np.asarray(X, dtype=float).reshape(n, -1)
        f = f + X @ phi.zeta
        g = g + X @ phi.kappa
    alpha = np.broadcast_to(phi.alpha, (m,))
    gamma = np.broadcast_to(phi.gamma, (m,))
    k = phi.k
    y = np.empty((m, n))
    for i in range(m):
        rng = _wallet_rng(seed, key, i)
        u = rng.random(n)
        draws = rng.standard_gamma(k, n)
        mu = np.exp(alpha[i] + f)
        pi = expit(gamma[i] + g)
        y[i] = np.where(u < pi, 0.0, draws * (mu / k))
    return y


# -- synthetic ground truth ----------------------------------------------------

@dataclass
class SyntheticTruth:
    spec: ModelSpec
    phi: ParameterSet
    X: np.ndarray
    m: int
    n: int

    @property
    def shape(self):
        return self.m, self.n, self.X

    def f_curve(self):
        return self.spec.basis.curve(self.phi.beta, day_grid(self.n))

    def g_curve(self):
        return self.spec.basis.curve(self.phi.delta, day_grid(self.n))

    def zero_rate(self):
        B = self.spec.basis.evaluate(day_grid(self.n))
        g = B @ self.phi.delta + (self.X @ self.phi.kappa if self.spec.use_covariates else 0.0)
        return float(expit(np.broadcast_to(self.phi.gamma, (self.m,))[:, None] + g[None, :]).mean())


def smooth_covariates(n, p, seed):
    """Standardized random-walk series, a stand-in for daily market covariates."""
    rng = np.random.default_rng(seed)
    walk = np.cumsum(rng.normal(size=(n, p)), axis=0)
    return (walk - walk.mean(axis=0)) / walk.std(axis=0, ddof=1)


def synthetic_truth(m=50, n=200, df=6, p=2, zero_rate=0.9, variant="Full", stream="eth_sale",
                    log_k=math.log(2.0), seed=0, mean_level=3.0, wallet_sd=(0.5, 0.3),
                    zeta=(-0.3, 0.2), kappa=(-0.15, 0.1)):
    """A known parameter set with smooth time effects and a calibrated zero rate."""
    rng = np.random.default_rng(seed)
    basis = make_basis(n, df)
    spec = ModelSpec(variant, stream, basis)
    grid = day_grid(n)
    B = basis.evaluate(grid)
    s = (grid - 1.0) / (n - 1.0)
    f_target = 0.6 * np.sin(2.0 * math.pi * s) + 0.3 * s
    g_target = -0.4 * np.sin(math.pi * s) + 0.2 * np.cos(3.0 * math.pi * s) - 0.2
    beta = np.linalg.lstsq(B, f_target, rcond=None)[0]
    delta = np.linalg.lstsq(B, g_target, rcond=None)[0]
    X = smooth_covariates(n, p, seed + 1) if variant != "A" else np.zeros((n, 0))
    zeta_v = np.asarray(zeta[:p], dtype=float) if variant != "A" else np.zeros(0)
    kappa_v = np.asarray(kappa[:p], dtype=float) if variant != "A" else np.zeros(0)
    n_int = m if variant == "Full" else 1
    a_dev = rng.normal(scale=wallet_sd[0], size=n_int) if n_int > 1 else np.zeros(1)
    g_dev = rng.normal(scale=wallet_sd[1], size=n_int) if n_int > 1 else np.zeros(1)
    g_time = B @ delta + (X @ kappa_v if variant != "A" else 0.0)

    def excess(base):
        return float(expit((base + g_dev)[:, None] + g_time[None, :]).mean()) - zero_rate

    base = brentq(excess, -30.0, 30.0, xtol=1e-12)
    phi = ParameterSet(mean_level + a_dev, base + g_dev, beta, delta, zeta_v, kappa_v, log_k)
    return SyntheticTruth(spec, phi, X, m, n)


# -- bands ---------------------------------------------------------------------

def nearest_rank_quantile(values, q):
    """Smallest value with at least a fraction ``q`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    rank = math.ceil(round(q * v.size, 9))
    return float(v[min(max(rank, 1), v.size) - 1])


@dataclass
class BandResult:
    grid: np.ndarray
    f_hat: np.ndarray
    c_alpha: float
    alpha: float
    B: int
    deviations: np.ndarray
    n_failed: int = 0
    which: str = "f"
    seed: int = 0
    attempts: list = field(default_factory=list)

    @property
    def lower(self):
        return self.f_hat - self.c_alpha

    @property
    def upper(self):
        return self.f_hat + self.c_alpha

    def covers(self, curve):
        return bool(np.all(np.abs(np.asarray(curve) - self.f_hat) <= self.c_alpha))

    def to_dict(self):
        return {
            "which": self.which,
            "alpha": self.alpha,
            "B": self.B,
            "seed": self.seed,
            "c_alpha": self.c_alpha,
            "n_failed": self.n_failed,
            "grid": self.grid.tolist(),
            "f_hat": self.f_hat.tolist(),
            "deviations": self.deviations.tolist(),
            "attempts": list(self.attempts),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["grid"], dtype=float), np.asarray(d["f_hat"], dtype=float),
                   float(d["c_alpha"]), float(d["alpha"]), int(d["B"]),
                   np.asarray(d["deviations"], dtype=float), int(d.get("n_failed", 0)),
                   d.get("which", "f"), int(d.get("seed", 0)), list(d.get("attempts", [])))

    def rows(self):
        """``(t, fit, lo, hi)`` rows for plotting."""
        return [(float(t), float(f), float(f - self.c_alpha), float(f + self.c_alpha))
                for t, f in zip(self.grid, self.f_hat)]


_CTX = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _replicate(attempt):
    ctx = _CTX
    spec, theta_hat, layout_phi = ctx["spec"], ctx["theta_hat"], ctx["phi_hat"]
    m, n, X = ctx["m"], ctx["n"], ctx["X"]
    y = simulate(spec, layout_phi, (m, n, X), ctx["seed"], key=(attempt,))
    if not np.any(y > 0):
        return attempt, math.nan, False
    prob = Problem(spec, y, X, ridge=ctx["opts"].ridge)
    try:
        theta, _, _, gnorm, _, _ = fit_problem(prob, ctx["opts"], theta_hat, ctx["fixed"])
    except (FloatingPointError, ValueError, np.linalg.LinAlgError):
        return attempt, math.nan, False
    if not gnorm <= ctx["opts"].gtol:
        return attempt, math.nan, False
    coef = theta[prob.layout.slices["beta" if ctx["which"] == "f" else "delta"]]
    curve = prob.B @ coef
    return attempt, float(np.max(np.abs(curve - ctx["f_hat"]))), True


def _run(attempts, workers, ctx):
    if workers <= 1 or len(attempts) <= 1:
        _init_worker(ctx)
        return [_replicate(a) for a in attempts]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(_replicate, attempts, chunksize=max(1, len(attempts) // (4 * workers))))


def simultaneous_band(spec, fit, panel, which="f", B=1000, alpha=0.05, seed=0, workers=1,
                      freeze_intercepts=False, opts=None):
    """Sup-deviation parametric-bootstrap band ``curve_hat(t) +/- c_alpha`` on the daily grid.

    Each replicate simulates from the fitted parameters, refits warm-started
    at them and records ``max_t |curve*_b(t) - curve_hat(t)|``. Replicates
    whose refit does not converge are replaced by fresh attempts, up to
    ``2B`` attempts in total.
    """
    if which not in ("f", "g"):
        raise ValueError("which must be 'f' (mean curve) or 'g' (zero curve)")
    if B < 100:
        raise ValueError("B must be at least 100")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if not fit.converged:
        raise ValueError("bootstrap needs a converged fit")
    opts = FitOptions(**{**(opts or FitOptions()).to_dict(), "compute_se": False})
    X = panel.covariates if spec.use_covariates else None
    m, n = panel.m, panel.n_days
    probe = Problem(spec, panel.streams[spec.stream], X, ridge=opts.ridge)
    theta_hat = fit.phi_hat.to_vector()
    coef = fit.phi_hat.beta if which == "f" else fit.phi_hat.delta
    f_hat = probe.B @ coef
    fixed = probe.layout.wallet_index() if freeze_intercepts and spec.per_wallet else None
    ctx = {"spec": spec, "theta_hat": theta_hat, "phi_hat": fit.phi_hat, "m": m, "n": n,
           "X": X if X is not None else np.zeros((n, 0)), "seed": seed, "opts": opts,
           "fixed": fixed, "which": which, "f_hat": f_hat}
    results = []
    next_attempt = 0
    while True:
        need = B - sum(ok for _, _, ok in results)
        if need == 0:
            break
        if next_attempt >= 2 * B:
            raise BootstrapInstabilityError(
                f"bootstrap instability: {next_attempt - len([r for r in results if r[2]])} of "
                f"{next_attempt} refits failed")
        batch = list(range(next_attempt, min(next_attempt + need, 2 * B)))
        next_attempt = batch[-1] + 1
        results.extend(_run(batch, workers, ctx))
    results.sort()
    good = [(a, s) for a, s, ok in results if ok]
    deviations = np.array([s for _, s in good])
    return BandResult(day_grid(n), f_hat, nearest_rank_quantile(deviations, 1.0 - alpha), alpha, B,
                      deviations, n_failed=len(results) - len(good), which=which, seed=seed,
                      attempts=[a for a, _ in good])


def pointwise_halfwidth(fit, n, which="f", level=0.95):
    """Normal-theory pointwise half-width ``z * se(curve(t))`` from the fit covariance."""
    from scipy.stats import norm

    if fit.cov is None:
        raise ValueError("fit has no covariance matrix")
    prefix = "mean:spline" if which == "f" else "zero:spline"
    idx = [j for j, name in enumerate(fit.shared_names) if name.startswith(prefix)]
    Bm = fit.spec.basis.evaluate(day_grid(n))
    cov = fit.cov[np.ix_(idx, idx)]
    se = np.sqrt(np.einsum("ij,jk,ik->i", Bm, cov, Bm))
    return float(norm.ppf(0.5 + level / 2.0)) * se
