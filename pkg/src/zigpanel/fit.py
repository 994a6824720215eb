"""Maximum-likelihood fitting, standard errors and information criteria."""
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .model import Layout, ModelSpec, ParameterSet, Problem, STREAM_LABELS


class DegenerateStreamError(ValueError):
    pass


@dataclass(frozen=True)
class FitOptions:
    gtol: float = 1e-6
    ftol: float = 1e-10
    max_iters: int = 2000
    ridge: float = 1e-4
    history: int = 10
    polish_iters: int = 50
    compute_se: bool = True
    fd_step: float = 1e-5

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class FitResult:
    spec: ModelSpec
    phi_hat: ParameterSet
    nll: float
    n_obs: int
    n_params: int
    aic: float
    bic: float
    converged: bool
    iterations: int
    grad_norm: float
    nll_init: float = float("nan")
    se: dict = field(default_factory=dict)
    cov: np.ndarray = None
    shared_names: list = field(default_factory=list)
    covariate_names: tuple = ()
    info_condition: float = float("nan")
    message: str = ""

    @property
    def residual_df(self):
        return self.n_obs - self.n_params

    def coefficient_rows(self):
        """Rows of (component, term, estimate, std_error, z_value, p_value) for shared parameters."""
        est = dict(zip(self.shared_names, shared_values(self.phi_hat)))
        rows = []
        for name in self.shared_names:
            component, _, term = name.partition(":") if ":" in name else ("shape", "", name)
            se = self.se.get(name)
            value = est[name]
            if se is None or not se > 0:
                z = p = None
            else:
                z = value / se
                p = math.erfc(abs(z) / math.sqrt(2.0))
            rows.append((component, term, value, se, z, p))
        return rows

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "stream_label": STREAM_LABELS[self.spec.stream],
            "phi_hat": self.phi_hat.to_dict(),
            "nll": self.nll,
            "nll_init": self.nll_init,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "residual_df": self.residual_df,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "se": {k: _json_float(v) for k, v in self.se.items()},
            "cov": None if self.cov is None else [[_json_float(v) for v in r] for r in self.cov],
            "shared_names": list(self.shared_names),
            "covariate_names": list(self.covariate_names),
            "info_condition": _json_float(self.info_condition),
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d):
        cov = d.get("cov")
        return cls(
            spec=ModelSpec.from_dict(d["spec"]),
            phi_hat=ParameterSet.from_dict(d["phi_hat"]),
            nll=d["nll"], n_obs=d["n_obs"], n_params=d["n_params"], aic=d["aic"], bic=d["bic"],
            converged=d["converged"], iterations=d["iterations"], grad_norm=d["grad_norm"],
            nll_init=_from_json_float(d.get("nll_init")),
            se={k: v for k, v in d.get("se", {}).items()},
            cov=None if cov is None else np.array([[_from_json_float(v) for v in r] for r in cov]),
            shared_names=list(d.get("shared_names", [])),
            covariate_names=tuple(d.get("covariate_names", ())),
            info_condition=_from_json_float(d.get("info_condition")),
            message=d.get("message", ""),
        )


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _from_json_float(v):
    return float("nan") if v is None else float(v)


def information_criteria(nll, n_params, n_obs):
    """``(AIC, BIC)`` with ``AIC = 2p + 2 NLL`` and ``BIC = p log(N) + 2 NLL``."""
    if n_obs <= 0:
        raise ValueError("n_obs must be positive")
    return 2.0 * n_params + 2.0 * nll, n_params * math.log(n_obs) + 2.0 * nll


def shared_values(phi):
    """Estimates of the non-wallet parameters in layout order."""
    parts = [phi.alpha, phi.gamma] if phi.alpha.size == 1 else []
    return np.concatenate(parts + [phi.beta, phi.delta, phi.zeta, phi.kappa, [phi.log_k]])


# -- initialization ------------------------------------------------------------

def initial_theta(problem):
    """Moment-based starting point: logit zero share, log mean positive, MoM shape."""
    y, pos = problem.y, problem.pos
    L = problem.layout
    theta = np.zeros(L.size)
    if problem.n_pos == 0:
        raise DegenerateStreamError(f"degenerate stream {problem.spec.stream}: no positive cells")
    ypos = y[pos]
    glob_mean = float(ypos.mean())
    n_zero_glob = problem.n_obs - problem.n_pos
    if L.n_int == 1:
        theta[L.slices["alpha"]] = math.log(glob_mean)
        theta[L.slices["gamma"]] = math.log((n_zero_glob + 1.0) / (problem.n_pos + 1.0))
    else:
        n_pos_i = pos.sum(axis=1)
        sum_i = np.where(pos, y, 0.0).sum(axis=1)
        mean_i = np.where(n_pos_i > 0, sum_i / np.maximum(n_pos_i, 1), glob_mean)
        theta[L.slices["alpha"]] = np.log(mean_i)
        n_zero_i = problem.n - n_pos_i
        theta[L.slices["gamma"]] = np.log((n_zero_i + 1.0) / (n_pos_i + 1.0))
    var = float(ypos.var()) if ypos.size > 1 else 0.0
    k0 = glob_mean ** 2 / var if var > 0 else 1.0
    theta[-1] = math.log(min(max(k0, 0.01), 100.0))
    return theta


def convert_parameters(phi, to_spec, m, p):
    """Map parameters of one variant onto another (warm starts along A -> B -> Full)."""
    layout = Layout(to_spec, m, p)
    alpha, gamma = phi.alpha, phi.gamma
    if layout.n_int == m and alpha.size != m:
        alpha = np.full(m, float(alpha.mean()))
        gamma = np.full(m, float(gamma.mean()))
    elif layout.n_int == 1 and alpha.size != 1:
        alpha = np.array([alpha.mean()])
        gamma = np.array([gamma.mean()])
    zeta = phi.zeta if phi.zeta.size == layout.p else np.zeros(layout.p)
    kappa = phi.kappa if phi.kappa.size == layout.p else np.zeros(layout.p)
    return ParameterSet(alpha.copy(), gamma.copy(), phi.beta.copy(), phi.delta.copy(),
                        zeta.copy(), kappa.copy(), phi.log_k)


# -- optimization --------------------------------------------------------------

def _newton_polish(problem, theta, free, opts):
    """Damped Newton steps on the free coordinates until the gradient meets ``gtol``."""
    f, g = problem.objective(theta)
    iters = 0
    for _ in range(opts.polish_iters):
        gf = g[free]
        if np.max(np.abs(gf)) <= opts.gtol:
            break
        H = problem.hessian(theta)[np.ix_(free, free)]
        tau = 0.0
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + tau * np.eye(len(free)), gf)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)) and float(step @ gf) > 0:
                t = 1.0
                for _ in range(20):
                    cand = theta.copy()
                    cand[free] -= t * step
                    try:
                        fc, gc = problem.objective(cand)
                    except FloatingPointError:
                        fc = math.inf
                    if fc <= f:
                        improved = True
                        break
                    t *= 0.5
                if improved:
                    break
            tau = max(1e-8 * max(1.0, float(np.abs(np.diag(H)).max())), 10.0 * tau)
        if not improved:
            break
        theta, f, g = cand, fc, gc
        iters += 1
    return theta, f, g, iters


def fit_problem(problem, opts=None, init=None, fixed=None):
    """Minimize the penalized NLL of ``problem``.

    ``init`` is a flat parameter vector (default: moment start). Coordinates
    listed in ``fixed`` are held at their initial values.
    """
    opts = opts or FitOptions()
    theta0 = initial_theta(problem) if init is None else np.array(init, dtype=float)
    if theta0.shape != (problem.layout.size,):
        raise ValueError(f"initial vector has {theta0.size} entries, model needs {problem.layout.size}")
    free = np.arange(problem.layout.size)
    if fixed is not None and len(fixed):
        free = np.setdiff1d(free, np.asarray(fixed, dtype=int))
    f0, _ = problem.objective(theta0)
    # diagonal rescaling by the curvature at the start point
    diag = np.abs(np.diag(problem.hessian(theta0)))[free]
    scale = 1.0 / np.sqrt(np.maximum(diag, 1e-8 * max(1.0, float(diag.max()))))
    base = theta0[free]

    def fun(x):
        th = theta0.copy()
        th[free] = base + scale * x
        try:
            f, g = problem.objective(th)
        except FloatingPointError:
            return math.inf, np.zeros_like(x)
        return f, g[free] * scale

    res = minimize(fun, np.zeros(len(free)), jac=True, method="L-BFGS-B",
                   options={"maxcor": opts.history, "maxiter": opts.max_iters,
                            "maxfun": 5 * opts.max_iters, "gtol": opts.gtol,
                            "ftol": opts.ftol})
    theta = theta0.copy()
    theta[free] = base + scale * res.x
    f, g = problem.objective(theta)
    if not f <= f0:
        theta, (f, g) = theta0.copy(), problem.objective(theta0)
    iters = int(res.nit)
    if opts.polish_iters and np.max(np.abs(g[free])) > opts.gtol:
        theta, f, g, extra = _newton_polish(problem, theta, free, opts)
        iters += extra
    grad_norm = float(np.max(np.abs(g[free])))
    return theta, f, f0, grad_norm, iters, str(res.message)


def fit(spec, panel, opts=None, init=None, fixed=None, problem=None):
    """Fit one (variant, stream) model to a panel.

    ``init`` may be a ``ParameterSet`` of any variant; it is converted, which
    is how the A -> B -> Full warm-start path is run.
    """
    opts = opts or FitOptions()
    if problem is None:
        y = panel.streams[spec.stream]
        if not np.any(np.asarray(y) > 0):
            raise DegenerateStreamError(f"degenerate stream {spec.stream}: all cells are zero")
        problem = Problem(spec, y, panel.covariates, ridge=opts.ridge)
    p_cov = problem.X.shape[1]
    if init is not None:
        theta0 = convert_parameters(init, spec, problem.m, p_cov).to_vector()
    else:
        theta0 = initial_theta(problem)
    theta, f, f0, gnorm, iters, msg = fit_problem(problem, opts, theta0, fixed)
    pen = problem.penalty(theta)
    nll = f - pen
    k_params = problem.layout.size
    aic, bic = information_criteria(nll, k_params, problem.n_obs)
    names = problem.layout.names(getattr(panel, "covariate_names", None))
    shared = problem.layout.shared_index()
    result = FitResult(
        spec=spec,
        phi_hat=ParameterSet.from_vector(theta, problem.layout),
        nll=float(nll), n_obs=problem.n_obs, n_params=k_params, aic=aic, bic=bic,
        converged=bool(gnorm <= opts.gtol), iterations=iters, grad_norm=gnorm,
        nll_init=float(f0 - problem.penalty(theta0)),
        shared_names=[names[j] for j in shared],
        covariate_names=tuple(getattr(panel, "covariate_names", ()) or ()),
        message=msg,
    )
    if opts.compute_se:
        se, cov, cond = standard_errors(problem, theta, opts.fd_step)
        result.se = {names[j]: se[a] for a, j in enumerate(shared)} if se is not None else {
            names[j]: None for j in shared}
        result.cov = cov
        result.info_condition = cond
    return result


def fd_information(problem, theta, step=1e-5):
    """Observed information by central differences of the analytic gradient."""
    n = len(theta)
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        H[:, j] = (problem.objective(theta + e)[1] - problem.objective(theta - e)[1]) / (2.0 * step)
    return 0.5 * (H + H.T)


def standard_errors(problem, theta, step=1e-5):
    """SEs of the shared parameters with wallet intercepts profiled out.

    Returns ``(se, cov, condition)``; ``se`` and ``cov`` are ``None`` when the
    profiled information is not positive definite.
    """
    info = fd_information(problem, np.asarray(theta, dtype=float), step)
    s = problem.layout.shared_index()
    w = problem.layout.wallet_index()
    I_ss = info[np.ix_(s, s)]
    if w.size:
        I_sw = info[np.ix_(s, w)]
        I_ww = info[np.ix_(w, w)]
        try:
            I_ss = I_ss - I_sw @ np.linalg.solve(I_ww, I_sw.T)
        except np.linalg.LinAlgError:
            return None, None, math.inf
    I_ss = 0.5 * (I_ss + I_ss.T)
    eig = np.linalg.eigvalsh(I_ss)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else math.inf
    if not eig[0] > 0 or cond > 1e14:
        return None, None, cond
    cov = np.linalg.inv(I_ss)
    cov = 0.5 * (cov + cov.T)
    return np.sqrt(np.diag(cov)), cov, cond


def fit_variants(panel, stream, basis, variants=("A", "B", "Full"), opts=None):
    """Fit the requested variants in nesting order, each warm-started from the previous one."""
    results = {}
    prev = None
    for variant in ("A", "B", "Full"):
        if variant not in variants:
            continue
        spec = ModelSpec(variant, stream, basis)
        res = fit(spec, panel, opts, init=prev.phi_hat if prev is not None else None)
        results[variant] = res
        prev = res
    return results


def with_options(opts, **kw):
    return replace(opts or FitOptions(), **kw)
