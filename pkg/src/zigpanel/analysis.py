"""Descriptive statistics, post-fit window summaries and plot-ready CSV exports."""
import csv
import datetime as dt
import math
import os
from dataclasses import dataclass

import numpy as np

from .basis import day_grid
from .ingest import unstandardize
from .model import STREAM_LABELS, STREAMS, linear_predictors

STUDY_START = dt.date(2022, 4, 1)


def day_index(date, start=STUDY_START):
    """Day number of a calendar date, with the study start as day 1."""
    if isinstance(date, str):
        date = dt.date.fromisoformat(date)
    return (date - start).days + 1


DEFAULT_WINDOWS = (
    ("Pre-FTX Collapse", day_index("2022-09-01"), day_index("2022-09-30")),
    ("FTX Collapse", day_index("2022-10-16"), day_index("2022-11-15")),
    ("Post-FTX Collapse", day_index("2022-12-01"), day_index("2022-12-31")),
)


def trailing_mean(x, window):
    """Trailing moving average; the first ``window - 1`` points average the available history."""
    if window < 1:
        raise ValueError("moving-average window must be at least 1")
    x = np.asarray(x, dtype=float)
    # exact window sums, so window=1 returns the input unchanged
    return np.array([math.fsum(x[max(0, t - window + 1): t + 1]) / (t + 1 - max(0, t - window + 1))
                     for t in range(len(x))])


@dataclass
class ActivitySeries:
    day: np.ndarray
    share_active: np.ndarray
    mean_count: np.ndarray
    mean_count_active: np.ndarray
    share_active_ma: np.ndarray
    mean_count_ma: np.ndarray
    mean_count_active_ma: np.ndarray

    COLUMNS = ("day", "share_active", "share_active_ma", "mean_count", "mean_count_ma",
               "mean_count_active", "mean_count_active_ma")

    def rows(self):
        cols = [getattr(self, c) for c in self.COLUMNS]
        return [tuple(int(v) if j == 0 else float(v) for j, v in enumerate(r)) for r in zip(*cols)]


def activity_series(panel, ma_window=10):
    """Daily share of active wallets and mean transfer counts, raw and smoothed.

    A wallet is active on a day when any of the four streams is nonzero.
    ``mean_count`` averages over all wallets, ``mean_count_active`` over the
    active ones (0 on days with none).
    """
    active = np.zeros((panel.m, panel.n_days), dtype=bool)
    for s in STREAMS:
        active |= panel.streams[s] > 0
    n_active = active.sum(axis=0)
    share = n_active / panel.m
    counts = np.asarray(panel.counts, dtype=float)
    mean_count = counts.mean(axis=0)
    active_counts = np.where(active, counts, 0.0).sum(axis=0)
    mean_active = np.divide(active_counts, n_active, out=np.zeros(panel.n_days), where=n_active > 0)
    return ActivitySeries(day_grid(panel.n_days).astype(int), share, mean_count, mean_active,
                          trailing_mean(share, ma_window), trailing_mean(mean_count, ma_window),
                          trailing_mean(mean_active, ma_window))


def skewness(values):
    """Population-moment skewness ``m3 / m2**1.5``; ``nan`` for zero variance or fewer than 3 values."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return math.nan
    d = v - v.mean()
    scale = float(np.max(np.abs(d)))
    if not scale > 0:
        return math.nan
    d = d / scale  # scale-free; keeps m2**1.5 away from underflow
    m2 = float(np.mean(d * d))
    if not m2 > 0:
        return math.nan
    return float(np.mean(d ** 3)) / m2 ** 1.5


def adjusted_skewness(values):
    """Bias-adjusted (Fisher-Pearson) skewness ``g1 * sqrt(n(n-1)) / (n-2)``."""
    n = np.asarray(values).size
    g1 = skewness(values)
    return g1 * math.sqrt(n * (n - 1.0)) / (n - 2.0) if n >= 3 else math.nan


def skewness_table(fits):
    """Table rows ``(model, conditional_mean, zero_inflation, ...adjusted)`` from Full-model fits."""
    rows = []
    for stream in STREAMS:
        fit = fits.get(stream)
        if fit is None:
            continue
        a, g = fit.phi_hat.alpha, fit.phi_hat.gamma
        rows.append((STREAM_LABELS[stream], skewness(a), skewness(g),
                     adjusted_skewness(a), adjusted_skewness(g)))
    return rows


@dataclass
class WindowSummary:
    name: str
    start_day: int
    end_day: int
    prob_txn: float
    cond_mean: float
    raw_prob_txn: float
    raw_cond_mean: float


def _check_windows(windows, n):
    spans = sorted((int(s), int(e), name) for name, s, e in windows)
    for s, e, name in spans:
        if s > e:
            raise ValueError(f"window {name!r} is empty ({s} > {e})")
        if s < 1 or e > n:
            raise ValueError(f"window {name!r} [{s}, {e}] lies outside days 1..{n}")
    for (s1, e1, a), (s2, e2, b) in zip(spans, spans[1:]):
        if s2 <= e1:
            raise ValueError(f"windows {a!r} and {b!r} overlap")


def window_summary(fit, panel, windows=DEFAULT_WINDOWS):
    """Fitted transaction probability ``1 - pi`` and conditional mean ``mu`` averaged per window.

    Raw frequencies (share of nonzero cells, mean positive amount) are
    reported alongside.
    """
    if not fit.converged:
        raise ValueError("window summary needs a converged fit")
    _check_windows(windows, panel.n_days)
    mu, pi = linear_predictors(fit.spec, fit.phi_hat, panel)
    y = panel.streams[fit.spec.stream]
    out = []
    for name, s, e in windows:
        sl = slice(int(s) - 1, int(e))
        yw = y[:, sl]
        pos = yw > 0
        out.append(WindowSummary(
            name, int(s), int(e),
            float(np.mean(1.0 - pi[:, sl])), float(np.mean(mu[:, sl])),
            float(pos.mean()), float(yw[pos].mean()) if pos.any() else math.nan))
    return out


def format_window_table(summaries):
    """Plain-text table: one section per stream, one row per window."""
    lines = [f"{'Window':<22}{'Probability of Transaction':>28}{'Conditional Mean':>18}"]
    for stream in STREAMS:
        if stream not in summaries:
            continue
        lines.append(STREAM_LABELS[stream])
        for w in summaries[stream]:
            lines.append(f"{w.name:<22}{100 * w.prob_txn:>27.2f}%{w.cond_mean:>18.1f}")
    return "\n".join(lines) + "\n"


# -- exports -------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def export_plot_data(out_dir, panel, fits=None, bands=None, ma_window=10, bins=20):
    """Write tidy CSVs for the descriptive and model figures.

    ``fits`` maps ``(stream, variant)`` to ``FitResult``; ``bands`` maps
    ``(stream, variant, which)`` to ``BandResult``. Returns written paths.
    """
    fits = fits or {}
    bands = bands or {}
    written = []

    def emit(name, header, rows):
        path = os.path.join(out_dir, name)
        write_csv(path, header, rows)
        written.append(path)

    if panel is None:
        raise FileNotFoundError("plot export needs the panel artifact")
    act = activity_series(panel, ma_window)
    emit("activity_series.csv", ActivitySeries.COLUMNS, act.rows())

    if panel.covariates is not None:
        names = list(panel.covariate_names)
        raw = unstandardize(panel.covariates, panel.covariate_stats, names) if panel.covariate_stats else panel.covariates
        emit("covariate_series.csv", ["day"] + names + [f"{c}_z" for c in names],
             [(d + 1, *raw[d], *panel.covariates[d]) for d in range(panel.n_days)])

    full = {s: fits[(s, "Full")] for s in STREAMS if (s, "Full") in fits}
    if full:
        for stream, fit in full.items():
            emit(f"intercepts_{stream}.csv", ["wallet_id", "alpha", "gamma"],
                 [(w, a, g) for w, a, g in zip(panel.wallet_ids, fit.phi_hat.alpha, fit.phi_hat.gamma)])
            for label, values in (("alpha", fit.phi_hat.alpha), ("gamma", fit.phi_hat.gamma)):
                counts, edges = np.histogram(values, bins=bins)
                emit(f"intercept_hist_{stream}_{label}.csv", ["bin_lo", "bin_hi", "count"],
                     [(edges[j], edges[j + 1], int(counts[j])) for j in range(len(counts))])
        streams = [s for s in STREAMS if s in full]
        emit("intercept_scatter.csv", ["wallet_id"] + [f"alpha_{s}" for s in streams],
             [(w, *(full[s].phi_hat.alpha[i] for s in streams)) for i, w in enumerate(panel.wallet_ids)])
        emit("intercept_skewness.csv",
             ["model", "conditional_mean", "zero_inflation", "conditional_mean_adjusted",
              "zero_inflation_adjusted"], skewness_table(full))

    for (stream, variant, which), band in sorted(bands.items()):
        emit(f"band_{stream}_{variant}_{which}.csv", ["t", "fit", "lo", "hi"], band.rows())

    grid = day_grid(panel.n_days)
    for (stream, variant), fit in sorted(fits.items()):
        basis = fit.spec.basis
        f = basis.curve(fit.phi_hat.beta, grid)
        g = basis.curve(fit.phi_hat.delta, grid)
        emit(f"spline_{stream}_{variant}.csv", ["t", "log_mu_spline", "logit_pi_spline"],
             [(int(t), a, b) for t, a, b in zip(grid, f, g)])
    return written
