"""Natural cubic spline basis over the day index.

The basis follows the usual ``ns(x, df)`` convention without an intercept:
``df - 1`` interior knots at equally spaced quantiles of the day grid, cubic
B-splines on the augmented knot vector, the first B-spline dropped (so every
basis function vanishes at the left boundary) and the remaining columns
projected onto the null space of the two boundary second-derivative
constraints. Beyond the boundary knots each function continues linearly.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

KIND = "natural_cubic"


@dataclass(frozen=True)
class SplineBasis:
    df: int
    boundary_knots: tuple
    interior_knots: tuple
    kind: str = KIND
    _bspline: BSpline = field(init=False, repr=False, compare=False)
    _proj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = (float(b) for b in self.boundary_knots)
        inner = np.asarray(self.interior_knots, dtype=float)
        if self.df < 3:
            raise ValueError("natural cubic requires df >= 3")
        if len(inner) != self.df - 1:
            raise ValueError(f"expected {self.df - 1} interior knots, got {len(inner)}")
        if not (lo < hi) or np.any(inner <= lo) or np.any(inner >= hi) or np.any(np.diff(inner) <= 0):
            raise ValueError("interior knots must be strictly increasing inside the boundary knots")
        t = np.concatenate([[lo] * 4, inner, [hi] * 4])
        nb = len(t) - 4
        spl = BSpline(t, np.eye(nb), 3, extrapolate=False)
        const = spl.derivative(2)(np.array([lo, hi]))[:, 1:]
        q, _ = np.linalg.qr(const.T, mode="complete")
        object.__setattr__(self, "_bspline", spl)
        object.__setattr__(self, "_proj", q[:, 2:])

    @property
    def dim(self):
        return self.df

    def _raw(self, x, deriv=0):
        spl = self._bspline if deriv == 0 else self._bspline.derivative(deriv)
        return spl(x)[:, 1:] @ self._proj

    def evaluate(self, t):
        """Design rows ``(B_1(t), ..., B_K(t))`` for a scalar or array of days."""
        x = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.boundary_knots
        out = np.empty((len(x), self.df))
        inside = (x >= lo) & (x <= hi)
        if inside.any():
            out[inside] = self._raw(x[inside])
        for edge, mask in ((lo, x < lo), (hi, x > hi)):
            if mask.any():
                at = np.array([edge], dtype=float)
                out[mask] = self._raw(at) + (x[mask] - edge)[:, None] * self._raw(at, 1)
        return out[0] if np.ndim(t) == 0 else out

    def curve(self, coeffs, grid):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.df,):
            raise ValueError(f"coefficient vector has length {coeffs.size}, basis has {self.df}")
        return self.evaluate(np.asarray(grid, dtype=float)) @ coeffs

    def to_dict(self):
        return {
            "kind": self.kind,
            "df": self.df,
            "boundary_knots": [float(b) for b in self.boundary_knots],
            "interior_knots": [float(k) for k in self.interior_knots],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind", KIND) != KIND:
            raise ValueError(f"unsupported basis kind {d.get('kind')!r}")
        return cls(int(d["df"]), tuple(d["boundary_knots"]), tuple(d["interior_knots"]))


def make_basis(n_days, df=10):
    """Basis on days ``1..n_days`` with ``df`` columns and no constant."""
    if df < 3:
        raise ValueError("natural cubic requires df >= 3")
    if n_days <= df:
        raise ValueError(f"n_days ({n_days}) must exceed df ({df})")
    j = np.arange(1, df)
    interior = 1.0 + (n_days - 1.0) * j / df
    return SplineBasis(int(df), (1.0, float(n_days)), tuple(float(k) for k in interior))


def evaluate(basis, t):
    return basis.evaluate(t)


def curve(basis, coeffs, grid):
    return basis.curve(coeffs, grid)


def day_grid(n_days):
    return np.arange(1, n_days + 1, dtype=float)
