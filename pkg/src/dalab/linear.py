"""Integer toral automorphisms: the companion families, exact characteristic
polynomials, real root isolation, eigenframes and the two splittings.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .torus import InvalidInput

# beyond this, entries cannot be represented exactly in float64
_MAX_ENTRY = 2**53


class UnsupportedSpectrum(ValueError):
    pass


@dataclass(frozen=True)
class IntegerMatrix:
    entries: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(int(v) for v in r) for r in self.entries)
        d = len(rows)
        if d == 0 or any(len(r) != d for r in rows):
            raise InvalidInput("matrix must be square")
        if any(abs(v) >= _MAX_ENTRY for r in rows for v in r):
            raise InvalidInput("integer entry too large for float64 dynamics")
        object.__setattr__(self, "entries", rows)
        if abs(self.determinant) != 1:
            raise InvalidInput(f"determinant {self.determinant} is not +-1")

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def determinant(self) -> int:
        return int_det(self.entries)

    def array(self) -> np.ndarray:
        return np.array(self.entries, dtype=float)

    def tolist(self) -> list[list[int]]:
        return [list(r) for r in self.entries]


def int_det(rows) -> int:
    """Exact determinant by cofactor expansion along the first row."""
    rows = [list(r) for r in rows]
    d = len(rows)
    if d == 1:
        return rows[0][0]
    if d == 2:
        return rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
    total = 0
    for j, a in enumerate(rows[0]):
        if a == 0:
            continue
        minor = [r[:j] + r[j + 1:] for r in rows[1:]]
        total += (-1) ** j * a * int_det(minor)
    return total


def build_An(n: int) -> IntegerMatrix:
    """Companion matrix of t^4 - (n+4)t^3 + (4n+3)t^2 - (3n+2)t + 1."""
    n = int(n)
    if n < 1:
        raise InvalidInput("n must be a positive integer")
    if 4 * n + 3 >= _MAX_ENTRY:
        raise InvalidInput("n too large")
    return IntegerMatrix((
        (0, 1, 0, 0),
        (0, 0, 1, 0),
        (0, 0, 0, 1),
        (-1, 3 * n + 2, -4 * n - 3, n + 4),
    ))


def build_theoremC_matrix() -> IntegerMatrix:
    """Companion matrix of t^4 - 8t^3 + 19t^2 - 14t + 1 (column form)."""
    return IntegerMatrix((
        (0, 0, 0, -1),
        (1, 0, 0, 14),
        (0, 1, 0, -19),
        (0, 0, 1, 8),
    ))


def an_poly(n: int) -> list[int]:
    """Closed-form coefficients of p_n, highest degree first."""
    return [1, -(n + 4), 4 * n + 3, -(3 * n + 2), 1]


def char_poly(A) -> list[int]:
    """Exact characteristic polynomial det(tI - A), highest degree first.

    Faddeev-LeVerrier in Python integers; every division is exact.
    """
    rows = A.entries if isinstance(A, IntegerMatrix) else tuple(tuple(int(v) for v in r) for r in A)
    d = len(rows)

    def matmul(X, Y):
        return [[sum(X[i][k] * Y[k][j] for k in range(d)) for j in range(d)] for i in range(d)]

    coeffs = [1]
    M = [[0] * d for _ in range(d)]
    for k in range(1, d + 1):
        M = matmul(rows, M)
        for i in range(d):
            M[i][i] += coeffs[-1]
        AM = matmul(rows, M)
        tr = sum(AM[i][i] for i in range(d))
        if tr % k:
            raise ArithmeticError("non-integral Faddeev-LeVerrier step")
        coeffs.append(-tr // k)
    return coeffs


def poly_eval(coeffs, x):
    """Horner evaluation; exact when x is an int or Fraction."""
    acc = 0
    for c in coeffs:
        acc = acc * x + c
    return acc


def poly_deriv(coeffs) -> list[int]:
    d = len(coeffs) - 1
    return [c * (d - i) for i, c in enumerate(coeffs[:-1])]


def _sign_at(coeffs, x: float) -> int:
    v = poly_eval(coeffs, Fraction(x))
    return (v > 0) - (v < 0)


def _bisect(coeffs, lo: float, hi: float, slo: int) -> float:
    """Shrink a sign-change bracket to adjacent floats using exact signs."""
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s = _sign_at(coeffs, mid)
        if s == 0:
            return mid
        if s == slo:
            lo = mid
        else:
            hi = mid
    # pick the endpoint with the smaller residual
    flo = abs(poly_eval(coeffs, Fraction(lo)))
    fhi = abs(poly_eval(coeffs, Fraction(hi)))
    return lo if flo <= fhi else hi


def real_roots(coeffs) -> list[float]:
    """Distinct real roots of an integer polynomial, ascending.

    Critical points (roots of the derivative, found recursively) split the
    line into monotone pieces; each piece holds at most one root, located by
    an exact sign change and bisected down to float resolution. Roots of even
    multiplicity produce no sign change and are not reported.
    """
    coeffs = list(coeffs)
    while coeffs and coeffs[0] == 0:
        coeffs.pop(0)
    deg = len(coeffs) - 1
    if deg < 1:
        return []
    if deg == 1:
        return [-coeffs[1] / coeffs[0]]
    lead = abs(coeffs[0])
    bound = 1.0 + max(abs(Fraction(c, lead)) for c in coeffs[1:])
    bound = float(bound) * 1.0000001 + 1.0
    knots = [-bound] + real_roots(poly_deriv(coeffs)) + [bound]
    roots = []
    for lo, hi in zip(knots[:-1], knots[1:]):
        slo, shi = _sign_at(coeffs, lo), _sign_at(coeffs, hi)
        if slo == 0:
            if not roots or roots[-1] != lo:
                roots.append(lo)
            continue
        if shi == 0 or slo == shi:
            continue
        roots.append(_bisect(coeffs, lo, hi, slo))
    if _sign_at(coeffs, knots[-1]) == 0:
        roots.append(knots[-1])
    return roots


@dataclass(frozen=True)
class SpectrumFrame:
    """Eigen-data of a hyperbolic integer matrix with four real eigenvalues.

    ``values`` are sorted by increasing modulus (beta_s, beta_c1, beta_c2,
    beta_u); ``vectors`` holds the matching unit eigenvectors as columns.
    """

    matrix: IntegerMatrix
    values: np.ndarray
    vectors: np.ndarray
    det_residual: float
    splitting_E: dict = field(default_factory=dict)
    splitting_F: dict = field(default_factory=dict)

    @property
    def beta_s(self) -> float:
        return float(self.values[0])

    @property
    def beta_c1(self) -> float:
        return float(self.values[1])

    @property
    def beta_c2(self) -> float:
        return float(self.values[2])

    @property
    def beta_u(self) -> float:
        return float(self.values[3])

    @property
    def alpha(self) -> float:
        return abs(self.beta_c1) - 1.0

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.values)

    def theta(self, splitting: str = "E") -> float:
        return domination_ratio(self.moduli, self.splitting(splitting))

    @property
    def theta_E(self) -> float:
        return self.theta("E")

    @property
    def theta_F(self) -> float:
        return self.theta("F")

    def splitting(self, name: str) -> dict:
        if name.upper() == "E":
            return self.splitting_E
        if name.upper() == "F":
            return self.splitting_F
        raise ValueError(f"unknown splitting {name!r}")

    def center_log_sum(self, splitting: str = "E") -> float:
        idx = self.splitting(splitting)["c"]
        return float(np.sum(np.log(self.moduli[list(idx)])))


def domination_ratio(moduli, split) -> float:
    """min over the two interfaces of (weakest stronger band)/(strongest weaker band)."""
    m = np.asarray(moduli)
    s, c, u = (list(split[k]) for k in ("s", "c", "u"))
    return float(min(m[c].min() / m[s].max(), m[u].min() / m[c].max()))


def splittings(frame_or_dim) -> tuple[dict, dict]:
    """Index sets of the E-splitting (2-dim centre) and F-splitting (1-dim centre).

    Indices refer to eigenvalues sorted by increasing modulus.
    """
    if isinstance(frame_or_dim, SpectrumFrame):
        return frame_or_dim.splitting_E, frame_or_dim.splitting_F
    if int(frame_or_dim) != 4:
        raise UnsupportedSpectrum("splittings are defined for d = 4")
    E = {"s": (0,), "c": (1, 2), "u": (3,)}
    F = {"s": (0,), "c": (1,), "u": (2, 3)}
    return E, F


def _is_row_companion(rows) -> bool:
    d = len(rows)
    return all(rows[i][j] == (1 if j == i + 1 else 0) for i in range(d - 1) for j in range(d))


def _null_vector(M: np.ndarray) -> np.ndarray:
    _, _, vt = np.linalg.svd(M)
    return vt[-1]


def solve_spectrum(A: IntegerMatrix) -> SpectrumFrame:
    coeffs = char_poly(A)
    d = A.dim
    roots = real_roots(coeffs)
    if len(roots) != d:
        raise UnsupportedSpectrum(f"found {len(roots)} distinct real roots, need {d}")
    roots = np.array(sorted(roots, key=abs))
    mods = np.abs(roots)
    if np.any(np.diff(mods) <= 0) or np.any(np.abs(mods - 1.0) < 1e-14):
        raise UnsupportedSpectrum("moduli not strictly ordered or on the unit circle")
    M = A.array()
    vecs = np.empty((d, d))
    for k, lam in enumerate(roots):
        if _is_row_companion(A.entries):
            v = lam ** np.arange(d)
        else:
            v = _null_vector(M - lam * np.eye(d))
        v = v / np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs[:, k] = v
    det_res = abs(float(np.prod(roots)) - A.determinant)
    E, F = splittings(d) if d == 4 else ({}, {})
    return SpectrumFrame(A, roots, vecs, det_res, E, F)


def anosov_threshold(n_max: int = 1000) -> int:
    """Smallest n for which p_n has roots 0 < bs < 1 < bc1 < bc2 < bu."""
    for n in range(1, n_max + 1):
        r = real_roots(an_poly(n))
        if len(r) == 4 and 0 < r[0] < 1 < r[1] < r[2] < r[3]:
            return n
    raise UnsupportedSpectrum("no admissible n found")


def asymptotics_report(n_list) -> list[dict]:
    rows = []
    for n in n_list:
        f = solve_spectrum(build_An(n))
        rows.append({
            "n": int(n),
            "bu_over_n": f.beta_u / n,
            "alpha": f.beta_c1 - 1.0,
            "three_minus_bc2": 3.0 - f.beta_c2,
            "three_n_bs": 3 * n * f.beta_s,
        })
    return rows


LIMIT_DIRECTIONS = {
    "s": np.array([1.0, 0, 0, 0]),
    "c1": np.array([1.0, 1, 1, 1]) / 2.0,
    "c2": np.array([1.0, 3, 9, 27]) / np.sqrt(820.0),
    "u": np.array([0, 0, 0, 1.0]),
}


def eigenvector_limits(n: int) -> dict:
    """Distances of the unit eigenvectors of A_n from their n -> inf limits."""
    f = solve_spectrum(build_An(n))
    out = {}
    for k, name in enumerate(("s", "c1", "c2", "u")):
        out[name] = float(np.linalg.norm(f.vectors[:, k] - LIMIT_DIRECTIONS[name]))
    return out


def spectrum_row(frame: SpectrumFrame, n=None) -> dict:
    return {
        "n": "" if n is None else int(n),
        "beta_s": frame.beta_s,
        "beta_c1": frame.beta_c1,
        "beta_c2": frame.beta_c2,
        "beta_u": frame.beta_u,
        "alpha_n": frame.alpha,
        "theta_E": frame.theta_E,
        "theta_F": frame.theta_F,
        "det_residual": frame.det_residual,
    }
