"""Volume-preserving perturbation factors and composed DA models on T^4.

Every factor is a diffeomorphism of R^d commuting with integer translations,
so it descends to the torus. Factors expose analytic differentials; finite
differences are used only in tests.

Factors realised here
---------------------
ShearMap / TwistMap
    x -> x + a * v * phi(k.(x - site)) with integer covector k and k.v = 0.
    The differential is unipotent, so det = 1 exactly.
PlanarTwist
    A map of one adapted coordinate plane defined by a generating function
    G(x, Y) = rho(|z|) Q(x, Y), the remaining adapted coordinates acting as
    parameters. It is exactly area preserving in the plane and hence exactly
    volume preserving, and it is the identity outside a ball.
LocalizedFlowMap
    Time-one map of rho(|y|) B y (B = log of a target matrix), RK4 integrated.
    Ball supported but only approximately volume preserving.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, logm

from .linear import IntegerMatrix, SpectrumFrame
from .torus import AdaptedMetric

TWO_PI = 2.0 * math.pi


class ConstraintViolation(ValueError):
    pass


class OutOfNeighborhood(ValueError):
    pass


# ---------------------------------------------------------------------------
# bump profiles


def _smoothstep(u):
    """Quintic C^2 step on [0, 1] and its first two derivatives."""
    u = np.clip(u, 0.0, 1.0)
    s = u**3 * (10 - 15 * u + 6 * u**2)
    ds = 30 * u**2 * (1 - u) ** 2
    d2s = 60 * u * (1 - u) * (1 - 2 * u)
    return s, ds, d2s


@dataclass(frozen=True)
class BumpProfile:
    """Radial cutoff rho(t): 1 on [0, core*radius], 0 beyond radius, C^2.

    kind="standard" decays linearly in t between the two radii;
    kind="log" decays linearly in log t, which keeps |t rho'(t)| of order
    1/log(1/core) and hence the C^1 cost of localising a linear map small.
    """

    radius: float = 1.0
    core: float = 0.5
    kind: str = "standard"

    def __post_init__(self):
        if not (self.radius > 0 and 0 < self.core < 1):
            raise ValueError("need radius > 0 and 0 < core < 1")
        if self.kind not in ("standard", "log"):
            raise ValueError(f"unknown profile kind {self.kind!r}")

    @property
    def inner(self) -> float:
        return self.core * self.radius

    def scaled(self, factor: float) -> "BumpProfile":
        return BumpProfile(self.radius * factor, self.core, self.kind)

    def evaluate(self, t):
        """rho, rho', rho'' at radii t."""
        t = np.asarray(t, dtype=float)
        if self.kind == "standard":
            w = self.radius - self.inner
            s, ds, d2s = _smoothstep((t - self.inner) / w)
            return 1.0 - s, -ds / w, -d2s / w**2
        L = math.log(1.0 / self.core)
        tt = np.maximum(t, self.inner)
        s, ds, d2s = _smoothstep(np.log(tt / self.inner) / L)
        rho = 1.0 - s
        d1 = -ds / (tt * L)
        d2 = -d2s / (tt * L) ** 2 + ds / (tt**2 * L)
        inside = t <= self.inner
        return rho, np.where(inside, 0.0, d1), np.where(inside, 0.0, d2)

    def __call__(self, t):
        return self.evaluate(t)[0]

    def sup_t_drho(self) -> float:
        """sup_t |t rho'(t)| (closed form)."""
        if self.kind == "log":
            return 1.875 / math.log(1.0 / self.core)
        t = np.linspace(self.inner, self.radius, 2001)
        return float(np.max(np.abs(t * self.evaluate(t)[1])))

    def sup_drho(self) -> float:
        t = np.linspace(self.inner, self.radius, 4001)
        return float(np.max(np.abs(self.evaluate(t)[1])))

    def to_dict(self) -> dict:
        return {"radius": self.radius, "core": self.core, "kind": self.kind}


# ---------------------------------------------------------------------------
# factor interface


class Factor:
    kind = "factor"
    det_defect = 0.0  # declared bound on |det D - 1|

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def inverse_jacobian(self, x):
        """Differential of the inverse map at x."""
        return np.linalg.inv(self.jacobian(self.inverse(x)))

    def probe_points(self, rng, count: int):
        """Points where the factor differs from the identity (for sup norms)."""
        return rng.random((count, 4))

    def to_dict(self) -> dict:
        raise NotImplementedError


def _phase_profile(name: str):
    if name == "cos":
        return (lambda t: (1.0 - np.cos(TWO_PI * t)) / TWO_PI,
                lambda t: np.sin(TWO_PI * t))
    if name == "sin":
        return (lambda t: np.sin(TWO_PI * t) / TWO_PI,
                lambda t: np.cos(TWO_PI * t))
    raise ValueError(f"unknown phase profile {name!r}")


class ShearMap(Factor):
    """x -> x + amp * v * phi(k.(x - site)), k integer with k.v = 0.

    With the "cos" profile phi(0) = phi'(0) = 0, so ``site`` is fixed and the
    differential there is the identity.
    """

    kind = "shear"

    def __init__(self, direction, covector, amp: float, profile: str = "cos", site=None):
        k = np.asarray(covector)
        if not np.array_equal(k, np.round(k)) or not np.any(k):
            raise ValueError("covector must be a non-zero integer vector")
        self.k = k.astype(float)
        v = np.asarray(direction, dtype=float)
        v = v - (v @ self.k) / (self.k @ self.k) * self.k
        nz = np.flatnonzero(self.k)
        if len(nz) == 1:
            v[nz[0]] = 0.0  # make k.v vanish exactly
        nv = np.linalg.norm(v)
        if nv == 0:
            raise ValueError("direction is parallel to the covector")
        self.v = v / nv
        self.amp = float(amp)
        self.profile = profile
        self._phi, self._dphi = _phase_profile(profile)
        self.site = np.zeros(len(self.k)) if site is None else np.asarray(site, dtype=float)

    def _phase(self, x):
        return (np.asarray(x) - self.site) @ self.k

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return x + self.amp * self._phi(self._phase(x))[..., None] * self.v

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        return x - self.amp * self._phi(self._phase(x))[..., None] * self.v

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        s = self.amp * self._dphi(self._phase(x))
        return np.eye(len(self.k)) + s[..., None, None] * np.outer(self.v, self.k)

    def inverse_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        s = self.amp * self._dphi(self._phase(x))
        return np.eye(len(self.k)) - s[..., None, None] * np.outer(self.v, self.k)

    def det_jacobian(self, x):
        """Exact determinant: 1 + amp phi' (k.v), with k.v = 0."""
        x = np.asarray(x, dtype=float)
        return 1.0 + self.amp * self._dphi(self._phase(x)) * float(self.k @ self.v)

    def c1_norm(self, metric: AdaptedMetric | None = None) -> float:
        """sup ||DH - I|| (sup |phi'| = 1 for both profiles)."""
        if metric is None:
            return abs(self.amp) * np.linalg.norm(self.v) * np.linalg.norm(self.k)
        vt = metric.inverse @ self.v
        kt = metric.basis.T @ self.k
        return abs(self.amp) * np.linalg.norm(vt) * np.linalg.norm(kt)

    def c0_norm(self) -> float:
        sup_phi = 2.0 / TWO_PI if self.profile == "cos" else 1.0 / TWO_PI
        return abs(self.amp) * sup_phi

    def probe_points(self, rng, count):
        pts = rng.random((count, len(self.k)))
        # half the samples on the hyperplanes where |phi'| = 1
        half = count // 2
        j = int(np.argmax(np.abs(self.k)))
        target = 0.25 if self.profile == "cos" else 0.0
        target = target + 0.5 * rng.integers(0, 2, half)
        rest = self._phase(pts[:half]) - pts[:half, j] * self.k[j]
        pts[:half, j] = (target - rest) / self.k[j]
        return pts

    def scaled(self, amp: float) -> "ShearMap":
        return ShearMap(self.v, self.k, amp, self.profile, self.site)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "direction": self.v.tolist(), "covector": self.k.astype(int).tolist(),
                "amp": self.amp, "profile": self.profile, "site": self.site.tolist()}


class TwistMap(ShearMap):
    """Coordinate twist x_i -> x_i + amp * phi(k.x), k_i = 0."""

    kind = "twist"

    def __init__(self, active: int, covector, amp: float, profile: str = "cos", site=None):
        k = np.asarray(covector)
        if k[active] != 0:
            raise ValueError("driver must not depend on the active coordinate")
        e = np.zeros(len(k))
        e[active] = 1.0
        super().__init__(e, k, amp, profile, site)
        self.active = int(active)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "active": self.active, "covector": self.k.astype(int).tolist(),
                "amp": self.amp, "profile": self.profile, "site": self.site.tolist()}


# ---------------------------------------------------------------------------
# ball-supported factors in adapted coordinates


class _LocalFactor(Factor):
    """Shared plumbing: nearest copy of the centre, adapted coordinates."""

    def __init__(self, center, basis):
        self.center = np.asarray(center, dtype=float)
        self.metric = AdaptedMetric(basis)

    def _local(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        d = d - np.round(d)
        return d, self.metric.coords(d)

    def support_radius(self) -> float:
        raise NotImplementedError

    def probe_points(self, rng, count):
        d = len(self.center)
        g = rng.standard_normal((count, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        # log-uniform radii so the linear core is sampled as well
        R = self.support_radius()
        r = R * np.exp(np.log(1e-6) * rng.random(count))
        return self.center + self.metric.vectors(g * r[:, None])


class PlanarTwist(_LocalFactor):
    """Generating-function twist in the adapted plane (i, j).

    With x = y_i, y = y_j and S(x, Y) = xY + G(x, Y; w), the map is
    y = Y + G_x, X = x + G_Y, all other adapted coordinates w unchanged.
    G = rho(|z|) Q(x, Y) with Q = p x^2/2 + q x Y + r Y^2/2 and z the adapted
    vector with (x, Y) in the plane slots. Near the centre the differential is
    the 2x2 matrix of ``linear_part``.
    """

    kind = "planar_twist"

    def __init__(self, center, basis, plane, coeffs, profile: BumpProfile):
        super().__init__(center, basis)
        self.i, self.j = (int(plane[0]), int(plane[1]))
        self.p, self.q, self.r = (float(c) for c in coeffs)
        self.profile = profile
        if abs(self.q) >= 0.5:
            raise OutOfNeighborhood("planar factor too far from the identity")

    @classmethod
    def from_matrix(cls, center, basis, plane, M2, profile):
        (a, b), (c, d) = np.asarray(M2, dtype=float)
        if abs(a * d - b * c - 1.0) > 1e-12:
            raise ValueError("planar target must have determinant 1")
        return cls(center, basis, plane, (-c / d, 1.0 / d - 1.0, b / d), profile)

    def linear_part(self) -> np.ndarray:
        p, q, r = self.p, self.q, self.r
        return np.array([[(1 + q) - r * p / (1 + q), r / (1 + q)], [-p / (1 + q), 1 / (1 + q)]])

    def _bound_dG(self) -> float:
        c = max(abs(self.p), abs(self.q), abs(self.r))
        return c * self.profile.radius * (2.0 + self.profile.sup_t_drho())

    def support_radius(self) -> float:
        return self.profile.radius + self._bound_dG()

    # G and its derivatives, z has the plane slots already substituted
    def _G(self, z, order=2):
        x, Y = z[..., self.i], z[..., self.j]
        t = np.linalg.norm(z, axis=-1)
        rho, d1, d2 = self.profile.evaluate(t)
        Q = 0.5 * self.p * x * x + self.q * x * Y + 0.5 * self.r * Y * Y
        gQ = np.zeros(z.shape)
        gQ[..., self.i] = self.p * x + self.q * Y
        gQ[..., self.j] = self.q * x + self.r * Y
        safe = np.where(t > 0, t, 1.0)
        unit = z / safe[..., None]
        grho = d1[..., None] * unit
        grad = rho[..., None] * gQ + Q[..., None] * grho
        if order < 2:
            return grad, None
        d = z.shape[-1]
        HQ = np.zeros(z.shape[:-1] + (d, d))
        HQ[..., self.i, self.i] = self.p
        HQ[..., self.i, self.j] = self.q
        HQ[..., self.j, self.i] = self.q
        HQ[..., self.j, self.j] = self.r
        uu = unit[..., :, None] * unit[..., None, :]
        Hrho = d2[..., None, None] * uu + (d1 / safe)[..., None, None] * (np.eye(d) - uu)
        H = (rho[..., None, None] * HQ + gQ[..., :, None] * grho[..., None, :]
             + grho[..., :, None] * gQ[..., None, :] + Q[..., None, None] * Hrho)
        return grad, H

    def _solve_Y(self, y):
        """Solve y_j = Y + G_x(x, Y, w) for Y by Newton."""
        z = y.copy()
        for _ in range(50):
            g, H = self._G(z)
            res = z[..., self.j] + g[..., self.i] - y[..., self.j]
            z[..., self.j] -= res / (1.0 + H[..., self.i, self.j])
            if np.max(np.abs(res), initial=0.0) < 1e-16:
                break
        return z

    def _solve_x(self, y):
        """Solve X = x + G_Y(x, Y, w) for x by Newton (inverse map)."""
        z = y.copy()
        for _ in range(50):
            g, H = self._G(z)
            res = z[..., self.i] + g[..., self.j] - y[..., self.i]
            z[..., self.i] -= res / (1.0 + H[..., self.j, self.i])
            if np.max(np.abs(res), initial=0.0) < 1e-16:
                break
        return z

    def _active(self, y):
        return np.linalg.norm(y, axis=-1) < self.support_radius()

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        d, y = self._local(x)
        out = x.copy()
        m = self._active(y)
        if np.any(m):
            z = self._solve_Y(y[m])
            g, _ = self._G(z, order=1)
            ynew = z.copy()
            ynew[..., self.i] = z[..., self.i] + g[..., self.j]
            out[m] = x[m] + self.metric.vectors(ynew - y[m])
        return out

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        d, y = self._local(x)
        out = x.copy()
        m = self._active(y)
        if np.any(m):
            z = self._solve_x(y[m])
            g, _ = self._G(z, order=1)
            ynew = z.copy()
            ynew[..., self.j] = z[..., self.j] + g[..., self.i]
            out[m] = x[m] + self.metric.vectors(ynew - y[m])
        return out

    def adapted_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        _, y = self._local(x)
        D = np.broadcast_to(np.eye(len(self.center)), y.shape[:-1] + (len(self.center),) * 2).copy()
        m = self._active(y)
        if np.any(m):
            z = self._solve_Y(y[m])
            _, H = self._G(z)
            i, j = self.i, self.j
            den = 1.0 + H[:, i, j]
            # dY = (dy_j - G_xk dw_k) / den over all inputs k != j, where the
            # input slot i is x itself
            dY = -H[:, i, :] / den[:, None]
            dY[:, j] = 1.0 / den
            dX = H[:, j, :] + H[:, j, j][:, None] * dY
            dX[:, i] += 1.0
            dX[:, j] = H[:, j, j] / den
            Dm = D[m]
            Dm[:, i, :] = dX
            Dm[:, j, :] = dY
            D[m] = Dm
        return D

    def jacobian(self, x):
        return self.metric.basis @ self.adapted_jacobian(x) @ self.metric.inverse

    def rescaled(self, factor: float) -> "PlanarTwist":
        return PlanarTwist(self.center, self.metric.basis, (self.i, self.j),
                           (self.p, self.q, self.r), self.profile.scaled(factor))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "plane": [self.i, self.j],
                "coeffs": [self.p, self.q, self.r], "profile": self.profile.to_dict()}


class LocalizedFlowMap(_LocalFactor):
    """Time-one map of X(y) = rho(|y|) B y in adapted coordinates (RK4)."""

    kind = "flow"

    def __init__(self, center, basis, B, profile: BumpProfile, steps: int = 16):
        super().__init__(center, basis)
        self.B = np.asarray(B, dtype=float)
        self.profile = profile
        self.steps = int(steps)
        # |div X| = |rho'(t)/t y^T B y| <= sup|t rho'| ||sym B||
        Bs = 0.5 * (self.B + self.B.T)
        self.div_bound = self.profile.sup_t_drho() * float(np.linalg.norm(Bs, 2))
        self.det_defect = math.expm1(self.div_bound) + 1e-9

    @property
    def target(self) -> np.ndarray:
        return expm(self.B)

    def support_radius(self) -> float:
        return self.profile.radius

    def _field(self, y):
        t = np.linalg.norm(y, axis=-1)
        rho, d1, _ = self.profile.evaluate(t)
        By = y @ self.B.T
        safe = np.where(t > 0, t, 1.0)
        grho = (d1 / safe)[..., None] * y
        X = rho[..., None] * By
        DX = rho[..., None, None] * self.B + By[..., :, None] * grho[..., None, :]
        return X, DX

    def _flow(self, y, time, with_jac):
        h = time / self.steps
        J = np.broadcast_to(np.eye(y.shape[-1]), y.shape[:-1] + (y.shape[-1],) * 2).copy()
        for _ in range(self.steps):
            k1, D1 = self._field(y)
            k2, D2 = self._field(y + 0.5 * h * k1)
            k3, D3 = self._field(y + 0.5 * h * k2)
            k4, D4 = self._field(y + h * k3)
            if with_jac:
                J1 = D1 @ J
                J2 = D2 @ (J + 0.5 * h * J1)
                J3 = D3 @ (J + 0.5 * h * J2)
                J4 = D4 @ (J + h * J3)
                J = J + h / 6.0 * (J1 + 2 * J2 + 2 * J3 + J4)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return y, J

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        _, y = self._local(x)
        y1, _ = self._flow(y, 1.0, False)
        return x + self.metric.vectors(y1 - y)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        _, y = self._local(x)
        z, _ = self._flow(y, -1.0, False)
        for _ in range(3):  # polish so forward(inverse(x)) = x to rounding
            fz, J = self._flow(z, 1.0, True)
            z = z - np.linalg.solve(J, (fz - y)[..., None])[..., 0]
        return x + self.metric.vectors(z - y)

    def adapted_jacobian(self, x):
        _, y = self._local(np.asarray(x, dtype=float))
        return self._flow(y, 1.0, True)[1]

    def jacobian(self, x):
        return self.metric.basis @ self.adapted_jacobian(x) @ self.metric.inverse

    def rescaled(self, factor: float) -> "LocalizedFlowMap":
        return LocalizedFlowMap(self.center, self.metric.basis, self.B, self.profile.scaled(factor), self.steps)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "log_target": self.B.tolist(),
                "profile": self.profile.to_dict(), "steps": self.steps}


class FactorChain(Factor):
    """Composition F0 o F1 o ... (F_last applied first)."""

    kind = "chain"

    def __init__(self, factors, label: str = "chain"):
        self.factors = list(factors)
        self.label = label
        self.det_defect = float(np.prod([1 + f.det_defect for f in self.factors]) - 1.0)

    def forward(self, x):
        for f in reversed(self.factors):
            x = f.forward(x)
        return x

    def inverse(self, x):
        for f in self.factors:
            x = f.inverse(x)
        return x

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        J = None
        for f in reversed(self.factors):
            Jf = f.jacobian(x)
            J = Jf if J is None else Jf @ J
            x = f.forward(x)
        return J

    def inverse_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        J = None
        for f in self.factors:
            Jf = f.inverse_jacobian(x)
            J = Jf if J is None else Jf @ J
            x = f.inverse(x)
        return J

    def probe_points(self, rng, count):
        if not self.factors:
            return rng.random((count, 4))
        per = max(1, count // len(self.factors))
        return np.concatenate([f.probe_points(rng, per) for f in self.factors])

    def rescaled(self, factor: float) -> "FactorChain":
        return FactorChain([f.rescaled(factor) for f in self.factors], self.label)

    @property
    def center(self):
        return self.factors[0].center

    def support_radius(self) -> float:
        return max(f.support_radius() for f in self.factors)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "label": self.label, "factors": [f.to_dict() for f in self.factors]}


# ---------------------------------------------------------------------------
# constructions


def booster_covector(frame: SpectrumFrame, mode: str, bound: int = 2) -> np.ndarray:
    """Small integer covector k whose phase k.x reads the mixing plane.

    Scores each k in [-bound, bound]^d by the diagonal shear share available
    inside the plane (|k_a k_b| / (|k_plane| |k|), adapted components) minus
    the share that leaks onto the two remaining bundles.
    """
    V = frame.vectors
    d = V.shape[0]
    plane = (2, 3) if mode == "expand" else (0, 1)
    rest = [i for i in range(d) if i not in plane]
    best, best_score = None, -np.inf
    for k in itertools.product(range(-bound, bound + 1), repeat=d):
        k = np.array(k)
        if not k.any():
            continue
        kt = V.T @ k
        kp = np.hypot(kt[plane[0]], kt[plane[1]])
        nk = np.linalg.norm(kt)
        score = abs(kt[plane[0]] * kt[plane[1]]) / (kp * nk) - np.linalg.norm(kt[rest]) / nk
        # prefer lower frequency on ties
        score -= 1e-9 * np.abs(k).sum()
        if score > best_score:
            best, best_score = k, score
    return best


def booster_geometry(frame: SpectrumFrame, mode: str, covector=None, mix_c1: float = 0.0):
    """Direction v and covector k of the plane-wave centre booster.

    mode "expand": v in span(E^u, E^c2) (plus an optional E^c1 share), sheared
    along phases k.x that read the unstable and strong-centre coordinates;
    this raises the centre Jacobian.
    mode "contract": v in span(E^s, E^c1), phases reading the stable and weak
    centre coordinates; this lowers it.
    """
    V = frame.vectors
    if mode == "expand":
        k = booster_covector(frame, mode) if covector is None else np.asarray(covector)
        kt = V.T @ k
        # v orthogonal (in adapted coordinates of k) inside span(u, c2)
        vt = np.zeros(4)
        vt[3], vt[2] = kt[2], -kt[3]
        if mix_c1:
            vt = vt / np.linalg.norm(vt)
            w = np.zeros(4)
            w[1] = 1.0
            # tilt towards c1, then restore k.v = 0 using the u slot
            vt = vt + mix_c1 * w
            vt[3] -= (kt @ vt) / kt[3]
    elif mode == "contract":
        k = booster_covector(frame, mode) if covector is None else np.asarray(covector)
        kt = V.T @ k
        vt = np.zeros(4)
        vt[0], vt[1] = kt[1], -kt[0]
    else:
        raise ValueError(f"unknown booster mode {mode!r}")
    v = V @ vt
    return v / np.linalg.norm(v), k


def make_center_booster(frame: SpectrumFrame, strength: float, site=None, support=None,
                        covector=None, mix_c1: float = 0.0, cap: float | None = None) -> ShearMap:
    """Plane-wave centre booster with adapted C^1 size |strength|.

    strength > 0 raises the centre Jacobian integral, strength < 0 is the
    reversed (centre-contracting) booster. ``support`` is accepted for
    interface compatibility; the booster is a global plane wave.
    """
    if support is not None:
        raise NotImplementedError("the booster is a global plane wave; support must be None")
    mode = "expand" if strength >= 0 else "contract"
    v, k = booster_geometry(frame, mode, covector, mix_c1)
    metric = AdaptedMetric(frame.vectors)
    unit = ShearMap(v, k, 1.0, "cos", site)
    amp = abs(strength) / unit.c1_norm(metric) if strength else 0.0
    H = ShearMap(v, k, amp, "cos", site)
    if cap is not None and H.c1_norm(metric) >= cap:
        raise ConstraintViolation(f"booster C1 size {H.c1_norm(metric):.4g} exceeds cap {cap:.4g}")
    return H


def _planar_factors(T: np.ndarray):
    """Factor T (near I, det 1) into planar pieces: list of (plane, 2x2)."""
    d = T.shape[0]
    tiny = 1e-12
    # Doolittle LU without pivoting
    L = np.eye(d)
    U = T.astype(float).copy()
    for j in range(d):
        for i in range(j + 1, d):
            L[i, j] = U[i, j] / U[j, j]
            U[i, :] -= L[i, j] * U[j, :]
    diag = np.diag(U).copy()
    U1 = U / diag[:, None]
    pieces = []
    # L = C_0 C_1 ... C_{d-2}, C_j = column-j elementary operations
    for j in range(d - 1):
        for i in range(j + 1, d):
            if abs(L[i, j]) > tiny:
                pieces.append(((j, i), np.array([[1.0, 0.0], [L[i, j], 1.0]])))
    # D as planar diagonal pieces with cumulative products
    c = 1.0
    for k in range(d - 1):
        c *= diag[k]
        if abs(c - 1.0) > tiny:
            pieces.append(((k, k + 1), np.diag([c, 1.0 / c])))
    # U1 = R_{d-2} ... R_0, R_i = row-i elementary operations
    for i in reversed(range(d - 1)):
        for j in range(i + 1, d):
            if abs(U1[i, j]) > tiny:
                pieces.append(((i, j), np.array([[1.0, U1[i, j]], [0.0, 1.0]])))
    return pieces


def _embed(plane, M2, d=4):
    E = np.eye(d)
    i, j = plane
    E[np.ix_([i, j], [i, j])] = M2
    return E


def make_franks_bump(target, rho_cap: float, center, basis, radius: float = 0.1,
                     realization: str = "twist", profile: BumpProfile | None = None,
                     steps: int = 16, samples: int = 4000, seed: int = 0):
    """Ball-supported volume-preserving h with h(center) = center, Dh(center) = target.

    ``target`` is given in adapted coordinates (columns of ``basis``).
    realization="twist": composition of exact planar generating-function
    twists (det = 1 exactly); "flow": localized RK4 flow of log(target).
    The result is rejected if the sampled sup ||Dh - I|| exceeds rho_cap.
    """
    T = np.asarray(target, dtype=float)
    d = T.shape[0]
    dev = float(np.linalg.norm(T - np.eye(d), 2))
    if abs(np.linalg.det(T) - 1.0) > 1e-12:
        raise ValueError("target must have determinant 1")
    if profile is None:
        profile = BumpProfile(radius, 1e-3, "log")
    else:
        profile = BumpProfile(radius, profile.core, profile.kind)
    delta = rho_cap / (2.0 + profile.sup_t_drho())
    if dev >= delta:
        raise OutOfNeighborhood(f"||target - I|| = {dev:.4g} exceeds threshold {delta:.4g}")
    if dev == 0.0:
        return FactorChain([], "franks")
    if realization == "twist":
        pieces = _planar_factors(T)
        prod = np.eye(d)
        for plane, M2 in pieces:
            prod = prod @ _embed(plane, M2, d)
        assert np.allclose(prod, T, atol=1e-12)
        # shrink the generating-function radius so each piece stays in the ball
        factors = []
        for plane, M2 in pieces:
            tw = PlanarTwist.from_matrix(center, basis, plane, M2, profile)
            scale = profile.radius / tw.support_radius()
            factors.append(PlanarTwist.from_matrix(center, basis, plane, M2, profile.scaled(scale)))
        h = FactorChain(factors, "franks")
    elif realization == "flow":
        B = np.real(logm(T))
        h = FactorChain([LocalizedFlowMap(center, basis, B, profile, steps)], "franks")
    else:
        raise ValueError(f"unknown realization {realization!r}")
    measured = adapted_c1_distance(h, AdaptedMetric(basis), np.random.default_rng(seed), samples)
    if measured >= rho_cap:
        raise OutOfNeighborhood(f"realized sup||Dh - I|| = {measured:.4g} >= rho_cap {rho_cap:.4g}")
    return h


def rescale_bump(h, epsilon_j: float):
    """h_j(x) = eps_j h(x / eps_j) about the bump centre: support shrinks, Dh(centre) kept."""
    if epsilon_j <= 0:
        raise ValueError("epsilon_j must be positive")
    if epsilon_j == 1.0:
        return h
    return h.rescaled(epsilon_j)


def adapted_c1_distance(factor: Factor, metric: AdaptedMetric, rng, samples: int = 4000) -> float:
    pts = factor.probe_points(rng, samples)
    J = metric.conjugate(factor.jacobian(pts))
    return float(np.max(np.linalg.norm(J - np.eye(J.shape[-1]), 2, axis=(-2, -1)), initial=0.0))


# ---------------------------------------------------------------------------
# nested balls and target differential


@dataclass
class NestedBallSystem:
    center: np.ndarray
    n: int
    radii: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.radii) - 1


def nested_balls(p, eps: float, n: int, depth: int) -> NestedBallSystem:
    """eps_0 = eps, eps_j = (20 n)^(-j) eps_{j-1}."""
    if not (0 < eps < 0.25):
        raise ValueError("base radius must lie in (0, 1/4) to avoid self-overlap")
    radii = [float(eps)]
    for j in range(1, depth + 1):
        radii.append(radii[-1] / float(20 * n) ** j)
    return NestedBallSystem(np.asarray(p, dtype=float), int(n), radii)


@dataclass
class TargetDifferential:
    matrix: np.ndarray          # D_n in standard coordinates
    adapted: np.ndarray         # D_n in the adapted frame
    correction: np.ndarray      # [Dg(p)]^{-1} D_n, adapted frame
    theta_c1: float
    alpha: float
    bound_ratio: float          # max{|1 - t/(1-a)|, |1 - (1-a)/t|} / alpha


def target_differential(Dg_p, frame: SpectrumFrame) -> TargetDifferential:
    """D_n with the weak-centre eigenvalue of Dg(p) replaced by 1 - alpha_n.

    Eigenvalues of Dg(p) are matched to the frame by sorting moduli; the
    stable eigenvalue absorbs the inverse factor so det is unchanged.
    """
    Dg_p = np.asarray(Dg_p, dtype=float)
    w, W = np.linalg.eig(Dg_p)
    if np.max(np.abs(w.imag)) > 1e-9:
        raise ValueError("differential at p must have real eigenvalues")
    order = np.argsort(np.abs(w.real))
    w = w.real[order]
    W = W.real[:, order]
    alpha = frame.alpha
    theta = abs(w[1])
    if not (1.0 < theta < 1.0 + 2.0 * alpha):
        raise ConstraintViolation(f"weak-centre eigenvalue {theta:.6g} outside (1, 1 + 2 alpha)")
    corr = np.ones(4)
    corr[1] = (1.0 - alpha) / theta
    corr[0] = theta / (1.0 - alpha)
    Dn = W @ np.diag(w * corr) @ np.linalg.inv(W)
    metric = AdaptedMetric(frame.vectors)
    correction_std = np.linalg.solve(Dg_p, Dn)
    ratio = max(abs(1 - theta / (1 - alpha)), abs(1 - (1 - alpha) / theta)) / alpha
    return TargetDifferential(Dn, metric.conjugate(Dn), metric.conjugate(correction_std), theta, alpha, ratio)


# ---------------------------------------------------------------------------
# composed model


def _int_inverse(A: IntegerMatrix) -> np.ndarray:
    Ai = np.linalg.inv(A.array())
    R = np.round(Ai)
    assert np.allclose(Ai, R, atol=1e-9)
    return R


class DiffeoModel:
    """g = A o F0 o F1 o ... on the torus, with cached certificates."""

    def __init__(self, A: IntegerMatrix, factors, frame: SpectrumFrame, name: str = "model"):
        self.A = A
        self.Af = A.array()
        self.Ainv = _int_inverse(A)
        self.factors = list(factors)
        self.frame = frame
        self.metric = AdaptedMetric(frame.vectors)
        self.name = name
        self.chain = FactorChain(self.factors)
        self.certificates: dict = {}

    @property
    def dim(self) -> int:
        return self.A.dim

    @property
    def is_linear(self) -> bool:
        return not self.factors

    # maps on the universal cover
    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return self.chain.forward(x) @ self.Af.T

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        return self.chain.inverse(x @ self.Ainv.T)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        if not self.factors:
            return np.broadcast_to(self.Af, x.shape[:-1] + self.Af.shape).copy()
        return self.Af @ self.chain.jacobian(x)

    def inverse_jacobian(self, x):
        """Differential of g^{-1} at x."""
        x = np.asarray(x, dtype=float)
        if not self.factors:
            return np.broadcast_to(self.Ainv, x.shape[:-1] + self.Af.shape).copy()
        return self.chain.inverse_jacobian(x @ self.Ainv.T) @ self.Ainv

    def psi(self, x):
        """Periodic displacement g(x) - A x."""
        x = np.asarray(x, dtype=float)
        return self.forward(x) - x @ self.Af.T

    # maps on the torus
    def step(self, x):
        y = self.forward(x)
        return y - np.floor(y)

    def step_back(self, x):
        y = self.inverse(x)
        return y - np.floor(y)

    def to_dict(self) -> dict:
        return {"name": self.name, "linear": self.A.tolist(),
                "factors": [f.to_dict() for f in self.factors],
                "certificates": self.certificates}


def compose_da(A: IntegerMatrix, factors, frame: SpectrumFrame, name: str = "model",
               delta: float = 0.05, samples: int = 8192, seed: int = 0) -> DiffeoModel:
    """Compose A with perturbation factors and cache certificates.

    Certificates: Lipschitz bounds of g and g^{-1} (Euclidean), sup||Dg - A||,
    adapted C^1 distance of the perturbation chain to Id, declared volume
    defect, homotopy flag and the epsilon budgets of both splittings.
    """
    from .cones import choose_constants, epsilon_budget

    model = DiffeoModel(A, factors, frame, name)
    rng = np.random.default_rng(seed)
    pts = np.concatenate([rng.random((samples, A.dim)), model.chain.probe_points(rng, samples)])
    if factors:
        J = model.chain.jacobian(pts)
        Jad = model.metric.conjugate(J)
        c1 = float(np.max(np.linalg.norm(Jad - np.eye(A.dim), 2, axis=(-2, -1))))
        Dg = model.Af @ J
        Dgi = np.linalg.inv(Dg)
        dets = np.linalg.det(J)
    else:
        c1 = 0.0
        Dg = model.Af[None]
        Dgi = model.Ainv[None]
        dets = np.ones(1)
    per_factor = []
    for f in factors:
        Jf = model.metric.conjugate(f.jacobian(f.probe_points(rng, samples // 2)))
        per_factor.append(float(np.max(np.linalg.norm(Jf - np.eye(A.dim), 2, axis=(-2, -1)))))
    budgets = {}
    for sp in ("E", "F"):
        try:
            budgets[sp] = epsilon_budget(choose_constants(frame, sp))
        except ValueError:
            budgets[sp] = 0.0
    model.certificates = {
        "lipschitz": float(np.max(np.linalg.norm(Dg, 2, axis=(-2, -1)))),
        "lipschitz_inverse": float(np.max(np.linalg.norm(Dgi, 2, axis=(-2, -1)))),
        "sup_Dg_minus_A": float(np.max(np.linalg.norm(Dg - model.Af, 2, axis=(-2, -1)))),
        "c1_distance": c1,
        "factor_c1": per_factor,
        "volume_defect_declared": model.chain.det_defect,
        "volume_defect_sampled": float(np.max(np.abs(dets - 1.0))),
        "homotopic_to_linear": bool(all(c < delta for c in per_factor)),
        "delta": delta,
        "epsilon_budget": budgets,
        "within_budget": {sp: bool(c1 < b) for sp, b in budgets.items()},
    }
    return model


def check_return_times(model: DiffeoModel, balls: NestedBallSystem, j: int, samples: int = 1000,
                       seed: int = 0) -> dict:
    """Sampled check that g^k(x) avoids V_j for x outside V_{j-1}, |k| <= j.

    Works in lifted coordinates around the ball centre, so radii far below the
    float spacing of [0, 1) remain meaningful. Also samples ||Dg|| and
    ||Dg^{-1}|| against the 20 n premise.
    """
    n = balls.n
    rng = np.random.default_rng(seed)
    out = {"j": j, "pass": True, "worst_margin": np.inf, "witness": None}
    K = 20.0 * n
    pts = rng.random((samples, model.dim))
    Lf = float(np.max(np.linalg.norm(model.jacobian(pts), 2, axis=(-2, -1))))
    Lb = float(np.max(np.linalg.norm(model.inverse_jacobian(pts), 2, axis=(-2, -1))))
    out["lipschitz"] = Lf
    out["lipschitz_inverse"] = Lb
    out["lipschitz_pass"] = bool(max(Lf, Lb) <= K)
    if j == 0:
        out["worst_margin"] = None
        return out
    r_out, r_in = balls.radii[j - 1], balls.radii[j]
    p = balls.center
    metric = model.metric
    # points just outside V_{j-1}: shells at 1x .. 4x its radius, plus far points
    g = rng.standard_normal((samples, model.dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    scale = r_out * (1.0 + 3.0 * rng.random(samples))
    near = p + metric.vectors(g * scale[:, None])
    far = rng.random((samples, model.dim))
    for start in (near, far):
        for sign in (1, -1):
            x = start.copy()
            for k in range(1, j + 1):
                x = model.forward(x) if sign > 0 else model.inverse(x)
                d = x - p
                d = d - np.round(d)
                dist = metric.norm(d)
                margin = dist / r_in
                i = int(np.argmin(margin))
                if margin[i] < out["worst_margin"]:
                    out["worst_margin"] = float(margin[i])
                if margin[i] <= 1.0:
                    out["pass"] = False
                    out["witness"] = {"point": start[i].tolist(), "k": sign * k}
                    return out
    return out
