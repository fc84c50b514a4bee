"""Cone fields, cone constants and sampled certification of partial
hyperbolicity for models g = A o h.

All computations use the adapted metric in which the eigenbasis of the
linear part is orthonormal; coordinates are indexed by increasing eigenvalue
modulus (s, c1, c2, u for d = 4).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm as _normal
from scipy.stats import qmc

from .linear import SpectrumFrame

FAMILIES = ("u", "cu", "s", "cs")


class NotPartiallyHyperbolic(ValueError):
    pass


@dataclass(frozen=True)
class ConeConstants:
    beta: float
    gamma: float
    theta: float
    mu1: float
    lambda2: float
    mu2: float
    lambda3: float
    L: float
    l: float
    splitting: str
    s: tuple
    c: tuple
    u: tuple

    def family(self, name: str) -> tuple[tuple, tuple]:
        """(E, F) index sets of a cone family."""
        s, c, u = self.s, self.c, self.u
        E = {"u": u, "cu": c + u, "s": s, "cs": s + c}[name]
        F = tuple(i for i in range(len(s + c + u)) if i not in E)
        return tuple(sorted(E)), F

    def with_rates(self, c1: float) -> "ConeConstants":
        """Copy with L = 1 + c1, l = 1 - c1."""
        d = asdict(self)
        d["L"], d["l"] = 1.0 + c1, 1.0 - c1
        return ConeConstants(**d)

    def chain_ok(self) -> bool:
        L, l = self.L, self.l
        return bool(0 < L * self.mu1 < l * self.lambda2 <= L * self.mu2 < l * self.lambda3
                    and L * self.mu1 < 1 < l * self.lambda3)

    def invariants_ok(self) -> bool:
        return bool(1 < (1 + self.beta) ** 2 < self.theta and self.gamma < 1
                    and self.mu1 < 1 < self.lambda3 and self.mu1 < self.lambda2 < self.mu2 < self.lambda3)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _quartiles(a: float, b: float) -> tuple[float, float]:
    """Points at 1/4 and 3/4 of [a, b] on a logarithmic scale."""
    return a ** 0.75 * b ** 0.25, a ** 0.25 * b ** 0.75


def choose_constants(frame_or_moduli, splitting="E", c1: float | None = None) -> ConeConstants:
    """beta from (1 + beta)^4 = Theta; rates at log-quartiles of their intervals.

    ``frame_or_moduli`` is a SpectrumFrame, or a pair (moduli, split dict).
    L and l default to 1 +- epsilon_budget.
    """
    if isinstance(frame_or_moduli, SpectrumFrame):
        m = frame_or_moduli.moduli
        split = frame_or_moduli.splitting(splitting)
        name = splitting.upper()
    else:
        m, split = frame_or_moduli
        m = np.asarray(m, dtype=float)
        name = str(splitting)
    s, c, u = (tuple(split[k]) for k in ("s", "c", "u"))
    ls, cmin, cmax, umin = m[list(s)].max(), m[list(c)].min(), m[list(c)].max(), m[list(u)].min()
    theta = float(min(cmin / ls, umin / cmax))
    if not theta > 1.0:
        raise NotPartiallyHyperbolic(f"domination ratio {theta:.6g} <= 1")
    beta = theta ** 0.25 - 1.0
    a1, b1 = (1 + beta) * ls, cmin / (1 + beta)
    a2, b2 = (1 + beta) * cmax, umin / (1 + beta)
    mu1, lam2 = _quartiles(a1, b1)
    mu2, lam3 = _quartiles(a2, b2)
    if mu1 >= 1.0:
        if a1 >= 1.0:
            raise NotPartiallyHyperbolic("stable band does not contract")
        mu1 = math.sqrt(a1 * min(b1, 1.0))
        lam2 = max(lam2, math.sqrt(mu1 * b1))
    if lam3 <= 1.0:
        if b2 <= 1.0:
            raise NotPartiallyHyperbolic("unstable band does not expand")
        lam3 = math.sqrt(max(a2, 1.0) * b2)
        mu2 = min(mu2, math.sqrt(a2 * lam3))
    gamma = max(mu2 / lam3, mu1 / lam2)
    cc = ConeConstants(beta, gamma, theta, mu1, lam2, mu2, lam3, 1.0, 1.0, name, s, c, u)
    eps = epsilon_budget(cc) if c1 is None else c1
    return cc.with_rates(eps)


def epsilon_budget_terms(cc: ConeConstants) -> dict:
    """Individual constraints on eps = sup||Dh - I|| (L = 1 + eps, l = 1 - eps)."""
    b, g = cc.beta, cc.gamma
    # D h(C(g b)) in C(b): boundary vector e + f, |f| = g b |e|, |v| = |e| sqrt(1 + g^2 b^2)
    cone = b * (1 - g) / ((1 + b) * math.sqrt(1 + g * g * b * b))
    return {
        "cone_forward": cone,
        "cone_inverse": cone / (1 + cone),  # ||Dh^{-1} - I|| <= eps / (1 - eps)
        "L_mu1": 1.0 / cc.mu1 - 1.0,
        "l_lambda3": 1.0 - 1.0 / cc.lambda3,
        "l_over_L": (1 - g) / (1 + g),
        "mu1_lambda2": (cc.lambda2 - cc.mu1) / (cc.lambda2 + cc.mu1),
        "mu2_lambda3": (cc.lambda3 - cc.mu2) / (cc.lambda3 + cc.mu2),
    }


def epsilon_budget(cc: ConeConstants) -> float:
    return float(min(epsilon_budget_terms(cc).values()))


# ---------------------------------------------------------------------------
# cones


@dataclass(frozen=True)
class ConeSpec:
    E: tuple
    F: tuple
    beta: float


def cone_contains(spec: ConeSpec, v) -> np.ndarray:
    """||v_F|| - beta ||v_E|| for adapted-coordinate vectors (negative = inside)."""
    v = np.asarray(v, dtype=float)
    vE = np.linalg.norm(v[..., list(spec.E)], axis=-1)
    vF = np.linalg.norm(v[..., list(spec.F)], axis=-1)
    return vF - spec.beta * vE


def cone_ratio(v, E, F) -> np.ndarray:
    vE = np.linalg.norm(v[..., list(E)], axis=-1)
    vF = np.linalg.norm(v[..., list(F)], axis=-1)
    return vF / vE


def _sphere(u, dim):
    """Map uniforms (n, dim) to unit vectors."""
    g = _normal.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def sample_pairs(count: int, dim: int, seed: int):
    """Low-discrepancy points on T^d and direction seeds for cone vectors."""
    eng = qmc.Halton(d=3 * dim, scramble=True, seed=seed)
    u = eng.random(count)
    return u[:, :dim], u[:, dim:2 * dim], u[:, 2 * dim:]


def linear_worst_ratio(frame: SpectrumFrame, cc: ConeConstants, family: str) -> float:
    """Exact image-cone angle / beta for the linear part, worst case over vectors."""
    E, F = cc.family(family)
    m = frame.moduli
    if family in ("u", "cu"):
        return float(m[list(F)].max() / m[list(E)].min())
    return float((1 / m[list(F)]).max() / (1 / m[list(E)]).min())


def verify_invariance(model, cc: ConeConstants | None = None, splitting: str = "E",
                      samples: int = 10_000, seed: int = 0, levels=(0.25, 0.5, 0.75),
                      c1: float | None = None) -> dict:
    """Sampled check of the four cone inclusions and four rate bounds.

    For each sampled point x and boundary vector v = e + beta f (plus interior
    levels and the axis-aligned worst cases):
      u, cu:  Dg(x) v must lie in C(gamma beta) and satisfy
              ||Dg v|| > l lambda3 ||v|| (u), > l lambda2 ||v|| (cu);
      s, cs:  Dg^{-1}(x) v must lie in C(beta) and satisfy
              ||Dg^{-1} v|| > ||v|| / (L mu1) (s), > ||v|| / (L mu2) (cs).
    L, l come from the model's measured adapted C^1 distance unless given.
    Sampled verification only; no interval arithmetic.
    """
    frame = model.frame
    if cc is None:
        cc = choose_constants(frame, splitting)
    if c1 is None:
        c1 = model.certificates.get("c1_distance", 0.0) if model.factors else 0.0
    cc = cc.with_rates(c1)
    dim = model.dim
    pts, useeds, fseeds = sample_pairs(samples, dim, seed)
    Jf = model.metric.conjugate(model.jacobian(pts))
    Jb = model.metric.conjugate(model.inverse_jacobian(pts))
    report = {"splitting": cc.splitting, "samples": samples, "seed": seed,
              "constants": cc.to_dict(), "c1_distance": c1, "families": {}}
    all_pass = True
    for fam in FAMILIES:
        E, F = cc.family(fam)
        dE, dF = len(E), len(F)
        e = np.zeros((samples, dim))
        f = np.zeros((samples, dim))
        e[:, list(E)] = _sphere(useeds[:, :dE], dE) if dE > 1 else 1.0
        f[:, list(F)] = _sphere(fseeds[:, :dF], dF) if dF > 1 else 1.0
        vecs = [e + cc.beta * f] + [e + t * cc.beta * f for t in levels]
        for i in E:
            for j in F:
                w = np.zeros((samples, dim))
                w[:, i], w[:, j] = 1.0, cc.beta
                vecs.append(w)
        V = np.stack(vecs, axis=1)  # (samples, nvec, dim)
        J = Jf if fam in ("u", "cu") else Jb
        W = np.einsum("nij,nkj->nki", J, V)
        ratio = cone_ratio(W, E, F)
        stretch = np.linalg.norm(W, axis=-1) / np.linalg.norm(V, axis=-1)
        if fam == "u":
            target, rate = cc.gamma * cc.beta, cc.l * cc.lambda3
        elif fam == "cu":
            target, rate = cc.gamma * cc.beta, cc.l * cc.lambda2
        elif fam == "s":
            target, rate = cc.beta, 1.0 / (cc.L * cc.mu1)
        else:
            target, rate = cc.beta, 1.0 / (cc.L * cc.mu2)
        inc = ratio - target
        rmargin = stretch / rate - 1.0
        i_inc = np.unravel_index(np.argmax(inc), inc.shape)
        i_rate = np.unravel_index(np.argmin(rmargin), rmargin.shape)
        inc_ok = bool(inc[i_inc] <= 0)
        rate_ok = bool(rmargin[i_rate] > 0)
        entry = {
            "inclusion_pass": inc_ok,
            "inclusion_worst_margin": float(inc[i_inc]),
            "max_image_ratio": float(ratio.max() / cc.beta),
            "contracted_margin": float((ratio - cc.gamma * cc.beta).max()),
            "rate_pass": rate_ok,
            "rate_worst_margin": float(rmargin[i_rate]),
            "rate_threshold": rate,
            "violations": int(np.sum(inc > 0) + np.sum(rmargin <= 0)),
        }
        if not inc_ok:
            entry["inclusion_witness"] = {"x": pts[i_inc[0]].tolist(), "v": V[i_inc].tolist()}
        if not rate_ok:
            entry["rate_witness"] = {"x": pts[i_rate[0]].tolist(), "v": V[i_rate].tolist()}
        all_pass &= inc_ok and rate_ok
        report["families"][fam] = entry
    report["rate_chain_pass"] = cc.chain_ok()
    report["checks_passed"] = sum(int(v["inclusion_pass"]) + int(v["rate_pass"])
                                  for v in report["families"].values())
    report["pass"] = bool(all_pass and cc.chain_ok())
    return report


def find_breaking_amplitude(build, splitting: str = "E", lo: float = 0.0, hi: float = 10.0,
                            samples: int = 2000, seed: int = 0, iters: int = 30) -> float:
    """Bisect for the smallest amplitude a with verify_invariance(build(a)) failing."""
    if verify_invariance(build(hi), splitting=splitting, samples=samples, seed=seed)["pass"]:
        raise ValueError("upper amplitude does not break the cones")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if verify_invariance(build(mid), splitting=splitting, samples=samples, seed=seed)["pass"]:
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# bundle continuation


def _orthonormal(Q):
    q, r = np.linalg.qr(Q)
    return q


def orbit(model, x, steps: int, backward: bool = False):
    """Torus orbit x_0 .. x_steps (forward) or x_0, g^{-1} x_0, ... (backward)."""
    x = np.asarray(x, dtype=float)
    out = [x]
    for _ in range(steps):
        x = model.step_back(x) if backward else model.step(x)
        out.append(x)
    return out


def continue_bundle(model, family: str, x, k: int, splitting: str = "E", cc=None,
                    widths: bool = True) -> dict:
    """Cone-pushing estimate of E^family at x (adapted coordinates).

    u/cu: the cone at g^{-k}(x) is pushed forward k times; s/cs: the cone at
    g^{k}(x) is pulled back. Returns an orthonormal basis (adapted coordinates)
    and the nesting widths tan(angle) of pushed boundary vectors around the
    pushed principal subspace after each step, with the gamma^k beta envelope.
    """
    if cc is None:
        cc = choose_constants(model.frame, splitting)
    E, F = cc.family(family)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, dim = x.shape
    forward = family in ("u", "cu")
    path = orbit(model, x, k, backward=forward)
    # path[t] = g^{-t} x (forward families) or g^{t} x (backward families)
    Q = np.zeros((n, dim, len(E)))
    for a, i in enumerate(E):
        Q[:, i, a] = 1.0
    bvecs = []
    for i in E:
        for j in F:
            w = np.zeros(dim)
            w[i], w[j] = 1.0, cc.beta
            bvecs.append(w)
    B = np.broadcast_to(np.array(bvecs).T, (n, dim, len(bvecs))).copy()
    hist = [cc.beta]
    for t in range(k, 0, -1):
        if forward:
            J = model.metric.conjugate(model.jacobian(path[t]))
        else:
            J = model.metric.conjugate(model.inverse_jacobian(path[t]))
        Q = _orthonormal(J @ Q)
        B = J @ B
        B /= np.linalg.norm(B, axis=1, keepdims=True)
        if widths:
            # tan of angle between each pushed boundary vector and span(Q)
            proj = Q @ np.swapaxes(Q, 1, 2) @ B
            perp = np.linalg.norm(B - proj, axis=1)
            par = np.linalg.norm(proj, axis=1)
            hist.append(float(np.max(perp / par)))
    envelope = [cc.beta * cc.gamma ** i for i in range(k + 1)]
    return {"basis": Q, "widths": hist, "envelope": envelope,
            "nested": bool(all(w <= e * (1 + 1e-9) + 1e-15 for w, e in zip(hist, envelope)))}


def center_bundle(model, x, k_cu: int = 20, k_cs: int = 20, splitting: str = "E"):
    """Centre bundle E^c(x) = E^cu(x) cap E^cs(x), adapted orthonormal basis (n, d, dc)."""
    cc = choose_constants(model.frame, splitting)
    cu = continue_bundle(model, "cu", x, k_cu, splitting, cc, widths=False)["basis"]
    cs = continue_bundle(model, "cs", x, k_cs, splitting, cc, widths=False)["basis"]
    return intersect_subspaces(cu, cs, len(cc.c))


def intersect_subspaces(P, Q, dim_out: int):
    """Orthonormal basis of span(P) cap span(Q) for batches of orthonormal frames."""
    M = np.concatenate([P, -Q], axis=-1)
    _, _, vt = np.linalg.svd(M)
    null = np.swapaxes(vt[..., -dim_out:, :], -1, -2)  # coefficients
    W = P @ null[..., : P.shape[-1], :]
    return _orthonormal(W)


def log_center_jacobian(model, x, basis) -> np.ndarray:
    """log |det Dg(x)| restricted to span(basis) (adapted metric)."""
    J = model.metric.conjugate(model.jacobian(x))
    W = J @ basis
    G = np.swapaxes(W, -1, -2) @ W
    return 0.5 * np.log(np.linalg.det(G))
