"""Lyapunov spectra (Benettin QR), centre-Jacobian Birkhoff sums along
continued centre bundles, grid quadrature of log Jac^c, and the centre-sum
comparison with the linearization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cones import choose_constants, intersect_subspaces


@dataclass(frozen=True)
class OrbitPlan:
    orbits: int = 32
    T: int = 10_000
    stride: int | None = None  # None: largest stride keeping block stretch < 1e8
    burn_in: int = 1000
    seed: int = 0
    blocks: int = 10

    def __post_init__(self):
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.T < 10 * (self.stride or 1):
            raise ValueError("T must be at least 10 strides")

    def resolved_stride(self, model) -> int:
        if self.stride is not None:
            return self.stride
        m = model.frame.moduli
        per_step = math.log(m.max() / m.min()) + 2 * model.certificates.get("c1_distance", 0.0)
        return max(1, int(math.log(1e8) // per_step))

    def initial_points(self, dim: int) -> np.ndarray:
        return np.random.default_rng(self.seed).random((self.orbits, dim))


@dataclass
class LyapunovReport:
    exponents: np.ndarray          # (orbits, d), descending
    center_birkhoff: np.ndarray | None  # (orbits,) or None
    linear_center_sum: float
    T: int
    orbits: int
    stride: int
    block_center: np.ndarray | None = None  # (orbits, blocks) block means of the centre sum
    rejected: int = 0
    quadrature: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return self.exponents.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        return self.exponents.std(axis=0, ddof=1) / math.sqrt(self.orbits) if self.orbits > 1 else np.zeros(self.exponents.shape[1])

    @property
    def qr_center(self) -> np.ndarray:
        """Sum of the two middle QR exponents per orbit."""
        return self.exponents[:, 1] + self.exponents[:, 2]

    @property
    def center_sum(self) -> float:
        c = self.center_birkhoff if self.center_birkhoff is not None else self.qr_center
        return float(c.mean())

    @property
    def center_stderr(self) -> float:
        c = self.center_birkhoff if self.center_birkhoff is not None else self.qr_center
        return float(c.std(ddof=1) / math.sqrt(len(c))) if len(c) > 1 else 0.0

    @property
    def gap(self) -> float:
        return self.center_sum - self.linear_center_sum

    @property
    def exponent_sum(self) -> np.ndarray:
        return self.exponents.sum(axis=1)

    def orbit_consistency(self, level: float = 0.01) -> dict:
        """Per-orbit centre sums agree with the pooled mean.

        Every orbit samples the same ergodic average, so the block variance is
        pooled over orbits (batch means over ``blocks`` sub-blocks). The
        largest deviation is compared with the two-sided normal quantile at
        family-wise level ``level`` over all orbits; the chi-square p-value of
        the spread is reported alongside.
        """
        if self.block_center is None:
            return {"consistent": None}
        from scipy.stats import chi2, norm

        b = self.block_center
        m, k = b.shape
        per = b.mean(axis=1)
        pooled = math.sqrt(b.var(axis=1, ddof=1).mean() / k)
        dev = per - per.mean()
        z = np.abs(dev) / (pooled * math.sqrt(1 - 1 / m))
        crit = float(norm.ppf(1 - level / (2 * m)))
        stat = float((dev**2).sum() / pooled**2)
        return {"consistent": bool(np.all(z < crit)), "max_z": float(z.max()), "z_critical": crit,
                "chi2_p": float(chi2.sf(stat, m - 1)),
                "positive_orbits": int(np.sum(per > self.linear_center_sum))}

    def summary(self) -> dict:
        out = {
            "T": self.T, "orbits": self.orbits, "stride": self.stride, "rejected": self.rejected,
            "exponents_mean": self.mean.tolist(), "exponents_stderr": self.stderr.tolist(),
            "exponent_sum_mean": float(self.exponent_sum.mean()),
            "exponent_sum_stderr": float(self.exponent_sum.std(ddof=1) / math.sqrt(self.orbits)) if self.orbits > 1 else 0.0,
            "center_sum": self.center_sum, "center_stderr": self.center_stderr,
            "qr_center_sum": float(self.qr_center.mean()),
            "linear_center_sum": self.linear_center_sum, "gap": self.gap,
        }
        out.update({f"consistency_{k}": v for k, v in self.orbit_consistency().items()})
        return out


def _positive_qr(M):
    Q, R = np.linalg.qr(M)
    s = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    s[s == 0] = 1.0
    return Q * s[..., None, :], np.abs(np.diagonal(R, axis1=-2, axis2=-1))


def _area_log(W):
    G = np.swapaxes(W, -1, -2) @ W
    return 0.5 * np.log(np.linalg.det(G))


def lyapunov_run(model, plan: OrbitPlan, splitting: str = "E", center: bool = True,
                 k_cs: int = 25, chunk: int = 2000) -> LyapunovReport:
    """One pass over all orbits: QR spectrum and, optionally, the Birkhoff
    average of log Jac^c along the continued centre bundle.

    E^cu is carried forward from the start of the burn-in; E^cs at x_t is
    obtained by pulling the cs-cone back from x_{t + k_cs}, processed in chunks.
    Bundles live in adapted coordinates; the QR product uses the raw Jacobian.
    """
    d = model.dim
    m = plan.orbits
    stride = plan.resolved_stride(model)
    cc = choose_constants(model.frame, splitting)
    E_cu, _ = cc.family("cu")
    E_cs, _ = cc.family("cs")
    dc = len(cc.c)
    x = plan.initial_points(d)
    conj = model.metric.conjugate

    Q = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    Qcu = np.zeros((m, d, len(E_cu)))
    for a, i in enumerate(E_cu):
        Qcu[:, i, a] = 1.0
    # burn-in: settle both the QR frame and E^cu. The QR product uses the raw
    # Jacobian (exponents do not depend on the metric); repeated conjugation
    # would add a systematic rounding drift to the exponent sum.
    for t in range(plan.burn_in):
        Jr = model.jacobian(x)
        Q, _ = _positive_qr(Jr @ Q)
        Qcu, _ = _positive_qr(conj(Jr) @ Qcu)
        x = model.step(x)

    logs = np.zeros((m, d))
    block_len = plan.T // plan.blocks
    block_c = np.zeros((m, plan.blocks))
    csum = np.zeros(m)
    rejected = np.zeros(m, dtype=bool)
    M = Q.copy()
    done = 0
    # look-ahead buffer of points and Jacobians for the cs pull-back
    buf_x = [x]
    buf_J = []
    buf_R = []
    while done < plan.T:
        n = min(chunk, plan.T - done)
        need = n + (k_cs if center else 0)
        while len(buf_J) < need:
            xt = buf_x[len(buf_J)]
            Jr = model.jacobian(xt)
            buf_R.append(Jr)
            buf_J.append(conj(Jr))
            buf_x.append(model.step(xt))
        Js = buf_J[:n]
        if center:
            # pull back E^cs from the end of the look-ahead window
            Qcs = np.zeros((m, d, len(E_cs)))
            for a, i in enumerate(E_cs):
                Qcs[:, i, a] = 1.0
            cs_frames = [None] * n
            for s in range(need - 1, -1, -1):
                Qcs, _ = _positive_qr(np.linalg.solve(buf_J[s], Qcs))
                if s < n:
                    cs_frames[s] = Qcs
        for t in range(n):
            J = Js[t]
            M = buf_R[t] @ M
            if (done + t + 1) % stride == 0:
                M, r = _positive_qr(M)
                logs += np.log(r)
            if center:
                Ec = intersect_subspaces(Qcu, cs_frames[t], dc)
                lj = _area_log(J @ Ec)
                csum += lj
                bi = (done + t) // block_len
                if bi < plan.blocks:
                    block_c[:, bi] += lj
                Qcu, _ = _positive_qr(J @ Qcu)
        # finite-value guard
        bad = ~np.all(np.isfinite(M.reshape(m, -1)), axis=1)
        if np.any(bad):
            rejected |= bad
            M[bad] = np.eye(d)
        del buf_J[:n]
        del buf_R[:n]
        del buf_x[:n]
        done += n
    M, r = _positive_qr(M)
    logs += np.log(r)
    exps = logs / plan.T
    keep = ~rejected
    lin = model.frame.center_log_sum(splitting)
    rep = LyapunovReport(
        exponents=exps[keep], center_birkhoff=(csum / plan.T)[keep] if center else None,
        linear_center_sum=lin, T=plan.T, orbits=int(keep.sum()), stride=stride,
        block_center=(block_c / block_len)[keep] if center else None, rejected=int(rejected.sum()))
    return rep


def qr_spectrum(model, plan: OrbitPlan) -> LyapunovReport:
    return lyapunov_run(model, plan, center=False)


def center_sum(model, plan: OrbitPlan, splitting: str = "E") -> LyapunovReport:
    return lyapunov_run(model, plan, splitting=splitting, center=True)


def center_bundle_grid(model, pts, splitting="E", k_cu: int = 20, k_cs: int = 20):
    from .cones import center_bundle
    return center_bundle(model, pts, k_cu, k_cs, splitting)


def jacobian_integral_quadrature(model, splitting: str = "E", resolution: int = 8, k: int = 20,
                                 batch: int = 16384, support=None) -> dict:
    """Midpoint-rule integral of log Jac^c over a uniform grid of T^d.

    Returns the integral, the linear value and, when ``support`` (a callable
    mask on points) is given, the contribution of the masked region.
    """
    from .cones import center_bundle

    d = model.dim
    axis = (np.arange(resolution) + 0.5) / resolution
    total = 0.0
    part = 0.0
    count = resolution**d
    for start in range(0, count, batch):
        idx = np.arange(start, min(count, start + batch))
        digits = np.stack(np.unravel_index(idx, (resolution,) * d), axis=-1)
        pts = axis[digits]
        Ec = center_bundle(model, pts, k, k, splitting)
        lj = _area_log(model.metric.conjugate(model.jacobian(pts)) @ Ec)
        total += lj.sum()
        if support is not None:
            mask = support(pts)
            part += (lj[mask] - model.frame.center_log_sum(splitting)).sum()
    lin = model.frame.center_log_sum(splitting)
    return {"resolution": resolution, "integral": total / count, "linear": lin,
            "gap": total / count - lin, "support_gap": part / count if support is not None else None}


def quadrature_convergence(model, splitting="E", resolution=8, k=20) -> dict:
    a = jacobian_integral_quadrature(model, splitting, resolution, k)
    b = jacobian_integral_quadrature(model, splitting, 2 * resolution, k)
    return {"coarse": a, "fine": b, "change": abs(b["integral"] - a["integral"]),
            "integral": b["integral"], "gap": b["gap"], "error": abs(b["integral"] - a["integral"])}


def theoremA_gap(model, plan: OrbitPlan, splitting: str = "E", angle_ok: bool | None = None,
                 report: LyapunovReport | None = None) -> dict:
    """Signed gap center_sum(model) - sum log beta_c with the non-absolute-continuity verdict.

    The verdict requires: equal centre dimensions (same splitting used for
    both), positive linear centre exponents, and the angle condition checked
    by the foliation probe (``angle_ok``); otherwise it is withheld.
    """
    rep = report if report is not None else center_sum(model, plan, splitting)
    frame = model.frame
    idx = list(frame.splitting(splitting)["c"])
    positive = bool(np.all(np.log(frame.moduli[idx]) > 0))
    gap, se = rep.gap, rep.center_stderr
    out = {"gap": gap, "stderr": se, "linear_center_sum": rep.linear_center_sum,
           "center_sum": rep.center_sum, "hypotheses": {"center_dims_equal": True,
                                                        "linear_center_positive": positive,
                                                        "angle_condition": angle_ok}}
    if angle_ok is None or not positive:
        out["verdict"] = "withheld: hypotheses unchecked"
    elif gap > 3 * se and angle_ok:
        out["verdict"] = "center foliation not absolutely continuous"
    else:
        out["verdict"] = "no conclusion"
    out["significant"] = bool(gap > 3 * se)
    return out


def gap_strength_sweep(build, strengths, resolution: int = 6, splitting: str = "E") -> dict:
    """Quadrature gap at each booster strength; ``build(s)`` returns a model.

    Monotone when the gap strictly increases along increasing strengths.
    """
    rows = []
    for s in strengths:
        q = jacobian_integral_quadrature(build(s), splitting, resolution)
        rows.append({"strength": float(s), "gap": q["gap"]})
    rows.sort(key=lambda r: r["strength"])
    gaps = [r["gap"] for r in rows]
    return {"rows": rows, "increasing": bool(all(b > a for a, b in zip(gaps, gaps[1:])))}


def finite_T_bias(model, plan: OrbitPlan, splitting: str = "E") -> dict:
    """Compare the centre sum at T and T/2 (reported, not corrected)."""
    full = center_sum(model, plan, splitting)
    half_plan = OrbitPlan(plan.orbits, plan.T // 2, plan.stride, plan.burn_in, plan.seed, plan.blocks)
    half = center_sum(model, half_plan, splitting)
    se = math.hypot(full.center_stderr, half.center_stderr)
    return {"T": plan.T, "center_sum_T": full.center_sum, "center_sum_half": half.center_sum,
            "difference": full.center_sum - half.center_sum, "combined_stderr": se}


def cocycle_consistency(model, x, v, T: int = 200, stride: int = 10) -> dict:
    """log||Dg^T v|| accumulated step by step vs summed over stride blocks.

    Both use renormalization; the chain rule makes them equal up to rounding.
    """
    x = np.asarray(x, dtype=float).copy()
    w = np.asarray(v, dtype=float) / np.linalg.norm(v)
    one = 0.0
    wb = w.copy()
    blocks = 0.0
    J_block = np.eye(model.dim)
    for t in range(T):
        J = model.jacobian(x[None])[0]
        w = J @ w
        n = np.linalg.norm(w)
        one += math.log(n)
        w /= n
        J_block = J @ J_block
        if (t + 1) % stride == 0 or t == T - 1:
            wb = J_block @ wb
            nb = np.linalg.norm(wb)
            blocks += math.log(nb)
            wb /= nb
            J_block = np.eye(model.dim)
        x = model.step(x[None])[0]
    return {"single_pass": one, "blocked": blocks, "difference": abs(one - blocks)}
