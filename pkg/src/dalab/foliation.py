"""Centre-leaf patches in the universal cover and their geometry.

Leaf points over a parameter node c in E^c_A(z) are found by two-sided
shooting: the transverse adapted coordinates (stable and unstable slots) of
x = z + V(c, a) are solved so that the unstable part of g^K(x) - g^K(z) and
the stable part of g^{-K'}(x) - g^{-K'}(z) vanish. The depth is raised one
step at a time so every Newton correction stays in the linear regime.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cones import center_bundle, choose_constants, intersect_subspaces
from .torus import wrap


class CorrectorDivergence(RuntimeError):
    pass


class PatchTooSmall(ValueError):
    pass


def _index_sets(frame, splitting):
    sp = frame.splitting(splitting)
    c, s, u = tuple(sp["c"]), tuple(sp["s"]), tuple(sp["u"])
    return c, s, u, tuple(sorted(s + u))


def shooting_depths(frame, splitting="E", tol=1e-13, extra=4, cap=60) -> tuple[int, int]:
    m = frame.moduli
    c, s, u, _ = _index_sets(frame, splitting)
    fwd = m[list(c)].max() / m[list(u)].min()
    bwd = m[list(s)].max() / m[list(c)].min()
    kf = min(cap, int(math.ceil(math.log(tol) / math.log(fwd))) + extra)
    kb = min(cap, int(math.ceil(math.log(tol) / math.log(bwd))) + extra)
    return kf, kb


def _base_orbits(model, z, kf, kb):
    zt = wrap(np.asarray(z, dtype=float))
    fw, bw = [zt], [zt]
    for _ in range(kf):
        fw.append(model.step(fw[-1]))
    for _ in range(kb):
        bw.append(model.step_back(bw[-1]))
    Ainv = model.Ainv
    psi_f = [model.psi(p) for p in fw]
    phi_b = [model.inverse(p) - p @ Ainv.T for p in bw]
    return fw, bw, psi_f, phi_b


def _run(model, base, disp, K, forward, T0):
    """Difference orbit of length K and its tangent map, starting from disp."""
    pts, vals = base
    D = disp.copy()
    T = T0.copy()
    Af = model.Af if forward else model.Ainv
    for k in range(K):
        x = pts[k] + D
        if forward:
            T = model.jacobian(x) @ T
            D = D @ Af.T + model.psi(x) - vals[k]
        else:
            T = model.inverse_jacobian(x) @ T
            D = D @ Af.T + (model.inverse(x) - x @ Af.T) - vals[k]
    return D, T


def leaf_points(model, z, params, splitting="E", depths=None, newton=3, tol=1e-12):
    """Leaf points, transverse offsets and tangent frames over parameter nodes.

    params: (m, dc) adapted centre coordinates relative to z. Returns a dict
    with points (lifted, Euclidean), offsets (adapted transverse coords, in the
    order of the sorted stable+unstable indices), tangents (m, d, dc adapted,
    columns dx/dc) and the final Newton step size.
    """
    frame = model.frame
    c, s, u, t = _index_sets(frame, splitting)
    params = np.atleast_2d(np.asarray(params, dtype=float))
    m, d = len(params), model.dim
    kf, kb = depths if depths is not None else shooting_depths(frame, splitting)
    V, Vi = model.metric.basis, model.metric.inverse
    if model.is_linear:
        # leaves of the linear map are the affine planes z + E^c_A
        tang = np.zeros((m, d, len(c)))
        for j, ci in enumerate(c):
            tang[:, ci, j] = 1.0
        return {"points": np.asarray(z, dtype=float) + params @ V[:, list(c)].T,
                "offsets": np.zeros((m, len(t))), "tangents": tang, "last_step": 0.0,
                "depths": (kf, kb), "center": c, "transverse": t}
    fw, bw, psi_f, phi_b = _base_orbits(model, z, kf, kb)
    a = np.zeros((m, len(t)))
    T0 = np.broadcast_to(V, (m, d, d))
    last = np.inf
    for K in range(1, max(kf, kb) + 1):
        Kf, Kb = min(K, kf), min(K, kb)
        final = K == max(kf, kb)
        for it in range(newton if not final else 4 * newton):
            y = np.zeros((m, d))
            y[:, list(c)] = params
            y[:, list(t)] = a
            d0 = y @ V.T
            Df, Tf = _run(model, (fw, psi_f), d0, Kf, True, T0)
            Db, Tb = _run(model, (bw, phi_b), d0, Kb, False, T0)
            F = np.concatenate([(Df @ Vi.T)[:, list(u)], (Db @ Vi.T)[:, list(s)]], axis=1)
            G = np.concatenate([(Vi @ Tf)[:, list(u), :], (Vi @ Tb)[:, list(s), :]], axis=1)
            scale = np.linalg.norm(G, axis=2, keepdims=True)
            Gs = G / scale
            step = np.linalg.solve(Gs[:, :, list(t)], -(F / scale[..., 0])[..., None])[..., 0]
            a = a + step
            last = float(np.max(np.abs(step))) if m else 0.0
            if not np.all(np.isfinite(a)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(a), axis=1))[0])
                raise CorrectorDivergence(f"leaf corrector diverged at node {params[bad].tolist()}")
            if last < tol:
                break
    # tangent by implicit differentiation at the converged point
    da = -np.linalg.solve(Gs[:, :, list(t)], Gs[:, :, list(c)])
    tang = np.zeros((m, d, len(c)))
    for j, ci in enumerate(c):
        tang[:, ci, j] = 1.0
    tang[:, list(t), :] = da
    y = np.zeros((m, d))
    y[:, list(c)] = params
    y[:, list(t)] = a
    pts = np.asarray(z, dtype=float) + y @ V.T
    return {"points": pts, "offsets": a, "tangents": tang, "last_step": last,
            "depths": (kf, kb), "center": c, "transverse": t}


@dataclass
class LeafPatch:
    base: np.ndarray
    splitting: str
    center: tuple
    transverse: tuple
    params: np.ndarray
    points: np.ndarray
    offsets: np.ndarray
    tangents: np.ndarray
    edge: float
    shape: tuple | None = None
    method: str = "shoot"
    residual: float = 0.0
    last_step: float = 0.0
    model: object = field(default=None, repr=False)

    @property
    def dc(self) -> int:
        return len(self.center)

    @property
    def cell_volume(self) -> float:
        if self.shape is None:
            raise ValueError("scattered patch has no cells")
        return float(np.prod([self.edge / n for n in self.shape]))

    @property
    def area_factors(self) -> np.ndarray:
        G = np.swapaxes(self.tangents, 1, 2) @ self.tangents
        return np.sqrt(np.linalg.det(G))

    def adapted(self) -> np.ndarray:
        """Adapted coordinates of points relative to the base."""
        return (self.points - self.base) @ self.model.metric.inverse.T

    def summary(self) -> dict:
        return {"edge": self.edge, "nodes": len(self.params), "shape": self.shape, "method": self.method,
                "residual": self.residual, "last_step": self.last_step,
                "max_offset": float(np.max(np.linalg.norm(self.offsets, axis=1))) if len(self.offsets) else 0.0}


def _grid_params(edge, resolution, dc):
    h = edge / resolution
    axis = -edge / 2 + h * (np.arange(resolution) + 0.5)
    mesh = np.meshgrid(*([axis] * dc), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _finish(model, z, params, res, splitting, edge, shape, method):
    y = (res["points"] - z) @ model.metric.inverse.T
    residual = float(np.max(np.abs(y[:, list(res["center"])] - params))) if len(params) else 0.0
    return LeafPatch(np.asarray(z, dtype=float), splitting, res["center"], res["transverse"], params,
                     res["points"], res["offsets"], res["tangents"], edge, shape, method, residual,
                     res.get("last_step", 0.0), model)


def integrate_leaf_patch(model, z, edge: float, resolution: int, splitting: str = "E",
                         method: str = "shoot", batch: int = 4096, **kw) -> LeafPatch:
    """Cell-centred grid of leaf points over the cube of side ``edge`` centred at z.

    method "shoot" solves each node independently; method "continue" is the
    predictor-corrector alternative that integrates the continued centre
    bundle along grid lines (used as a cross-check on small patches).
    """
    dc = len(model.frame.splitting(splitting)["c"])
    params = _grid_params(edge, resolution, dc)
    shape = (resolution,) * dc
    if method == "shoot":
        parts = [leaf_points(model, z, params[i:i + batch], splitting, **kw)
                 for i in range(0, len(params), batch)]
        res = {k: np.concatenate([p[k] for p in parts]) for k in ("points", "offsets", "tangents")}
        res.update(center=parts[0]["center"], transverse=parts[0]["transverse"],
                   last_step=max(p["last_step"] for p in parts))
    elif method == "continue":
        res = _continue_patch(model, z, params, shape, splitting, **kw)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _finish(model, z, params, res, splitting, edge, shape, method)


def sample_leaf(model, z, diameter: float, count: int, splitting: str = "E", seed: int = 0,
                batch: int = 4096, **kw) -> LeafPatch:
    """Scattered leaf points over uniform random parameters in a cube of side ``diameter``."""
    dc = len(model.frame.splitting(splitting)["c"])
    rng = np.random.default_rng(seed)
    params = (rng.random((count, dc)) - 0.5) * diameter
    params[0] = 0.0
    parts = [leaf_points(model, z, params[i:i + batch], splitting, **kw) for i in range(0, count, batch)]
    res = {k: np.concatenate([p[k] for p in parts]) for k in ("points", "offsets", "tangents")}
    res.update(center=parts[0]["center"], transverse=parts[0]["transverse"],
               last_step=max(p["last_step"] for p in parts))
    return _finish(model, z, params, res, splitting, diameter, None, "shoot")


def _graph_slope(model, x, splitting, k, c, t):
    """Slope L (transverse over centre rows) of the continued centre bundle at x."""
    W = center_bundle(model, x, k, k, splitting)
    Wc = W[:, list(c), :]
    Wt = W[:, list(t), :]
    return Wt @ np.linalg.inv(Wc)


def _continue_patch(model, z, params, shape, splitting, k: int = 24, substeps: int = 2):
    """Predictor-corrector continuation: RK4 along the first axis from the
    centre node, then along the remaining axes. The corrector keeps the
    parameter fixed (projection along (E^c_A)^perp), so only the transverse
    coordinates are integrated."""
    frame = model.frame
    c, s, u, t = _index_sets(frame, splitting)
    V = model.metric.basis
    dc = len(c)
    if dc > 2:
        raise NotImplementedError("continuation supports one- and two-dimensional centres")
    z = np.asarray(z, dtype=float)

    def slope_at(cpar, a):
        y = np.zeros((len(cpar), model.dim))
        y[:, list(c)] = cpar
        y[:, list(t)] = a
        return _graph_slope(model, z + y @ V.T, splitting, k, c, t)

    def integrate(c0, a0, c1, n):
        """RK4 from parameters c0 to c1 (straight segment), n steps."""
        cc, aa = c0.copy(), a0.copy()
        dcv = (c1 - c0) / n
        for _ in range(n):
            k1 = slope_at(cc, aa) @ dcv[..., None]
            k2 = slope_at(cc + dcv / 2, aa + k1[..., 0] / 2) @ dcv[..., None]
            k3 = slope_at(cc + dcv / 2, aa + k2[..., 0] / 2) @ dcv[..., None]
            k4 = slope_at(cc + dcv, aa + k3[..., 0]) @ dcv[..., None]
            aa = aa + (k1 + 2 * k2 + 2 * k3 + k4)[..., 0] / 6
            cc = cc + dcv
        return aa

    grid = params.reshape(shape + (dc,))
    offs = np.zeros(shape + (len(t),))
    res0 = shape[0]
    # spine along axis 0 through the parameter origin
    if dc == 1:
        spine_c = grid
    else:
        j0 = shape[1] // 2
        spine_c = grid[:, j0, :]
    mid = res0 // 2
    spine = np.zeros((res0, len(t)))
    # start: from the origin (a = 0) to the nearest spine node
    origin = np.zeros((1, dc))
    start_c = spine_c[mid:mid + 1].copy()
    if dc == 2:
        start_c = start_c.copy()
    spine[mid] = integrate(origin, np.zeros((1, len(t))), start_c, substeps)[0]
    for i in range(mid + 1, res0):
        spine[i] = integrate(spine_c[i - 1:i], spine[i - 1:i], spine_c[i:i + 1], substeps)[0]
    for i in range(mid - 1, -1, -1):
        spine[i] = integrate(spine_c[i + 1:i + 2], spine[i + 1:i + 2], spine_c[i:i + 1], substeps)[0]
    if dc == 1:
        offs[:] = spine
    else:
        j0 = shape[1] // 2
        offs[:, j0] = spine
        for j in range(j0 + 1, shape[1]):
            offs[:, j] = integrate(grid[:, j - 1], offs[:, j - 1], grid[:, j], substeps)
        for j in range(j0 - 1, -1, -1):
            offs[:, j] = integrate(grid[:, j + 1], offs[:, j + 1], grid[:, j], substeps)
    a = offs.reshape(-1, len(t))
    y = np.zeros((len(params), model.dim))
    y[:, list(c)] = params
    y[:, list(t)] = a
    L = slope_at(params, a)
    tang = np.zeros((len(params), model.dim, dc))
    for j, ci in enumerate(c):
        tang[:, ci, j] = 1.0
    tang[:, list(t), :] = L
    return {"points": z + y @ V.T, "offsets": a, "tangents": tang, "center": c, "transverse": t,
            "last_step": 0.0}


# ---------------------------------------------------------------------------
# geometry scans


def angle_scan(patch: LeafPatch, margin_deg: float = 5.0) -> dict:
    """Minimal principal angle between leaf tangent planes and (E^c_A)^perp.

    Computed in adapted coordinates, where (E^c_A)^perp is the span of the
    transverse coordinate axes.
    """
    Q, _ = np.linalg.qr(patch.tangents)
    # cosine of the smallest angle = largest singular value of the transverse block
    cos = np.linalg.norm(Q[:, list(patch.transverse), :], ord=2, axis=(1, 2))
    ang = np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))
    i = int(np.argmin(ang))
    return {"alpha_min_deg": float(ang[i]), "node": patch.params[i].tolist(),
            "enabled": bool(ang[i] > margin_deg), "margin_deg": margin_deg}


def shadowing_check(patch: LeafPatch) -> dict:
    """Largest distance (adapted) from the leaf points to the plane z + E^c_A."""
    r = np.linalg.norm(patch.offsets, axis=1)
    i = int(np.argmax(r))
    return {"R_c": float(r[i]), "node": patch.params[i].tolist(), "diameter": patch.edge}


def _pairs(n, count, rng):
    i = rng.integers(0, n, count)
    j = rng.integers(0, n, count)
    keep = i != j
    return i[keep], j[keep]


def leaf_path_length(model, z, c0, c1, splitting="E", step: float = 0.1, **kw) -> tuple[float, float]:
    """In-leaf length of the leaf curve over the straight parameter segment
    c0 -> c1 (composite Simpson on |dx/dt|, adapted metric), and the chord."""
    c0, c1 = np.asarray(c0, dtype=float), np.asarray(c1, dtype=float)
    seg = np.linalg.norm(c1 - c0)
    n = max(2, int(math.ceil(seg / step)))
    n += n % 2
    ts = np.linspace(0.0, 1.0, n + 1)
    params = c0 + ts[:, None] * (c1 - c0)
    res = leaf_points(model, z, params, splitting, **kw)
    speed = np.linalg.norm(res["tangents"] @ (c1 - c0), axis=1)
    w = np.ones(n + 1)
    w[1:-1:2], w[2:-1:2] = 4, 2
    length = float(w @ speed / (3 * n))
    y = (res["points"][-1] - res["points"][0]) @ model.metric.inverse.T
    return length, float(np.linalg.norm(y))


@dataclass
class QuasiIsometryReport:
    Q: float
    max_ratio: float
    R_c: float
    alpha_min_deg: float
    projection_table: list
    pairs: int
    diameter: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fit_quasi_isometry(leaf_lengths, chords) -> dict:
    """Least Q with d_W <= Q d + Q over the pairs, and the raw max ratio d_W / d."""
    lw, ch = np.asarray(leaf_lengths, float), np.asarray(chords, float)
    Q = max(1.0, float(np.max(lw / (ch + 1.0)))) if len(lw) else 1.0
    ratio = float(np.max(lw / np.maximum(ch, 1e-300))) if len(lw) else 1.0
    return {"Q": Q, "max_ratio": ratio}


def quasi_isometry_scan(patch: LeafPatch, pairs: int = 48, seed: int = 0, step: float = 0.1,
                        thresholds=(1.0, 2.0, 5.0, 10.0, 20.0)) -> QuasiIsometryReport:
    """Q from in-leaf path lengths between random node pairs, plus R_c,
    the minimal angle and the projection-ratio table of the same patch."""
    model = patch.model
    rng = np.random.default_rng(seed)
    i, j = _pairs(len(patch.params), pairs, rng)
    lw, ch = [], []
    for a, b in zip(i, j):
        length, chord = leaf_path_length(model, patch.base, patch.params[a], patch.params[b],
                                         patch.splitting, step)
        lw.append(length)
        ch.append(chord)
    fit = fit_quasi_isometry(lw, ch)
    return QuasiIsometryReport(fit["Q"], fit["max_ratio"], shadowing_check(patch)["R_c"],
                               angle_scan(patch)["alpha_min_deg"],
                               projection_asymptotics(patch, thresholds), len(lw), patch.edge)


def projection_asymptotics(patch: LeafPatch, thresholds, max_pairs: int = 2_000_000, seed: int = 0) -> list:
    """For each M: max over point pairs with ||x - y|| > M of
    ||pi^perp(x - y)|| / ||pi^c(x - y)|| (adapted metric)."""
    n = len(patch.params)
    if n * (n - 1) // 2 <= max_pairs:
        i, j = np.triu_indices(n, 1)
    else:
        i, j = _pairs(n, max_pairs, np.random.default_rng(seed))
    dc = patch.params[i] - patch.params[j]
    dt = patch.offsets[i] - patch.offsets[j]
    nc = np.linalg.norm(dc, axis=1)
    nt = np.linalg.norm(dt, axis=1)
    dist = np.hypot(nc, nt)
    ratio = nt / np.maximum(nc, 1e-300)
    table = []
    for M in thresholds:
        sel = dist > M
        table.append({"M": float(M), "pairs": int(sel.sum()),
                      "ratio": float(ratio[sel].max()) if sel.any() else None})
    return table


# ---------------------------------------------------------------------------
# volume growth


def fidelity_horizon(model, tol: float = 1e-3) -> int:
    """Iterates for which a double-precision orbit stays within tol of the true one."""
    lip = model.frame.moduli.max() * (1.0 + model.certificates.get("c1_distance", 0.0))
    return max(1, int(math.log(tol / np.finfo(float).eps) // math.log(lip)))


def center_log_jacobians(model, x0, n: int, splitting: str = "E", k_cu: int = 20, k_cs: int = 25):
    """log Jac^c(g^j x0) for j < n, with E^c continued at every orbit point."""
    from .cones import orbit

    cc = choose_constants(model.frame, splitting)
    E_cu, _ = cc.family("cu")
    E_cs, _ = cc.family("cs")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    m, d = x0.shape
    conj = model.metric.conjugate

    def orth(M):
        Q, R = np.linalg.qr(M)
        return Q

    back = orbit(model, wrap(x0), k_cu, backward=True)
    Qcu = np.zeros((m, d, len(E_cu)))
    for a, i in enumerate(E_cu):
        Qcu[:, i, a] = 1.0
    for t in range(k_cu, 0, -1):
        Qcu = orth(conj(model.jacobian(back[t])) @ Qcu)
    pts = [wrap(x0)]
    for _ in range(n + k_cs):
        pts.append(model.step(pts[-1]))
    Js = [conj(model.jacobian(p)) for p in pts[:n + k_cs]]
    Qcs = np.zeros((m, d, len(E_cs)))
    for a, i in enumerate(E_cs):
        Qcs[:, i, a] = 1.0
    cs = [None] * n
    for t in range(n + k_cs - 1, -1, -1):
        Qcs = orth(np.linalg.solve(Js[t], Qcs))
        if t < n:
            cs[t] = Qcs
    out = np.zeros((m, n))
    frames = []
    for j in range(n):
        Ec = intersect_subspaces(Qcu, cs[j], len(cc.c))
        W = Js[j] @ Ec
        out[:, j] = 0.5 * np.log(np.linalg.det(np.swapaxes(W, 1, 2) @ W))
        if j == 0:
            frames.append(Ec)
        Qcu = orth(Js[j] @ Qcu)
    return out, frames[0] if frames else None


def _difference_orbit(model, z, disp, n):
    """g~^k(z + disp) - g~^k(z) for k = 0..n (lifted, Euclidean)."""
    zt = wrap(np.asarray(z, dtype=float))
    out = [disp.copy()]
    D = disp.copy()
    for _ in range(n):
        x = zt + D
        D = D @ model.Af.T + model.psi(x) - model.psi(zt)
        zt = model.step(zt)
        out.append(D.copy())
    return out


@dataclass
class GrowthReport:
    n: int
    measured: float
    upper: float
    lower: float
    containment: bool | None
    pseudo_orbit: bool = False

    def row(self) -> list:
        return [self.n, self.measured, self.upper, self.lower, self.containment]


@dataclass
class GrowthStudy:
    reports: list
    C0: float
    eps: float
    q: int | None
    alpha: float
    M: float
    N: int
    center_sum: float
    volume_R: float
    crossing: int | None
    horizon: int
    tangent_deviation: float
    lower_ok: bool
    upper_ok: bool
    alpha_leaf: float = 0.0
    alpha_ambient: float = 0.0
    alpha_source: str = "ambient"

    def summary(self) -> dict:
        return {"C0": self.C0, "eps": self.eps, "q": self.q, "alpha": self.alpha, "alpha_leaf": self.alpha_leaf,
                "alpha_ambient": self.alpha_ambient, "alpha_source": self.alpha_source,
                "M": self.M, "N": self.N,
                "center_sum": self.center_sum, "volume_R": self.volume_R, "crossing": self.crossing,
                "horizon": self.horizon, "tangent_deviation": self.tangent_deviation,
                "lower_ok": self.lower_ok, "upper_ok": self.upper_ok,
                "rows": [r.row() for r in self.reports]}


def choose_q(gap: float) -> int | None:
    """Smallest integer q with gap > log(1 + 1/q)."""
    if not gap > 0:
        return None
    q = int(math.floor(1.0 / math.expm1(gap))) + 1
    while math.log1p(1.0 / q) >= gap:
        q += 1
    return q


def crossing_index(C0: float, alpha: float, q: int | None, eps: float, dc: int) -> int | None:
    """First n with (1+1/q)^n alpha > C0 (1+eps)^(n dc), or None if the bounds never cross."""
    if q is None or alpha <= 0:
        return None
    rate = math.log1p(1.0 / q) - dc * math.log1p(eps)
    if rate <= 0:
        return None
    n = max(1, int(math.floor(math.log(C0 / alpha) / rate)) + 1)
    while n > 1 and math.log(alpha) + (n - 1) * rate > math.log(C0):
        n -= 1
    return n


def volume_growth_probe(model, patch: LeafPatch, n_max: int, eps: float | None = None,
                        q: int | None = None, gap: float | None = None, N: int | None = None,
                        M: float | None = None, alpha_source: str = "ambient",
                        ambient_samples: int = 8192, seed: int = 0,
                        k_cu: int = 20, k_cs: int = 25) -> GrowthStudy:
    """Leaf volume of g~^n(pi^{-1}(R)) against the two growth bounds.

    Volume is the patch quadrature of the pushed leaf area, area factor times
    exp(sum of log Jac^c along the orbit). Z_{q,N} is the set of points whose
    Jacobian exceeds (1+1/q)^k e^{k Sigma} for every k in [N, n_max] (N defaults
    to n_max). Its proportion is measured twice: among uniform torus points
    (alpha_ambient) and by leaf volume on the patch (alpha_leaf). The lower
    bound uses ``alpha_source``; "ambient" is the proportion an absolutely
    continuous centre foliation would carry onto some leaf. C0 is the largest
    singular value of d(pi^{-1}) raised to the centre dimension. ``gap``
    selects q when q is not given; eps defaults to 1/8 of the largest value
    allowed by (1+eps)^dc < 1 + 1/q.
    """
    if alpha_source not in ("ambient", "leaf"):
        raise ValueError("alpha_source must be 'ambient' or 'leaf'")
    if N is None:
        N = n_max
    if patch.shape is None:
        raise ValueError("volume growth needs a gridded patch")
    if M is not None and patch.edge < M:
        raise PatchTooSmall(f"edge {patch.edge} is below the large-scale comparison threshold M = {M}")
    frame = model.frame
    dc = patch.dc
    Sigma = frame.center_log_sum(patch.splitting)
    if q is None and gap is not None:
        q = choose_q(gap)
    if eps is None:
        eps = 0.125 * ((1.0 + 1.0 / q) ** (1.0 / dc) - 1.0) if q else 0.0
    cellv = patch.cell_volume
    volR = patch.edge ** dc
    J0 = patch.area_factors
    sv = np.linalg.norm(patch.tangents, ord=2, axis=(1, 2))
    C0 = float(sv.max() ** dc)
    if model.is_linear:
        logs = np.full((len(patch.points), n_max), Sigma)
        tangent_dev = 0.0
    else:
        logs, Ec0 = center_log_jacobians(model, patch.points, n_max, patch.splitting, k_cu, k_cs)
        Qt, _ = np.linalg.qr(patch.tangents)
        sv2 = np.linalg.svd(np.swapaxes(Qt, 1, 2) @ Ec0, compute_uv=False)
        tangent_dev = float(np.degrees(np.arccos(np.clip(sv2.min(), -1, 1))))
    S = np.cumsum(logs, axis=1)  # S[:, k-1] = log Jac of g^k
    k = np.arange(1, n_max + 1)
    w = J0 * cellv
    vol0 = float(w.sum())
    def in_Z(S_):
        excess = S_ - k * Sigma - k * math.log1p(1.0 / q)
        return np.all(excess[:, N - 1:] > 0, axis=1)

    if q is not None:
        alpha_leaf = float(w[in_Z(S)].sum() / vol0)
        xa = np.random.default_rng(seed).random((ambient_samples, model.dim))
        La, _ = center_log_jacobians(model, xa, n_max, patch.splitting, k_cu, k_cs)
        alpha_amb = float(np.mean(in_Z(np.cumsum(La, axis=1))))
        alpha = alpha_amb if alpha_source == "ambient" else alpha_leaf
    else:
        alpha = alpha_leaf = alpha_amb = 1.0 if model.is_linear else 0.0
    horizon = fidelity_horizon(model)
    # containment of the pushed patch in the inflated linear image, recentred at the centre node
    centre = int(np.argmin(np.linalg.norm(patch.params, axis=1)))
    disp = patch.points - patch.base
    diffs = _difference_orbit(model, patch.base, disp, n_max) if not model.is_linear else None
    beta_c = frame.moduli[list(patch.center)]
    reports = []
    lower_ok = upper_ok = True
    for n in range(0, n_max + 1):
        meas = vol0 if n == 0 else float((w * np.exp(S[:, n - 1])).sum())
        upper = C0 * (1 + eps) ** (n * dc) * math.exp(n * Sigma) * volR
        lower = ((1 + 1.0 / q) ** n if q else 1.0) * math.exp(n * Sigma) * alpha * volR
        if n >= 1:
            if diffs is None:
                contained = True
            else:
                y = diffs[n] @ model.metric.inverse.T
                yc = y[:, list(patch.center)] - y[centre, list(patch.center)]
                box = (1 + eps) ** n * beta_c ** n * patch.edge / 2
                contained = bool(np.all(np.abs(yc) <= box))
        else:
            contained = None
        rep = GrowthReport(n, meas, upper, lower, contained, pseudo_orbit=n > horizon and not model.is_linear)
        if n >= N:
            lower_ok &= meas >= lower * (1 - 1e-12)
            upper_ok &= meas <= upper * (1 + 1e-12)
        reports.append(rep)
    cross = crossing_index(C0, alpha, q, eps, dc)
    return GrowthStudy(reports, C0, eps, q, alpha, patch.edge, N, Sigma, volR, cross, horizon,
                       tangent_dev, bool(lower_ok), bool(upper_ok), alpha_leaf, alpha_amb, alpha_source)


# ---------------------------------------------------------------------------
# large-scale comparison and segment growth


def sup_displacement(model, samples: int = 20000, seed: int = 0) -> float:
    """Sampled sup ||g~ - A~|| (Euclidean)."""
    rng = np.random.default_rng(seed)
    pts = np.concatenate([rng.random((samples, model.dim)), model.chain.probe_points(rng, samples)]) \
        if model.factors else rng.random((16, model.dim))
    return float(np.max(np.linalg.norm(model.psi(pts), axis=1)))


def large_scale_ratio(model, n: int, C: float, directions: int = 64, seed: int = 0,
                      M0: float = 1.0, max_doublings: int = 40) -> dict:
    """Least M (doubling search) beyond which ||g~^n x - g~^n y|| / ||A^n (x - y)|| stays in (1/C, C)."""
    if not C > 1:
        raise ValueError("C must exceed 1")
    rng = np.random.default_rng(seed)
    d = model.dim
    x = rng.random((directions, d))
    dirs = rng.normal(size=(directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    An = np.linalg.matrix_power(model.Af, n)

    def ok(M):
        for scale in (1.0, 1.5, 2.0):
            disp = M * scale * dirs
            Dn = _difference_orbit_pair(model, x, disp, n)
            r = np.linalg.norm(Dn, axis=1) / np.linalg.norm(disp @ An.T, axis=1)
            if not np.all((r > 1 / C) & (r < C)):
                return False
        return True

    K = 0.0
    psi_sup = sup_displacement(model, seed=seed)
    Anorm = 1.0
    for k in range(n):
        K += np.linalg.norm(np.linalg.matrix_power(model.Af, n - 1 - k), 2) * psi_sup
    bound = 2 * K * np.linalg.norm(np.linalg.inv(An), 2) * C / (C - 1)
    if model.is_linear:
        return {"M": 0.0, "bound": 0.0, "n": n, "C": C}
    M = M0 / 2
    for _ in range(max_doublings):
        if ok(M):
            return {"M": M, "bound": float(bound), "n": n, "C": C}
        M *= 2
    return {"M": None, "bound": float(bound), "n": n, "C": C}


def _difference_orbit_pair(model, x, disp, n):
    """g~^n(x + disp) - g~^n(x) for torus points x, lifted differences."""
    xt = wrap(x)
    D = disp.copy()
    for _ in range(n):
        D = D @ model.Af.T + model.psi(xt + D) - model.psi(xt)
        xt = model.step(xt)
    return D


def mane_growth_tracker(model, x0, direction, k0: float, n_max: int, length: float = 1e-6,
                        nodes: int = 65, spacing: float | None = None) -> dict:
    """Length of the image of a short segment through x0 along ``direction``.

    The expansion hypothesis is measured along the orbit of x0 (||Dg^j v|| >=
    e^{j/k0} for every j); if it fails the verdict is withheld. Nodes are
    re-distributed by arc length after each step by inserting parameter
    midpoints where neighbouring images drift apart.
    """
    x0 = np.asarray(x0, dtype=float)
    v = np.asarray(direction, dtype=float)
    v = v / np.linalg.norm(v)
    # hypothesis along the orbit of x0
    xt = wrap(x0)
    w = v.copy()
    logs = []
    for j in range(1, n_max + 1):
        w = model.jacobian(xt) @ w
        xt = model.step(xt)
        logs.append(math.log(np.linalg.norm(w)))
    hyp = all(lg >= j / k0 - 1e-12 for j, lg in zip(range(1, n_max + 1), logs))
    s = np.linspace(0.0, 1.0, nodes)
    cap = spacing if spacing is not None else 0.05

    def image(svals, j):
        D = _difference_orbit_pair(model, x0[None, :], (svals[:, None] * length) * v[None, :], j) \
            if j else (svals[:, None] * length) * v[None, :]
        return D

    lengths = [length]
    for j in range(1, n_max + 1):
        for _ in range(12):
            P = image(s, j)
            seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
            if seg.max() <= cap or len(s) > 20000:
                break
            idx = np.flatnonzero(seg > cap)
            s = np.sort(np.concatenate([s, 0.5 * (s[idx] + s[idx + 1])]))
        lengths.append(float(seg.sum()))
    alpha = lengths[0]
    bound_ok = all(L >= alpha * math.exp(j / k0) * (1 - 1e-9) for j, L in enumerate(lengths))
    return {"hypothesis": hyp, "lengths": lengths, "alpha": alpha, "k0": k0,
            "verdict": (bool(bound_ok) if hyp else None),
            "ratios": [lengths[j + 1] / lengths[j] for j in range(n_max)]}


# ---------------------------------------------------------------------------
# synthetic controls


def spiral_control(diameters=(10.0, 20.0, 40.0), pitch: float = 1.0, samples: int = 4000) -> list:
    """Archimedean spiral r = pitch * theta / (2 pi) viewed as a leaf: the fitted
    Q grows in proportion to the diameter."""
    out = []
    for D in diameters:
        tmax = 2 * math.pi * (D / 2) / pitch
        th = np.linspace(0.0, tmax, samples)
        r = pitch * th / (2 * math.pi)
        P = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])
        i = np.arange(0, samples, 7)
        a, b = np.meshgrid(i, i, indexing="ij")
        a, b = a.ravel(), b.ravel()
        lw = np.abs(arc[a] - arc[b])
        ch = np.linalg.norm(P[a] - P[b], axis=1)
        fit = fit_quasi_isometry(lw, ch)
        out.append({"diameter": D, "Q": fit["Q"], "flagged": False})
    Qs = [o["Q"] for o in out]
    grows = all(b > 1.5 * a for a, b in zip(Qs, Qs[1:]))
    for o in out:
        o["flagged"] = bool(grows)
    return out


def tilted_patch(frame, angle_deg: float, splitting: str = "E", nodes: int = 16) -> LeafPatch:
    """Flat synthetic patch whose tangent plane makes ``angle_deg`` with (E^c_A)^perp."""
    c, s, u, t = _index_sets(frame, splitting)
    d = frame.matrix.dim
    th = math.radians(angle_deg)
    tang = np.zeros((nodes, d, len(c)))
    for j, ci in enumerate(c):
        tang[:, ci, j] = math.sin(th)
        tang[:, t[j % len(t)], j] = math.cos(th)
    params = np.zeros((nodes, len(c)))
    return LeafPatch(np.zeros(d), splitting, c, t, params, np.zeros((nodes, d)),
                     np.zeros((nodes, len(t))), tang, 1.0)
