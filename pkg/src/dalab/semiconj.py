"""Semiconjugacy h = Id + u with h o g = A o h, and diagnostics built on it.

In eigen coordinates w = V^{-1} u and p = V^{-1} psi (psi = g~ - A~) the
equation splits into Lambda w - w o g = p. Expanding components are summed
forward, w_e = sum_k lambda^{-k-1} p_e(g^k x); contracting components
backward, w_s = -sum_{k>=1} lambda^{k-1} p_s(g^{-k} x). One sweep adds one
term of each series; after m sweeps the residual is lambda^{-m} p(g^m x), so
the sweep contraction is max(beta_s, 1 / beta_c1).

The field is evaluated pointwise along the computed orbit; the stored grid is
a cache for output and interpolation diagnostics.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .torus import wrap


class NonConvergence(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def _split(frame):
    lam = np.real(frame.values)
    expanding = np.abs(lam) > 1
    return lam, expanding


def _series(model, x, m_fwd: int, m_bwd: int, with_shift: bool = False):
    """Partial sums of the expanding (forward) and contracting (backward) series.

    Returns w(x) in eigen coordinates; with ``with_shift`` also w(g x) built
    from the same computed orbit (the orbit of step(x) is the shifted orbit of
    x), and p(x).
    """
    frame = model.frame
    lam, exp_mask = _split(frame)
    Vi = model.metric.inverse
    x = wrap(np.atleast_2d(np.asarray(x, dtype=float)))
    n, d = x.shape
    w = np.zeros((n, d))
    w1 = np.zeros((n, d)) if with_shift else None
    p0 = None
    xk = x
    for k in range(m_fwd + (1 if with_shift else 0)):
        y = model.forward(xk)
        pk = (y - xk @ model.Af.T) @ Vi.T
        if k == 0:
            p0 = pk
        if k < m_fwd:
            w[:, exp_mask] += lam[exp_mask] ** (-k - 1.0) * pk[:, exp_mask]
        if with_shift and k >= 1:
            w1[:, exp_mask] += lam[exp_mask] ** (-(k - 1) - 1.0) * pk[:, exp_mask]
        xk = y - np.floor(y)
    if (~exp_mask).any():
        con = ~exp_mask
        # backward orbit of x; for g x the backward orbit is g x, x, g^{-1} x, ...
        xk = x
        for k in range(1, m_bwd + 1):
            xb = model.inverse(xk)
            xb = xb - np.floor(xb)
            pb = (model.forward(xb) - xb @ model.Af.T) @ Vi.T
            w[:, con] -= lam[con] ** (k - 1.0) * pb[:, con]
            if with_shift:
                if k == 1:
                    w1[:, con] -= p0[:, con]
                w1[:, con] -= lam[con] ** float(k) * pb[:, con] if k < m_bwd else 0.0
            xk = xb
    if p0 is None:
        y = model.forward(x)
        p0 = (y - x @ model.Af.T) @ Vi.T
    return (w, w1, p0) if with_shift else w


def _residual(model, x, m_fwd, m_bwd):
    """sup-norm (Euclidean coordinates) of psi + u o g - A u at the points x."""
    lam = np.real(model.frame.values)
    w, w1, p = _series(model, x, m_fwd, m_bwd, with_shift=True)
    r = (w1 + p - lam * w) @ model.metric.basis.T
    return np.max(np.abs(r), axis=1)


def _grid_points(n, d, offset=0.5):
    axis = (np.arange(n) + offset) / n
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _chunks(n_total, size):
    for s in range(0, n_total, size):
        yield s, min(n_total, s + size)


def _grid_chunk(n, d, s, e, offset=0.0):
    idx = np.arange(s, e)
    digits = np.stack(np.unravel_index(idx, (n,) * d), axis=-1)
    return (digits + offset) / n


@dataclass
class ConjugacyField:
    model: object = field(repr=False)
    grid: int
    values: np.ndarray          # (grid^d, d) Euclidean displacement u at grid nodes i / grid
    terms_forward: int
    terms_backward: int
    residual: float             # sup over the verification grid
    solve_residual: float       # sup over the solve grid
    trace: list                 # sup residual after each sweep (solve grid)
    predicted_rate: float
    observed_rate: float
    verify_grid: int

    @property
    def iterations(self) -> int:
        return self.terms_forward

    def evaluate(self, x) -> np.ndarray:
        """u(x) (Euclidean) by the orbit series."""
        w = _series(self.model, x, self.terms_forward, self.terms_backward)
        return w @ self.model.metric.basis.T

    def h(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.evaluate(x)

    def interpolate(self, x) -> np.ndarray:
        """Multilinear interpolation of the stored grid (periodic)."""
        x = wrap(np.atleast_2d(np.asarray(x, dtype=float)))
        n, d = self.grid, x.shape[1]
        g = x * n
        i0 = np.floor(g).astype(int)
        t = g - i0
        vals = self.values.reshape((n,) * d + (d,))
        out = np.zeros((len(x), d))
        for corner in range(2 ** d):
            bits = [(corner >> j) & 1 for j in range(d)]
            wgt = np.ones(len(x))
            idx = []
            for j, b in enumerate(bits):
                wgt = wgt * (t[:, j] if b else 1 - t[:, j])
                idx.append((i0[:, j] + b) % n)
            out += wgt[:, None] * vals[tuple(idx)]
        return out

    def interpolation_residual(self, samples: int = 4096, seed: int = 0) -> float:
        """sup |psi + u_I o g - A u_I| with the interpolated field u_I (diagnostic)."""
        rng = np.random.default_rng(seed)
        x = rng.random((samples, self.model.dim))
        y = self.model.forward(x)
        r = (y - x @ self.model.Af.T) + self.interpolate(y) - self.interpolate(x) @ self.model.Af.T
        return float(np.max(np.abs(r)))

    def header(self) -> dict:
        d = self.model.dim
        return {"grid": self.grid, "dim": d, "dtype": "float64", "order": "C",
                "shape": [d] + [self.grid] * d, "layout": "component-major, then grid indices",
                "nodes": "i / grid", "residual": self.residual, "solve_residual": self.solve_residual,
                "iterations": self.iterations, "terms_backward": self.terms_backward,
                "verify_grid": self.verify_grid, "predicted_rate": self.predicted_rate,
                "observed_rate": self.observed_rate, "model": self.model.name}

    def write(self, path: str) -> tuple[str, str]:
        d = self.model.dim
        arr = np.ascontiguousarray(self.values.T.reshape((d,) + (self.grid,) * d), dtype="<f8")
        with open(path, "wb") as fh:
            fh.write(arr.tobytes())
        hpath = path + ".json"
        with open(hpath, "w") as fh:
            json.dump(self.header(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path, hpath


def read_field(path: str):
    with open(path + ".json") as fh:
        header = json.load(fh)
    arr = np.fromfile(path, dtype="<f8").reshape(header["shape"])
    return header, arr


def predicted_contraction(frame) -> float:
    lam, exp_mask = _split(frame)
    a = np.abs(lam)
    rates = list(1.0 / a[exp_mask]) + list(a[~exp_mask])
    return float(max(rates))


def solve_semiconjugacy(model, grid: int = 32, tol: float = 1e-6, max_sweeps: int = 400,
                        verify: bool = True, chunk: int = 1 << 18) -> ConjugacyField:
    """Sweep the orbit series on the solve grid until the sup residual is below
    tol / 4, then check the residual on the 2x finer verification grid."""
    if not model.certificates.get("homotopic_to_linear", True):
        raise ValueError("model is not homotopic to its linear part")
    d = model.dim
    frame = model.frame
    lam, exp_mask = _split(frame)
    Vi = model.metric.inverse
    V = model.metric.basis
    total = grid ** d
    rate = predicted_contraction(frame)
    if model.is_linear:
        vals = np.zeros((total, d))
        return ConjugacyField(model, grid, vals, 0, 0, 0.0, 0.0, [0.0], rate, 0.0, 2 * grid)
    # state per node: forward orbit point, backward orbit point, partial sums
    X = _grid_chunk(grid, d, 0, total)
    Xf = X.copy()
    Xb = X.copy()
    W = np.zeros((total, d))
    W1 = np.zeros((total, d))  # series at g x from the shifted orbit
    y = model.forward(Xf)
    P0 = (y - Xf @ model.Af.T) @ Vi.T
    Xf = y - np.floor(y)       # orbit index 1
    Pb_prev = P0.copy()
    con = ~exp_mask
    trace = []
    stable_open = True
    m_bwd = 0
    m = 0
    while m < max_sweeps:
        # forward term m of w(x) uses p(x_m); term m of w(g x) uses p(x_{m+1})
        if m == 0:
            Pm = P0
        else:
            Pm = Pm_next
        y = model.forward(Xf)
        Pm_next = (y - Xf @ model.Af.T) @ Vi.T
        Xf = y - np.floor(y)
        W[:, exp_mask] += lam[exp_mask] ** (-m - 1.0) * Pm[:, exp_mask]
        W1[:, exp_mask] += lam[exp_mask] ** (-m - 1.0) * Pm_next[:, exp_mask]
        if con.any() and stable_open:
            # backward term m+1 for x and the matching term for g x
            xb = model.inverse(Xb)
            Xb = xb - np.floor(xb)
            Pb = (model.forward(Xb) - Xb @ model.Af.T) @ Vi.T
            k = m + 1
            W[:, con] -= lam[con] ** (k - 1.0) * Pb[:, con]
            W1[:, con] -= lam[con] ** (k - 1.0) * Pb_prev[:, con]
            Pb_prev = Pb
            m_bwd = k
            # the stable series converges at rate beta_s; stop adding terms once negligible
            stable_open = float(np.max(np.abs(lam[con] ** float(k) * Pb[:, con]))) > tol * 1e-3
        m += 1
        R = (W1 + P0 - lam * W) @ V.T
        res = float(np.max(np.abs(R)))
        trace.append(res)
        if not np.isfinite(res):
            raise NonConvergence("semiconjugacy sweeps produced non-finite values", trace)
        if res < tol / 4:
            break
    else:
        raise NonConvergence(f"residual {trace[-1]:.3g} above {tol:.3g} after {max_sweeps} sweeps", trace)
    # observed contraction: geometric mean of the last half of the trace
    tail = [r for r in trace[len(trace) // 2:] if r > 0]
    obs = float(math.exp((math.log(tail[-1]) - math.log(tail[0])) / (len(tail) - 1))) if len(tail) > 1 else 0.0
    values = W @ V.T
    vres = float("nan")
    if verify:
        vg = 2 * grid
        vres = 0.0
        for s, e in _chunks(vg ** d, chunk):
            pts = _grid_chunk(vg, d, s, e, offset=0.0)
            vres = max(vres, float(np.max(_residual(model, pts, m, m_bwd))))
    return ConjugacyField(model, grid, values, m, m_bwd, vres, trace[-1], trace, rate, obs, 2 * grid)


def sup_displacement(field_: ConjugacyField) -> float:
    return float(np.max(np.abs(field_.values)))


def coverage_check(field_: ConjugacyField, fine: int = 12, coarse: int = 4) -> dict:
    """Degree-one surrogate: h of a fine grid meets every cell of a coarse grid."""
    d = field_.model.dim
    pts = _grid_points(fine, d)
    img = wrap(field_.h(pts))
    cells = np.floor(img * coarse).astype(int) % coarse
    flat = np.ravel_multi_index(cells.T, (coarse,) * d)
    hit = np.unique(flat)
    return {"covered": int(len(hit)), "cells": coarse ** d, "pass": bool(len(hit) == coarse ** d)}


def leaf_correspondence_check(field_: ConjugacyField, patch, tol: float | None = None) -> dict:
    """Images of leaf nodes under h must lie in one affine E^c_A plane.

    Deviation is the sup distance (adapted transverse coordinates) of h(x) from
    the best such plane; the control maps the nodes through the identity.
    """
    model = field_.model
    Vi = model.metric.inverse
    t = list(patch.transverse)
    hx = patch.base + (patch.points - patch.base) + field_.evaluate(patch.points)
    yt = ((hx - patch.base) @ Vi.T)[:, t]
    dev = float(np.max(np.linalg.norm(yt - yt.mean(axis=0), axis=1)))
    xt = ((patch.points - patch.base) @ Vi.T)[:, t]
    ctrl = float(np.max(np.linalg.norm(xt - xt.mean(axis=0), axis=1)))
    tol = 10 * field_.residual if tol is None else tol
    return {"deviation": dev, "control_deviation": ctrl, "tol": tol, "pass": bool(dev < tol),
            "separation": ctrl / dev if dev > 0 else math.inf}


def plaque_mass_probe(field_: ConjugacyField, box_center, box_size: float, samples: int = 200_000,
                      bins: int = 8, plaques: int = 16, seed: int = 0, min_count: int = 100,
                      splitting: str = "E") -> dict:
    """Volume distribution along centre plaques inside a box.

    Uniform samples x in the box are grouped into plaques by the transverse
    adapted coordinates of h(x); inside each plaque the centre coordinates of
    x are histogrammed. Reports per-plaque max bin mass and total-variation
    distance from uniform.
    """
    model = field_.model
    frame = model.frame
    sp = frame.splitting(splitting)
    c, t = list(sp["c"]), sorted(list(sp["s"]) + list(sp["u"]))
    rng = np.random.default_rng(seed)
    V, Vi = model.metric.basis, model.metric.inverse
    # box in adapted coordinates around the centre
    y = (rng.random((samples, model.dim)) - 0.5) * box_size
    x = np.asarray(box_center, dtype=float) + y @ V.T
    hy = (x + field_.evaluate(x) - np.asarray(box_center)) @ Vi.T
    tv = hy[:, t]
    lo, hi = tv.min(axis=0), tv.max(axis=0)
    pid = np.floor((tv - lo) / (hi - lo + 1e-300) * plaques).clip(0, plaques - 1).astype(int)
    key = np.ravel_multi_index(pid.T, (plaques,) * len(t))
    cy = y[:, c]
    cb = np.floor((cy / box_size + 0.5) * bins).clip(0, bins - 1).astype(int)
    ckey = np.ravel_multi_index(cb.T, (bins,) * len(c))
    nb = bins ** len(c)
    rows, excluded = [], 0
    for k in np.unique(key):
        sel = key == k
        cnt = int(sel.sum())
        if cnt < min_count:
            excluded += 1
            continue
        hist = np.bincount(ckey[sel], minlength=nb) / cnt
        rows.append({"plaque_id": int(k), "n_samples": cnt, "max_bin_mass": float(hist.max()),
                     "tv_distance": float(0.5 * np.abs(hist - 1.0 / nb).sum())})
    tvs = np.array([r["tv_distance"] for r in rows]) if rows else np.zeros(0)
    mbs = np.array([r["max_bin_mass"] for r in rows]) if rows else np.zeros(0)
    return {"rows": rows, "excluded": excluded, "bins": nb,
            "tv_mean": float(tvs.mean()) if len(tvs) else None,
            "tv_median": float(np.median(tvs)) if len(tvs) else None,
            "max_bin_mean": float(mbs.mean()) if len(mbs) else None,
            "uniform_mass": 1.0 / nb}


def load_field(model, path: str) -> ConjugacyField:
    """Rebuild a solved field from its binary file and JSON header."""
    header, arr = read_field(path)
    d = header["dim"]
    values = arr.reshape(d, -1).T.copy()
    return ConjugacyField(model, header["grid"], values, header["iterations"], header["terms_backward"],
                          header["residual"], header["solve_residual"], [], header["predicted_rate"],
                          header["observed_rate"], header["verify_grid"])
