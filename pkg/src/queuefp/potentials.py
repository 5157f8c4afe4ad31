"""Gradient/rotational decomposition of a gridded 2D drift field.

Discretization (staggered, mimetic): the scalar potential ``u`` lives on
cell centers (nodes), the drift is compared on the links between adjacent
nodes, and the rotational potential ``w`` lives on cell corners.  With

    (G u)_link = forward difference of u along the link
    (C w)_xlink = d w / d y,   (C w)_ylink = -d w / d x

the reconstruction is ``f_link = -G u + C w``.

Two exact splits exist.  Solving for ``u`` first (zero-flux closure) leaves
a remainder that is a pure circulation, representable by ``w`` vanishing
on the boundary.  Solving for ``w`` first over all corners leaves a pure
gradient.  They differ by the harmonic part of the field, which the
observation window cannot attribute; the two are blended with the weight
that makes one of the parts as small as possible, so that a pure gradient
yields ``w = 0`` and a pure rotation yields a constant ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import ConfigError, NumericalError
from .grids import Grid2D


@dataclass(frozen=True)
class DriftPotentials:
    u: Grid2D
    w: Grid2D
    residual: float
    blend: float = 0.0


def _spacing(edges: np.ndarray, name: str) -> float:
    h = np.diff(edges)
    if len(h) < 2:
        raise ConfigError(f"{name}: need at least two cells")
    if not np.allclose(h, h[0], rtol=1e-9, atol=0):
        raise ConfigError(f"{name}: decomposition needs a uniform grid")
    return float(h[0])


class _Operators:
    def __init__(self, kx: int, ky: int, hx: float, hy: float):
        self.kx, self.ky, self.hx, self.hy = kx, ky, hx, hy
        n_nodes = kx * ky
        node = np.arange(n_nodes).reshape(kx, ky)
        vert = np.arange((kx + 1) * (ky + 1)).reshape(kx + 1, ky + 1)
        # x-links (i,j)-(i+1,j), then y-links (i,j)-(i,j+1)
        xi, xj = np.meshgrid(np.arange(kx - 1), np.arange(ky), indexing="ij")
        yi, yj = np.meshgrid(np.arange(kx), np.arange(ky - 1), indexing="ij")
        xi, xj, yi, yj = xi.ravel(), xj.ravel(), yi.ravel(), yj.ravel()
        nx, ny = len(xi), len(yi)
        self.n_xlinks, self.n_ylinks = nx, ny
        self.xlink_nodes = (node[xi, xj], node[xi + 1, xj])
        self.ylink_nodes = (node[yi, yj], node[yi, yj + 1])
        rows = np.arange(nx + ny)
        # gradient
        r = np.concatenate([rows[:nx], rows[:nx], rows[nx:], rows[nx:]])
        c = np.concatenate([node[xi, xj], node[xi + 1, xj], node[yi, yj], node[yi, yj + 1]])
        v = np.concatenate([np.full(nx, -1 / hx), np.full(nx, 1 / hx),
                            np.full(ny, -1 / hy), np.full(ny, 1 / hy)])
        self.G = sp.csr_matrix((v, (r, c)), shape=(nx + ny, n_nodes))
        # curl: x-link between nodes i,i+1 sits on the corner column i+1
        r = np.concatenate([rows[:nx], rows[:nx], rows[nx:], rows[nx:]])
        c = np.concatenate([vert[xi + 1, xj + 1], vert[xi + 1, xj],
                            vert[yi + 1, yj + 1], vert[yi, yj + 1]])
        v = np.concatenate([np.full(nx, 1 / hy), np.full(nx, -1 / hy),
                            np.full(ny, -1 / hx), np.full(ny, 1 / hx)])
        self.C = sp.csr_matrix((v, (r, c)), shape=(nx + ny, (kx + 1) * (ky + 1)))
        corner = np.zeros((kx + 1, ky + 1), dtype=bool)
        corner[[0, 0, -1, -1], [0, -1, 0, -1]] = True
        interior = np.zeros((kx + 1, ky + 1), dtype=bool)
        interior[1:-1, 1:-1] = True
        self.used_vertices = np.flatnonzero(~corner.ravel())
        self.interior_vertices = np.flatnonzero(interior.ravel())

    def links(self, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
        fxr, fyr = fx.ravel(), fy.ravel()
        a, b = self.xlink_nodes
        c, d = self.ylink_nodes
        return np.concatenate([0.5 * (fxr[a] + fxr[b]), 0.5 * (fyr[c] + fyr[d])])

    def link_mask(self, node_ok: np.ndarray) -> np.ndarray:
        ok = node_ok.ravel()
        a, b = self.xlink_nodes
        c, d = self.ylink_nodes
        return np.concatenate([ok[a] & ok[b], ok[c] & ok[d]])


def _least_squares(A: sp.csr_matrix, rhs: np.ndarray, cols: np.ndarray, tol: float,
                   what: str, pin: bool = True, max_refine: int = 3) -> np.ndarray:
    """Least squares over the columns ``cols`` of ``A``.

    With ``pin`` the first unknown is held at zero, removing the constant
    null vector of the normal matrix.  A few steps of iterative refinement are
    applied and the residual history is kept for error reporting.
    """
    sub = A[:, cols].tocsc()
    N = (sub.T @ sub).tocsc()
    b = sub.T @ rhs
    keep = np.arange(1 if pin else 0, len(cols))
    Nk = N[keep][:, keep].tocsc()
    bk = b[keep]
    scale = max(np.linalg.norm(bk), 1e-300)
    z = np.zeros(len(keep))
    history = []
    for _ in range(max_refine + 1):
        r = bk - Nk @ z
        rel = float(np.linalg.norm(r) / scale)
        history.append(rel)
        if rel <= tol:
            break
        z = z + spsolve(Nk, r)
    else:
        r = bk - Nk @ z
        history.append(float(np.linalg.norm(r) / scale))
        if history[-1] > tol:
            raise NumericalError(f"{what}: linear solve did not converge", history)
    out = np.zeros(A.shape[1])
    out[cols[keep]] = z
    return out


def decompose_drift(fx: Grid2D, fy: Grid2D, tol: float = 1e-10,
                    gauge: tuple[float, float] = (1.0, 1.0)) -> DriftPotentials:
    """Split ``(fx, fy)`` into ``-grad u + curl w``.

    Undefined cells are filled with their nearest defined neighbour for the
    solve and excluded from the reported residual.  ``u`` is returned on the
    input cells, ``w`` on cells centered at the input cell corners; both are
    shifted so that their bilinear interpolant vanishes at ``gauge``.
    """
    if fx.values.shape != fy.values.shape or fx.values.ndim != 2:
        raise ConfigError("fx and fy must be 2D grids of the same shape")
    if not (np.array_equal(fx.x_edges, fy.x_edges) and np.array_equal(fx.y_edges, fy.y_edges)):
        raise ConfigError("fx and fy must share a grid")
    hx = _spacing(fx.x_edges, "x axis")
    hy = _spacing(fx.y_edges, "y axis")
    kx, ky = fx.values.shape
    node_ok = fx.defined & fy.defined
    if not np.any(node_ok):
        raise ConfigError("drift field has no defined cells")
    gx = fx.with_values(np.where(node_ok, fx.values, np.nan)).infilled().values
    gy = fy.with_values(np.where(node_ok, fy.values, np.nan)).infilled().values

    ops = _Operators(kx, ky, hx, hy)
    f = ops.links(gx, gy)
    all_nodes = np.arange(kx * ky)

    # split A: potential first, circulation from the remainder (w = 0 on boundary)
    u_a = _least_squares(ops.G, -f, all_nodes, tol, "scalar potential")
    w_a = _least_squares(ops.C, f + ops.G @ u_a, ops.interior_vertices, tol, "vector potential",
                         pin=False)
    # split B: circulation first over every corner, potential from the remainder
    w_b = _least_squares(ops.C, f, ops.used_vertices, tol, "vector potential")
    u_b = _least_squares(ops.G, -(f - ops.C @ w_b), all_nodes, tol, "scalar potential")

    ga, gb = ops.G @ u_a, ops.G @ u_b
    ca, cb = ops.C @ w_a, ops.C @ w_b
    t = _blend_weight(ga, gb, ca, cb)
    u = (1 - t) * u_a + t * u_b
    w = (1 - t) * w_a + t * w_b

    recon = -ops.G @ u + ops.C @ w
    mask = ops.link_mask(node_ok)
    ref = np.linalg.norm(f[mask])
    err = np.linalg.norm((recon - f)[mask])
    residual = float(err / ref) if ref > 0 else float(err)

    w_grid = w.reshape(kx + 1, ky + 1)
    # corners carry no information; extend bilinearly
    for a, b, da, db in ((0, 0, 1, 1), (0, ky, 1, -1), (kx, 0, -1, 1), (kx, ky, -1, -1)):
        w_grid[a, b] = w_grid[a + da, b] + w_grid[a, b + db] - w_grid[a + da, b + db]
    u_grid = fx.with_values(u.reshape(kx, ky))
    wx = np.concatenate([[fx.x_edges[0] - hx / 2], fx.x_edges + hx / 2])
    wy = np.concatenate([[fx.y_edges[0] - hy / 2], fx.y_edges + hy / 2])
    w_counts = np.zeros((kx + 1, ky + 1), dtype=np.int64)
    w_grid = Grid2D(wx, wy, w_grid, w_counts)
    if gauge is not None:
        u_grid = u_grid.with_values(u_grid.values - float(u_grid(*gauge)))
        w_grid = w_grid.with_values(w_grid.values - float(w_grid(*gauge)))
    return DriftPotentials(u=u_grid, w=w_grid, residual=residual, blend=t)


def _blend_weight(ga, gb, ca, cb) -> float:
    """t in [0, 1] minimising |G u_t|^2 |C w_t|^2 (smallest t on ties)."""
    def quad(a, b):
        d = b - a
        return np.array([d @ d, 2 * (a @ d), a @ a])  # coefficients in t

    pg = quad(ga, gb)
    pc = quad(ca, cb)
    prod = np.polymul(pg, pc)
    cands = [0.0, 1.0]
    for r in np.roots(np.polyder(prod)) if np.any(prod[:-1]) else []:
        if abs(r.imag) < 1e-12 and 0.0 < r.real < 1.0:
            cands.append(float(r.real))
    vals = [np.polyval(prod, c) for c in cands]
    best = min(vals)
    scale = max(abs(v) for v in vals) or 1.0
    return min(c for c, v in zip(cands, vals) if v <= best + 1e-12 * scale)


def reconstruct(pot: DriftPotentials) -> tuple[np.ndarray, np.ndarray]:
    """Link values of ``-grad u + curl w`` as (x-links (K-1, K), y-links (K, K-1))."""
    u, w = pot.u.values, pot.w.values
    hx = float(pot.u.x_edges[1] - pot.u.x_edges[0])
    hy = float(pot.u.y_edges[1] - pot.u.y_edges[0])
    gx = -(u[1:, :] - u[:-1, :]) / hx + (w[1:-1, 1:] - w[1:-1, :-1]) / hy
    gy = -(u[:, 1:] - u[:, :-1]) / hy - (w[1:, 1:-1] - w[:-1, 1:-1]) / hx
    return gx, gy


@dataclass(frozen=True)
class RidgeProfile:
    r: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    counts: np.ndarray
    anisotropy: float

    @property
    def r_max(self) -> float:
        return float(self.r[np.nanargmax(self.mean)])


def ridge_diagnostic(u: Grid2D, r_width: float | None = None) -> RidgeProfile:
    """Profile of ``u`` along r = x + y and the share of variance across iso-r lines.

    On a square uniform grid the iso-r groups are the anti-diagonals; in
    general cells are grouped by r in bins of width ``r_width``.
    """
    xc, yc = u.x_centers, u.y_centers
    R = xc[:, None] + yc[None, :]
    ok = u.defined
    if u.filled is not None:
        ok = ok & ~u.filled
    vals = u.values[ok]
    if vals.size == 0:
        raise ConfigError("potential has no defined cells")
    hx, hy = np.diff(u.x_edges), np.diff(u.y_edges)
    square = (np.allclose(hx, hx[0]) and np.allclose(hy, hy[0]) and np.isclose(hx[0], hy[0])
              and r_width is None)
    if square:
        ii, jj = np.indices(u.values.shape)
        key = (ii + jj)[ok]
    else:
        width = r_width or float(hx.mean())
        key = np.floor((R[ok] - R.min()) / width).astype(int)
    groups, inv = np.unique(key, return_inverse=True)
    cnt = np.bincount(inv)
    mean = np.bincount(inv, weights=vals) / cnt
    dev = vals - mean[inv]
    std = np.sqrt(np.bincount(inv, weights=dev * dev) / cnt)
    rmean = np.bincount(inv, weights=R[ok]) / cnt
    total = np.sum((vals - vals.mean()) ** 2)
    anis = float(np.sum(dev * dev) / total) if total > 0 else 0.0
    return RidgeProfile(r=rmean, mean=mean, std=std, counts=cnt, anisotropy=anis)
