"""EPnP pose estimation with a known focal length, plus a RANSAC wrapper.

EPnP writes every 3D point as a barycentric combination of four control
points (three when the points are coplanar), recovers the control points in
camera coordinates from the null space of a ``2n x 12`` linear system, and
fixes the null-space coefficients from the preserved inter-control-point
distances. The pose follows from an absolute-orientation fit, optionally
polished by Levenberg-Marquardt on the reprojection error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConfiguration, NoConsensus, TooFewPoints
from .geometry import ImageSize, Rotation, axis_angle_to_matrix, matrix_to_axis_angle

PLANAR_RATIO = 1e-3


@dataclass(frozen=True)
class PnPResult:
    rotation: Rotation
    translation: np.ndarray
    reprojection_error: float  # mean over the points used for the fit, in px
    inliers: Optional[np.ndarray] = None

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix


@dataclass(frozen=True)
class RansacConfig:
    threshold_px: float = 8.0
    max_iterations: int = 1000
    confidence: float = 0.99
    sample_size: int = 4
    seed: int = 0


def reprojection_errors(points3d, points2d, R, T, f, image_size: ImageSize) -> np.ndarray:
    """Per-point pixel error; points at or behind the camera get ``inf``."""
    cam = np.asarray(points3d, float) @ R.T + T
    w, h = image_size
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * cam[:, 0] / z + w / 2.0
        v = f * cam[:, 1] / z + h / 2.0
    err = np.hypot(u - points2d[:, 0], v - points2d[:, 1])
    return np.where(z > 0, err, np.inf)


def _control_points(Pw: np.ndarray):
    c0 = Pw.mean(axis=0)
    A = Pw - c0
    evals, evecs = np.linalg.eigh(A.T @ A)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    sv = np.sqrt(np.maximum(evals, 0.0))
    if sv[0] < 1e-12 or sv[1] / sv[0] < 1e-9:
        raise DegenerateConfiguration("3D points are coincident or collinear")
    planar = sv[2] / sv[0] < PLANAR_RATIO
    n_axes = 2 if planar else 3
    scale = np.sqrt(evals[:n_axes] / len(Pw))
    ctrl = np.vstack([c0, c0 + (evecs[:, :n_axes] * scale).T])
    basis = (ctrl[1:] - c0).T  # 3 x n_axes
    coeffs, *_ = np.linalg.lstsq(basis, A.T, rcond=None)
    alphas = np.column_stack([1.0 - coeffs.sum(axis=0), coeffs.T])
    return ctrl, alphas, planar


def _build_m(alphas, points2d, f, image_size):
    n, nc = alphas.shape
    w, h = image_size
    M = np.zeros((2 * n, 3 * nc))
    du = w / 2.0 - points2d[:, 0]
    dv = h / 2.0 - points2d[:, 1]
    for j in range(nc):
        M[0::2, 3 * j] = alphas[:, j] * f
        M[0::2, 3 * j + 2] = alphas[:, j] * du
        M[1::2, 3 * j + 1] = alphas[:, j] * f
        M[1::2, 3 * j + 2] = alphas[:, j] * dv
    return M


def _pair_terms(V: np.ndarray, ctrl: np.ndarray):
    """Differences of null-space vectors and squared control distances per control-point pair."""
    nc = ctrl.shape[0]
    pairs = list(itertools.combinations(range(nc), 2))
    Vr = V.T.reshape(V.shape[1], nc, 3)  # (N, nc, 3)
    dv = np.stack([Vr[:, a] - Vr[:, b] for a, b in pairs], axis=0)  # (pairs, N, 3)
    rho = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in pairs])
    G = np.einsum("pkx,plx->pkl", dv, dv)  # Gram matrix of differences per pair
    return G, rho


def _initial_betas(G, rho, N):
    npairs = G.shape[0]
    if N == 1:
        g = G[:, 0, 0]
        b2 = float(g @ rho / (g @ g))
        return np.array([math.sqrt(abs(b2))])
    idx = [(k, l) for k in range(N) for l in range(k, N)]
    if len(idx) > npairs:
        return None
    L = np.column_stack([G[:, k, l] * (1.0 if k == l else 2.0) for k, l in idx])
    sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
    prod = dict(zip(idx, sol))
    b = np.zeros(N)
    b[0] = math.sqrt(abs(prod[(0, 0)]))
    for k in range(1, N):
        b[k] = math.sqrt(abs(prod[(k, k)])) * (np.sign(prod[(0, k)]) or 1.0)
    return b


def _initial_betas_first_row(G, rho, N):
    """Approximation that only solves for the products ``b0 * bk``; usable for any N."""
    L = np.column_stack([G[:, 0, k] * (1.0 if k == 0 else 2.0) for k in range(N)])
    sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
    if sol[0] < 0:
        sol = -sol
    b0 = math.sqrt(abs(sol[0]))
    if b0 < 1e-300:
        return None
    return np.r_[b0, sol[1:] / b0]


def _gauss_newton_betas(G, rho, beta, iters=10):
    for _ in range(iters):
        r = np.einsum("k,pkl,l->p", beta, G, beta) - rho
        J = 2.0 * np.einsum("pkl,l->pk", G, beta)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        beta = beta + step
        if np.linalg.norm(step) < 1e-15 * max(1.0, np.linalg.norm(beta)):
            break
    return beta


def _gauss_newton_betas_batch(G, rho, B, iters=10):
    """Gauss-Newton on the control-point distance equations for a stack of starts ``B``."""
    for _ in range(iters):
        r = np.einsum("sk,pkl,sl->sp", B, G, B) - rho
        J = 2.0 * np.einsum("pkl,sl->spk", G, B)
        step = -np.einsum("skp,sp->sk", np.linalg.pinv(J), r)
        B = B + step
        if np.abs(step).max() < 1e-15 * max(1.0, np.abs(B).max()):
            break
    return B


def _absolute_orientation(Pw, Pc):
    mw, mc = Pw.mean(axis=0), Pc.mean(axis=0)
    H = (Pc - mc).T @ (Pw - mw)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mc - R @ mw


def _pose_from_betas(beta, V, alphas, Pw):
    nc = alphas.shape[1]
    ctrl_c = (V[:, : beta.size] @ beta).reshape(nc, 3)
    Pc = alphas @ ctrl_c
    if np.mean(Pc[:, 2]) < 0:
        Pc = -Pc
    return _absolute_orientation(Pw, Pc)


def refine_pose(points3d, points2d, R, T, f, image_size, iters=50):
    """Levenberg-Marquardt on the summed squared reprojection error over (axis-angle, T)."""
    x = np.concatenate([matrix_to_axis_angle(R), T])

    def residuals(x):
        Rx = axis_angle_to_matrix(x[:3])
        cam = points3d @ Rx.T + x[3:]
        z = cam[:, 2]
        if np.any(z <= 0):
            return None
        w, h = image_size
        u = f * cam[:, 0] / z + w / 2.0 - points2d[:, 0]
        v = f * cam[:, 1] / z + h / 2.0 - points2d[:, 1]
        return np.concatenate([u, v])

    r = residuals(x)
    if r is None:
        return R, T
    cost = r @ r
    lam = 1e-3
    for _ in range(iters):
        J = np.empty((r.size, 6))
        for k in range(6):
            eps = 1e-7 * max(1.0, abs(x[k]))
            xk = x.copy()
            xk[k] += eps
            rk = residuals(xk)
            if rk is None:
                return axis_angle_to_matrix(x[:3]), x[3:]
            J[:, k] = (rk - r) / eps
        A = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -g)
            xn = x + step
            rn = residuals(xn)
            if rn is not None and rn @ rn < cost:
                x, r, cost = xn, rn, rn @ rn
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved or np.linalg.norm(step) < 1e-14 * max(1.0, np.linalg.norm(x)):
            break
    return axis_angle_to_matrix(x[:3]), x[3:]


def _validate(points3d, points2d):
    Pw = np.asarray(points3d, dtype=float).reshape(-1, 3)
    pi = np.asarray(points2d, dtype=float).reshape(-1, 2)
    if Pw.shape[0] != pi.shape[0]:
        raise ValueError("points3d and points2d must have the same length")
    if Pw.shape[0] < 4:
        raise TooFewPoints(f"EPnP needs at least 4 correspondences, got {Pw.shape[0]}")
    if np.unique(np.round(Pw, 12), axis=0).shape[0] < 4:
        raise DegenerateConfiguration("fewer than 4 distinct 3D points")
    return Pw, pi


def epnp(points3d, points2d, f_fixed: float, image_size: ImageSize, refine: bool = True) -> PnPResult:
    """Camera pose from ``n >= 4`` 2D-3D correspondences with focal length ``f_fixed``."""
    Pw, pi = _validate(points3d, points2d)
    ctrl, alphas, planar = _control_points(Pw)
    M = _build_m(alphas, pi, f_fixed, image_size)
    _, evecs = np.linalg.eigh(M.T @ M)
    n_max = 3 if planar else 4
    V = evecs[:, :n_max]
    G, rho = _pair_terms(V, ctrl)

    starts = [_initial_betas(G[:, :N, :N], rho, N) for N in range(1, 4)]
    starts.append(_initial_betas_first_row(G, rho, n_max))
    B = []
    for b in starts:
        if b is None:
            continue
        # the square roots leave the relative signs ambiguous; try every flip
        for signs in itertools.product((1.0, -1.0), repeat=b.size - 1):
            row = np.zeros(n_max)
            row[: b.size] = b * np.r_[1.0, signs]
            B.append(row)
    B = _gauss_newton_betas_batch(G, rho, np.array(B))
    # many starts converge to the same solution (up to an overall sign)
    B = B * np.where(B[:, :1] < 0, -1.0, 1.0)
    B = np.unique(np.round(B, 10), axis=0)
    best = None
    for beta in B:
        R, T = _pose_from_betas(beta, V, alphas, Pw)
        err = reprojection_errors(Pw, pi, R, T, f_fixed, image_size).mean()
        if best is None or err < best[0]:
            best = (err, R, T)
    if best is None or not np.isfinite(best[0]):
        raise DegenerateConfiguration("no EPnP solution places the points in front of the camera")
    _, R, T = best
    if refine:
        R, T = refine_pose(Pw, pi, R, T, f_fixed, image_size)
    err = float(reprojection_errors(Pw, pi, R, T, f_fixed, image_size).mean())
    return PnPResult(Rotation.from_matrix(R), np.asarray(T, dtype=float), err)


def _required_iterations(inlier_ratio, sample_size, confidence):
    if inlier_ratio >= 1.0:
        return 0
    p_good = inlier_ratio**sample_size
    if p_good <= 0:
        return math.inf
    return math.log(1 - confidence) / math.log(1 - p_good)


def epnp_ransac(
    points3d, points2d, f_fixed: float, image_size: ImageSize, config: Optional[RansacConfig] = None
) -> PnPResult:
    """EPnP inside RANSAC; the returned pose is refit on the largest consensus set.

    When every minimal subset fits within the iteration budget the subsets are
    enumerated exhaustively (in a seeded order), otherwise they are sampled.
    """
    cfg = config or RansacConfig()
    Pw, pi = _validate(points3d, points2d)
    n = len(Pw)
    k = cfg.sample_size
    rng = np.random.default_rng(cfg.seed)

    if math.comb(n, k) <= cfg.max_iterations:
        subsets = list(itertools.combinations(range(n), k))
        rng.shuffle(subsets)
        exhaustive = True
    else:
        subsets = None
        exhaustive = False

    best_mask, best_key = None, None
    n_iter = len(subsets) if exhaustive else cfg.max_iterations
    needed = math.inf
    it = 0
    while it < n_iter and (exhaustive or it < needed):
        idx = list(subsets[it]) if exhaustive else rng.choice(n, size=k, replace=False)
        it += 1
        try:
            fit = epnp(Pw[idx], pi[idx], f_fixed, image_size)
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(Pw, pi, fit.R, fit.translation, f_fixed, image_size)
        mask = err <= cfg.threshold_px
        count = int(mask.sum())
        if count == 0:
            continue
        key = (-count, float(err[mask].mean()))
        if best_key is None or key < best_key:
            best_key, best_mask = key, mask
            if not exhaustive:
                needed = _required_iterations(count / n, k, cfg.confidence)

    if best_mask is None or best_mask.sum() < 4:
        raise NoConsensus("no pose is supported by at least 4 inliers")
    final = epnp(Pw[best_mask], pi[best_mask], f_fixed, image_size)
    # refitting can shift the consensus set; keep the mask consistent with the final pose
    err = reprojection_errors(Pw, pi, final.R, final.translation, f_fixed, image_size)
    mask = err <= cfg.threshold_px
    if mask.sum() > best_mask.sum():
        final = epnp(Pw[mask], pi[mask], f_fixed, image_size)
        best_mask = mask
    return PnPResult(final.rotation, final.translation, final.reprojection_error, best_mask.copy())
