"""Multi-vehicle camera calibration.

Three stages:

1. candidate generation - EPnP + RANSAC for every (vehicle, model) pair with
   the focal length fixed to a default;
2. model matching - CMA-ES over ``(f, theta*d, T)`` minimising the summed
   reprojection distance of each pair, then the best model per vehicle;
3. fine-tuning - with each vehicle's estimate as an anchor, back-project all
   vehicles onto their keypoint-height planes and minimise a distance/angle
   loss against the matched models, weighted by proximity to the anchor. The
   anchor run with the lowest loss wins. Models are then re-assigned under
   the fitted camera and stage 3 repeated while the loss keeps dropping.

All parameter vectors are the 7-vector ``(f, theta*d, T)``; the world frame is
the anchor vehicle's model frame, whose ``Z = 0`` plane is the road.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateConfiguration,
    NoConsensus,
    NoFeasibleVehicle,
    PointBehindCamera,
    RayParallelToPlane,
    TooFewPoints,
)
from .geometry import (
    CameraParams,
    ImageSize,
    axis_angle_to_matrix_batch,
    back_project_ray,
    intersect_plane,
    project,
)
from .optimize import CmaConfig, cmaes_minimize
from .pnp import RansacConfig, epnp_ransac
from .vehicles import VehicleAnnotation, VehicleModel

logger = logging.getLogger(__name__)


@dataclass
class MVCalibConfig:
    f_default: float = 350.0
    alpha: float = 6.0
    tau: float = -0.1  # per metre
    matching_evaluations: int = 4000
    finetune_evaluations: int = 20000
    sigma_scale: float = 0.1
    population_size: Optional[int] = None
    tol_fun: float = 1e-12
    seed: int = 0
    min_focal: float = 1.0
    rematch_rounds: int = 3  # model re-assignment rounds after fine-tuning; 0 disables
    ransac: RansacConfig = field(default_factory=RansacConfig)


def derive_seed(master: int, *ids: int) -> int:
    """Stable per-task seed so results do not depend on processing order."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *[int(i) + 1 for i in ids]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------- stage 1


@dataclass(frozen=True)
class Candidate:
    vehicle: int
    model_index: int
    params: CameraParams
    reprojection_error: float
    projection_loss: float
    inliers: np.ndarray


@dataclass
class CandidateSet:
    candidates: Dict[Tuple[int, int], Candidate]
    skipped: List[Tuple[int, Optional[int], str]]
    f_default: float

    def for_vehicle(self, vehicle: int) -> List[Candidate]:
        return [c for (i, _), c in sorted(self.candidates.items()) if i == vehicle]

    @property
    def vehicles(self) -> List[int]:
        return sorted({i for i, _ in self.candidates})

    def __len__(self):
        return len(self.candidates)


def projection_loss(params: CameraParams, annotation: VehicleAnnotation, model: VehicleModel, image_size: ImageSize) -> float:
    """Sum over keypoints of the pixel distance between annotation and projected model point.

    A keypoint at or behind the camera makes the loss ``inf``.
    """
    names = annotation.names
    try:
        uv = project(model.points(names), params, image_size)
    except PointBehindCamera:
        return float("inf")
    return float(np.linalg.norm(uv - annotation.points(names), axis=1).sum())


def _projection_loss_batch(X: np.ndarray, P: np.ndarray, p: np.ndarray, image_size: ImageSize) -> np.ndarray:
    R = axis_angle_to_matrix_batch(X[:, 1:4])
    cam = np.einsum("mij,kj->mki", R, P) + X[:, None, 4:7]
    z = cam[..., 2]
    w, h = image_size
    with np.errstate(divide="ignore", invalid="ignore"):
        u = X[:, :1] * cam[..., 0] / z + w / 2.0
        v = X[:, :1] * cam[..., 1] / z + h / 2.0
    loss = np.hypot(u - p[:, 0], v - p[:, 1]).sum(axis=1)
    bad = np.any(z <= 0, axis=1) | (X[:, 0] <= 0)
    return np.where(bad, np.inf, loss)


def candidate_generation(
    annotations: Sequence[VehicleAnnotation],
    models: Sequence[VehicleModel],
    f_default: float,
    image_size: ImageSize,
    ransac: Optional[RansacConfig] = None,
    seed: int = 0,
) -> CandidateSet:
    ransac = ransac or RansacConfig()
    cands: Dict[Tuple[int, int], Candidate] = {}
    skipped: List[Tuple[int, Optional[int], str]] = []
    for ann in sorted(annotations, key=lambda a: a.index):
        if len(ann) < 4:
            skipped.append((ann.index, None, f"only {len(ann)} keypoints"))
            continue
        names = ann.names
        for j, model in enumerate(models):
            cfg = replace(ransac, seed=derive_seed(seed, 1, ann.index))  # same stream for every model
            try:
                fit = epnp_ransac(model.points(names), ann.points(names), f_default, image_size, cfg)
            except (NoConsensus, DegenerateConfiguration, TooFewPoints, np.linalg.LinAlgError) as exc:
                skipped.append((ann.index, j, str(exc)))
                continue
            params = CameraParams(f_default, fit.rotation, fit.translation)
            cands[(ann.index, j)] = Candidate(
                ann.index, j, params, fit.reprojection_error, projection_loss(params, ann, model, image_size), fit.inliers
            )
    if not cands:
        raise NoFeasibleVehicle("no vehicle has 4 or more usable keypoints")
    return CandidateSet(cands, skipped, f_default)


# ---------------------------------------------------------------- stage 2


@dataclass(frozen=True)
class VehicleMatch:
    vehicle: int
    model_index: int
    params: CameraParams
    loss: float
    candidate_params: CameraParams
    candidate_loss: float
    losses_by_model: Mapping[int, float]


def _scale_vector(x: np.ndarray) -> np.ndarray:
    depth = max(float(np.linalg.norm(x[4:7])), 1.0)
    return np.concatenate([[abs(x[0])], np.ones(3), np.full(3, depth)])


def refine_single_vehicle(
    candidate: Candidate, annotation: VehicleAnnotation, model: VehicleModel, image_size: ImageSize, config: MVCalibConfig
) -> Tuple[CameraParams, float]:
    names = annotation.names
    P, p = model.points(names), annotation.points(names)
    x0 = candidate.params.to_vector()
    cma = CmaConfig(
        population_size=config.population_size,
        sigma0=config.sigma_scale * _scale_vector(x0),
        max_evaluations=config.matching_evaluations,
        seed=derive_seed(config.seed, 2, candidate.vehicle),  # identical models give identical runs
        tol_fun=config.tol_fun,
        lower=np.r_[config.min_focal, np.full(6, -np.inf)],
    )
    res = cmaes_minimize(lambda X: _projection_loss_batch(X, P, p, image_size), x0, cma, vectorized=True)
    return CameraParams.from_vector(res.x), float(res.fun)


def model_matching(
    candidates: CandidateSet,
    annotations: Sequence[VehicleAnnotation],
    models: Sequence[VehicleModel],
    image_size: ImageSize,
    config: Optional[MVCalibConfig] = None,
) -> Dict[int, VehicleMatch]:
    """Refine every candidate with a free focal length and keep the best model per vehicle."""
    config = config or MVCalibConfig()
    by_index = {a.index: a for a in annotations}
    matches: Dict[int, VehicleMatch] = {}
    for i in candidates.vehicles:
        best = None
        losses: Dict[int, float] = {}
        for cand in candidates.for_vehicle(i):
            params, loss = refine_single_vehicle(cand, by_index[i], models[cand.model_index], image_size, config)
            losses[cand.model_index] = loss
            # strict comparison: ties keep the lower model index
            if best is None or loss < best[1]:
                best = (cand, loss, params)
        cand, loss, params = best
        matches[i] = VehicleMatch(i, cand.model_index, params, loss, cand.params, cand.projection_loss, losses)
    return matches


# ---------------------------------------------------------------- stage 3


def back_project_points(
    annotation: VehicleAnnotation, model: VehicleModel, params: CameraParams, image_size: ImageSize
) -> np.ndarray:
    """Back-project each annotated keypoint onto the plane at that keypoint's model height."""
    out = []
    for name in annotation.names:
        ray = back_project_ray(annotation.keypoints[name], params, image_size)
        out.append(intersect_plane(ray, model.keypoints[name][2]))
    return np.array(out).reshape(-1, 3)


@dataclass(frozen=True)
class PairLoss:
    loss: float
    distance: float
    angle: float
    degenerate_pairs: int


def pairwise_loss(back_projected: np.ndarray, model_points: np.ndarray, alpha: float) -> PairLoss:
    """Distance plus ``alpha`` times sine-of-angle loss over all keypoint pairs.

    Pairs whose back-projected vector has zero length are skipped and counted.
    """
    dist = ang = 0.0
    degenerate = 0
    for a, b in combinations(range(len(model_points)), 2):
        vb = back_projected[b] - back_projected[a]
        vm = model_points[b] - model_points[a]
        nb, nm = np.linalg.norm(vb), np.linalg.norm(vm)
        if nb < 1e-12 or nm < 1e-12:
            degenerate += 1
            continue
        dist += abs(nb - nm)
        # |sin| from the cross product stays exact for parallel vectors
        ang += min(1.0, float(np.linalg.norm(np.cross(vm, vb))) / (nm * nb))
    return PairLoss(dist + alpha * ang, dist, ang, degenerate)


def fine_tune_loss(
    annotation: VehicleAnnotation, model: VehicleModel, params: CameraParams, image_size: ImageSize, alpha: float
) -> float:
    """Per-vehicle loss under the anchor parameters ``params``."""
    bp = back_project_points(annotation, model, params, image_size)
    return pairwise_loss(bp, model.points(annotation.names), alpha).loss


def anchor_weight(centroids: np.ndarray, anchor: int, tau: float) -> np.ndarray:
    """Softmax of ``tau`` times each centroid's distance to the anchor centroid."""
    c = np.asarray(centroids, dtype=float)
    d = np.linalg.norm(c - c[anchor], axis=1)
    z = tau * d
    e = np.exp(z - z.max())
    return e / e.sum()


class FineTuneObjective:
    """Vectorised multi-vehicle loss ``L_f`` for a fixed anchor.

    ``vehicles`` is an ordered list of ``(annotation, model)``; entry ``anchor``
    is the anchor vehicle.
    """

    def __init__(self, vehicles, anchor: int, image_size: ImageSize, alpha: float, tau: float):
        self.anchor = anchor
        self.alpha = alpha
        self.tau = tau
        self.image_size = image_size
        pix, heights, owner, pa, pb, mvec = [], [], [], [], [], []
        offset = 0
        for v, (ann, model) in enumerate(vehicles):
            names = ann.names
            P = model.points(names)
            pix.append(ann.points(names))
            heights.append(P[:, 2])
            owner.extend([v] * len(names))
            for a, b in combinations(range(len(names)), 2):
                pa.append(offset + a)
                pb.append(offset + b)
                mvec.append(P[b] - P[a])
            offset += len(names)
        self.n_vehicles = len(vehicles)
        self.pix = np.vstack(pix)
        self.heights = np.concatenate(heights)
        self.owner = np.array(owner)
        self.pa, self.pb = np.array(pa, dtype=int), np.array(pb, dtype=int)
        self.mvec = np.array(mvec).reshape(-1, 3)
        self.mlen = np.linalg.norm(self.mvec, axis=1)
        self.pair_owner = self.owner[self.pa]
        counts = np.bincount(self.owner, minlength=self.n_vehicles)
        self.centroid_matrix = (self.owner[None, :] == np.arange(self.n_vehicles)[:, None]) / counts[:, None]
        self.pair_matrix = (self.pair_owner[:, None] == np.arange(self.n_vehicles)[None, :]).astype(float)

    def back_project(self, X: np.ndarray):
        """Back-projected points ``(m, K, 3)`` and a validity mask ``(m,)``."""
        f = X[:, 0]
        R = axis_angle_to_matrix_batch(X[:, 1:4])
        T = X[:, 4:7]
        w, h = self.image_size
        uv = np.column_stack([self.pix[:, 0] - w / 2.0, self.pix[:, 1] - h / 2.0])
        rays_c = np.concatenate([uv[None] / f[:, None, None], np.ones((len(X), len(uv), 1))], axis=2)
        d = np.einsum("mji,mkj->mki", R, rays_c)  # R^T applied to each ray
        C = -np.einsum("mji,mj->mi", R, T)
        dz = d[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.heights[None] - C[:, None, 2]) / dz
        valid = np.all((np.abs(dz) > 1e-12) & (t > 0), axis=1) & (f > 0)
        P = C[:, None, :] + t[..., None] * d
        P[..., 2] = self.heights[None]
        return P, valid

    def components(self, X: np.ndarray):
        P, valid = self.back_project(X)
        vb = P[:, self.pb] - P[:, self.pa]
        nb = np.linalg.norm(vb, axis=2)
        xi_l = np.abs(nb - self.mlen)
        cross = np.linalg.norm(np.cross(vb, self.mvec[None]), axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            sin = cross / (nb * self.mlen)
        ok = nb > 1e-12
        xi_r = np.where(ok, np.minimum(sin, 1.0), 0.0)
        xi_l = np.where(ok, xi_l, 0.0)
        lp = (xi_l + self.alpha * xi_r) @ self.pair_matrix  # (m, n_vehicles)
        cent = np.einsum("vk,mkx->mvx", self.centroid_matrix, P)
        dist = np.linalg.norm(cent - cent[:, self.anchor : self.anchor + 1], axis=2)
        z = self.tau * dist
        e = np.exp(z - z.max(axis=1, keepdims=True))
        wts = e / e.sum(axis=1, keepdims=True)
        return lp, wts, valid

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        lp, wts, valid = self.components(X)
        out = np.sum(wts * lp, axis=1)
        return np.where(valid & np.isfinite(out), out, np.inf)

    def value(self, params: CameraParams) -> float:
        return float(self(params.to_vector()[None])[0])


@dataclass
class AnchorRun:
    anchor: int
    start_loss: float
    final_loss: float
    params: CameraParams
    evaluations: int


@dataclass
class CalibResult:
    params: CameraParams
    matched_models: Dict[int, str]
    anchor_index: int
    final_loss: float
    stage_losses: Dict[str, float]  # L_f of the selected anchor after each stage
    alpha: float
    tau: float
    stages: int = 3
    anchor_runs: List[AnchorRun] = field(default_factory=list)
    skipped: List[Tuple[int, Optional[int], str]] = field(default_factory=list)
    rematch_rounds: int = 0


def _stage3_vehicles(annotations, matches, models):
    """Vehicles entering the multi-vehicle loss, each paired with its model.

    Vehicles without a match (fewer than four keypoints) use the most common
    matched model, provided they have at least two keypoints.
    """
    counts = Counter(m.model_index for m in matches.values())
    fallback = min(counts, key=lambda j: (-counts[j], j))
    out = []
    for ann in sorted(annotations, key=lambda a: a.index):
        if ann.index in matches:
            out.append((ann, models[matches[ann.index].model_index]))
        elif len(ann) >= 2:
            out.append((ann, models[fallback]))
    return out


def _stage_start(obj: "FineTuneObjective", match: VehicleMatch, start: str) -> CameraParams:
    """Starting parameters for an anchor.

    The refined single-vehicle estimate only minimises that vehicle's own
    projection loss, so it can score worse than the raw candidate on the
    multi-vehicle loss; in that case the candidate is kept.
    """
    if start == "candidate":
        return match.candidate_params
    if obj.value(match.candidate_params) < obj.value(match.params):
        return match.candidate_params
    return match.params


def fine_tune(
    matches: Dict[int, VehicleMatch],
    annotations: Sequence[VehicleAnnotation],
    models: Sequence[VehicleModel],
    image_size: ImageSize,
    config: Optional[MVCalibConfig] = None,
    optimize: bool = True,
    start: str = "matching",
) -> CalibResult:
    """Anchor-wise minimisation of the multi-vehicle loss; the lowest final loss wins.

    ``optimize=False`` only evaluates the loss at each anchor's starting
    parameters (used for the stage-1 and stage-2 ablations). ``start`` picks
    the starting parameters: ``"matching"`` or ``"candidate"``.
    """
    config = config or MVCalibConfig()
    vehicles = _stage3_vehicles(annotations, matches, models)
    position = {ann.index: k for k, (ann, _) in enumerate(vehicles)}
    matched_names = {i: models[m.model_index].name for i, m in matches.items()}

    if len(matches) == 1 and len(vehicles) == 1:
        (i, m), = matches.items()
        warnings.warn("only one vehicle is available; returning its single-vehicle estimate", RuntimeWarning)
        obj = FineTuneObjective(vehicles, 0, image_size, config.alpha, config.tau)
        params = _stage_start(obj, m, start)
        loss = obj.value(params)
        return CalibResult(params, matched_names, i, loss, {"candidate": obj.value(m.candidate_params), "matching": loss},
                           config.alpha, config.tau, stages=2, anchor_runs=[AnchorRun(i, loss, loss, params, 0)])

    runs: List[AnchorRun] = []
    for i in sorted(matches):
        obj = FineTuneObjective(vehicles, position[i], image_size, config.alpha, config.tau)
        start_params = _stage_start(obj, matches[i], start)
        x0 = start_params.to_vector()
        f0 = float(obj(x0[None])[0])
        if not optimize or not np.isfinite(f0):
            runs.append(AnchorRun(i, f0, f0, start_params, 1))
            continue
        cma = CmaConfig(
            population_size=config.population_size,
            sigma0=config.sigma_scale * _scale_vector(x0),
            max_evaluations=config.finetune_evaluations,
            seed=derive_seed(config.seed, 3, i),
            tol_fun=config.tol_fun,
            lower=np.r_[config.min_focal, np.full(6, -np.inf)],
        )
        res = cmaes_minimize(obj, x0, cma, vectorized=True)
        runs.append(AnchorRun(i, f0, float(res.fun), CameraParams.from_vector(res.x), res.nfev))

    finite = [r for r in runs if np.isfinite(r.final_loss)]
    if not finite:
        raise PointBehindCamera("no anchor yields a valid back-projection of all vehicles")
    best = min(finite, key=lambda r: (r.final_loss, r.anchor))

    obj = FineTuneObjective(vehicles, position[best.anchor], image_size, config.alpha, config.tau)
    m = matches[best.anchor]
    stage_losses = {"candidate": obj.value(m.candidate_params), "matching": obj.value(_stage_start(obj, m, "matching"))}
    if optimize:
        stage_losses["fine_tuning"] = best.final_loss
    return CalibResult(
        best.params,
        matched_names,
        best.anchor,
        best.final_loss,
        stage_losses,
        config.alpha,
        config.tau,
        stages=3 if optimize else (2 if start == "matching" else 1),
        anchor_runs=runs,
    )


def rematch_models(
    result: CalibResult,
    matches: Dict[int, VehicleMatch],
    annotations: Sequence[VehicleAnnotation],
    models: Sequence[VehicleModel],
    image_size: ImageSize,
    config: Optional[MVCalibConfig] = None,
) -> Dict[int, VehicleMatch]:
    """Re-assign each vehicle's model by the multi-vehicle loss under ``result.params``.

    A single vehicle cannot separate models that differ mostly in scale, since
    a scaled model further away projects identically. Under the shared camera
    of the fine-tuned result a wrongly sized model no longer fits the other
    vehicles. Vehicles are visited in index order and each change is kept for
    the vehicles after it; ties keep the lower model index.
    """
    config = config or MVCalibConfig()
    current = dict(matches)
    vehicles = _stage3_vehicles(annotations, current, models)
    position = {ann.index: k for k, (ann, _) in enumerate(vehicles)}
    anchor = position[result.anchor_index]
    x = result.params.to_vector()[None]
    for i in sorted(current):
        k = position[i]
        losses = []
        for model in models:
            trial = list(vehicles)
            trial[k] = (trial[k][0], model)
            losses.append(float(FineTuneObjective(trial, anchor, image_size, config.alpha, config.tau)(x)[0]))
        j = int(np.argmin(losses))
        if j != current[i].model_index and losses[j] < losses[current[i].model_index]:
            current[i] = replace(current[i], model_index=j)
            vehicles[k] = (vehicles[k][0], models[j])
    return current


def refine_assignment(
    result: CalibResult,
    matches: Dict[int, VehicleMatch],
    annotations: Sequence[VehicleAnnotation],
    models: Sequence[VehicleModel],
    image_size: ImageSize,
    config: Optional[MVCalibConfig] = None,
) -> Tuple[CalibResult, Dict[int, VehicleMatch]]:
    """Alternate model re-assignment and fine-tuning while the final loss drops."""
    config = config or MVCalibConfig()
    rounds = 0
    for _ in range(config.rematch_rounds):
        new_matches = rematch_models(result, matches, annotations, models, image_size, config)
        if all(new_matches[i].model_index == matches[i].model_index for i in matches):
            break
        trial = fine_tune(new_matches, annotations, models, image_size, config)
        if not trial.final_loss < result.final_loss:
            break
        rounds += 1
        logger.info("model re-assignment round %d: loss %.4g -> %.4g", rounds, result.final_loss, trial.final_loss)
        result, matches = trial, new_matches
    result.rematch_rounds = rounds
    return result, matches


def calibrate(
    annotations: Sequence[VehicleAnnotation],
    models: Sequence[VehicleModel],
    image_size: ImageSize,
    config: Optional[MVCalibConfig] = None,
    stages: int = 3,
) -> CalibResult:
    """Run the pipeline up to ``stages`` (1, 2 or 3).

    With ``stages=1`` each vehicle keeps the candidate whose projection loss is
    lowest and the anchor is chosen by the multi-vehicle loss without any
    optimisation; ``stages=2`` does the same with the refined per-vehicle
    estimates. ``stages=3`` adds fine-tuning followed by up to
    ``config.rematch_rounds`` rounds of model re-assignment.
    """
    if stages not in (1, 2, 3):
        raise ValueError("stages must be 1, 2 or 3")
    config = config or MVCalibConfig()
    cands = candidate_generation(annotations, models, config.f_default, image_size, config.ransac, config.seed)
    if stages == 1:
        matches = {}
        for i in cands.vehicles:
            best = min(cands.for_vehicle(i), key=lambda c: (c.projection_loss, c.model_index))
            matches[i] = VehicleMatch(i, best.model_index, best.params, best.projection_loss, best.params,
                                      best.projection_loss, {c.model_index: c.projection_loss for c in cands.for_vehicle(i)})
        result = fine_tune(matches, annotations, models, image_size, config, optimize=False, start="candidate")
    else:
        matches = model_matching(cands, annotations, models, image_size, config)
        result = fine_tune(matches, annotations, models, image_size, config, optimize=stages == 3)
        if stages == 3 and len(result.anchor_runs) > 1:
            result, matches = refine_assignment(result, matches, annotations, models, image_size, config)
    result.skipped = list(cands.skipped)
    logger.info("calibration: anchor %d, loss %.4g, f %.1f", result.anchor_index, result.final_loss, result.params.f)
    return result
