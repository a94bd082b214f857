"""Pose from 2D-3D correspondences: linear solve, refinement, robust loop.

The linear stage is a direct linear transform on normalized image
coordinates with the rotation projected back onto SO(3); refinement runs
Levenberg-Marquardt with rotation increments in the tangent space.  The
robust loop scores hypotheses with a truncated quadratic (MSAC) and is
deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, Pose
from .errors import (
    DegenerateConfiguration,
    NoConsensus,
    NonFiniteResidual,
    PointBehindCamera,
    TooFewCorrespondences,
)
from .meshes import denormalize_coords
from .raster import CorrespondenceMap

MIN_CORRESPONDENCES = 6
# Rank-deficiency guard: ratio between the largest singular value and the
# eleventh must stay below this for the solution direction to be unique.
MAX_CONDITION = 1e12
DEFAULT_INLIER_PX = 2.0
DEFAULT_MAX_ITERS = 400
# Local optimization re-fits a leading hypothesis on the points it catches
# inside successively tighter bands (multiples of the inlier threshold).
LO_BANDS = (16.0, 4.0, 1.0)
# Robust loop gives up below this inlier fraction.
MIN_INLIER_RATIO = 0.2
# Confidence level for the adaptive iteration bound.
RANSAC_CONFIDENCE = 0.999
LM_MAX_ITERS = 100
LM_TOL = 1e-10
# Iteration cap for polishing a minimal sample whose linear solve landed
# outside every band; bounds worst-case cost at 400 samples per call.
LM_SAMPLE_ITERS = 25


@dataclass(frozen=True)
class CorrSet:
    """Paired model points (meters) and pixel observations."""

    pts3d: np.ndarray
    pts2d: np.ndarray

    def __post_init__(self):
        p3 = np.asarray(self.pts3d, dtype=float)
        p2 = np.asarray(self.pts2d, dtype=float)
        if p3.ndim != 2 or p3.shape[1] != 3:
            raise ValueError("pts3d must be (N, 3)")
        if p2.shape != (p3.shape[0], 2):
            raise ValueError("pts2d must be (N, 2) matching pts3d")
        if not (np.isfinite(p3).all() and np.isfinite(p2).all()):
            raise ValueError("correspondences must be finite")
        object.__setattr__(self, "pts3d", p3)
        object.__setattr__(self, "pts2d", p2)

    @property
    def n(self) -> int:
        return self.pts3d.shape[0]

    def subset(self, index: np.ndarray) -> "CorrSet":
        return CorrSet(self.pts3d[index], self.pts2d[index])


@dataclass(frozen=True)
class PnPResult:
    """Robust solve outcome: pose plus support statistics."""

    pose: Pose
    inlier_count: int
    outlier_count: int
    mean_reproj_err: float
    converged: bool

    @property
    def inlier_ratio(self) -> float:
        total = self.inlier_count + self.outlier_count
        return self.inlier_count / total if total else 0.0


def pairs_from_map(
    cmap: CorrespondenceMap, bbox3d: tuple[np.ndarray, np.ndarray]
) -> CorrSet:
    """Turn a correspondence map into explicit 2D-3D pairs.

    Valid pixels denormalize through ``bbox3d`` into model coordinates;
    their pixel centers map from crop coordinates back to the full image.

    Raises:
        TooFewCorrespondences: fewer than 6 valid pixels.
    """
    ii, jj = np.nonzero(cmap.valid.data)
    if ii.size < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(
            f"map holds {ii.size} valid pixels, need {MIN_CORRESPONDENCES}"
        )
    pts3d = denormalize_coords(cmap.data[ii, jj].astype(float), bbox3d)
    crop = cmap.crop
    u = crop.x0 + (jj + 0.5) * (crop.w / cmap.width)
    v = crop.y0 + (ii + 0.5) * (crop.h / cmap.height)
    return CorrSet(pts3d, np.stack([u, v], axis=1))


def _reproj_errors(
    corr: CorrSet, camera: CameraIntrinsics, pose: Pose, clamp: bool = False
) -> np.ndarray:
    """Per-point pixel errors; behind-camera points become inf when clamped."""
    pc = corr.pts3d @ pose.R.T + pose.t
    z = pc[:, 2]
    bad = z <= 1e-9
    if bad.any():
        if not clamp:
            raise PointBehindCamera("pose places correspondences behind the camera")
        z = np.where(bad, 1.0, z)
    du = camera.f * pc[:, 0] / z + camera.px - corr.pts2d[:, 0]
    dv = camera.f * pc[:, 1] / z + camera.py - corr.pts2d[:, 1]
    err = np.sqrt(du * du + dv * dv)
    if bad.any():
        err[bad] = np.inf
    return err


def reprojection_rmse(corr: CorrSet, camera: CameraIntrinsics, pose: Pose) -> float:
    """Root-mean-square of per-point pixel errors under ``pose``."""
    err = _reproj_errors(corr, camera, pose)
    return float(math.sqrt(float((err * err).mean())))


def pnp_dlt(corr: CorrSet, camera: CameraIntrinsics) -> Pose:
    """Linear pose estimate from at least six correspondences.

    Solves for the projective [R|t] in normalized image coordinates via
    SVD, disambiguates the global sign so depths are positive, and
    projects the linear rotation onto SO(3) with a determinant-corrected
    orthogonal Procrustes step.

    Raises:
        TooFewCorrespondences: fewer than six pairs.
        DegenerateConfiguration: the design matrix does not determine a
            unique solution direction (for example, collinear points).
    """
    n = corr.n
    if n < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need {MIN_CORRESPONDENCES} pairs, got {n}")
    x = (corr.pts2d[:, 0] - camera.px) / camera.f
    y = (corr.pts2d[:, 1] - camera.py) / camera.f
    P = corr.pts3d
    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = P
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -x[:, None] * P
    A[0::2, 11] = -x
    A[1::2, 4:7] = P
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -y[:, None] * P
    A[1::2, 11] = -y
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    # the null direction is the solution; uniqueness needs rank 11
    if s[10] <= s[0] / MAX_CONDITION:
        raise DegenerateConfiguration(
            "correspondence geometry does not constrain a unique pose"
        )
    p = vt[-1].reshape(3, 4)
    depths = P @ p[2, :3] + p[2, 3]
    if depths.sum() < 0.0:
        p = -p
    M = p[:, :3]
    U, sig, Vt = np.linalg.svd(M)
    d = 1.0 if np.linalg.det(U @ Vt) > 0 else -1.0
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    scale = sig.sum() / 3.0
    if scale <= 0.0 or not np.isfinite(scale):
        raise DegenerateConfiguration("vanishing projective scale")
    return Pose(R=R, t=p[:, 3] / scale)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _exp_so3(w: np.ndarray) -> np.ndarray:
    angle = math.sqrt(float(w @ w))
    if angle < 1e-12:
        return np.eye(3) + _skew(w)
    K = _skew(w / angle)
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def _lm(
    corr: CorrSet,
    camera: CameraIntrinsics,
    init: Pose,
    max_iters: int,
    tol: float,
) -> tuple[Pose, bool]:
    """Levenberg-Marquardt over (rotation tangent, translation)."""
    R = init.R.copy()
    t = init.t.copy()

    def residuals(Rc, tc):
        pc = corr.pts3d @ Rc.T + tc
        z = pc[:, 2]
        if np.any(z <= 1e-9):
            return None, None
        r = np.empty(2 * corr.n)
        r[0::2] = camera.f * pc[:, 0] / z + camera.px - corr.pts2d[:, 0]
        r[1::2] = camera.f * pc[:, 1] / z + camera.py - corr.pts2d[:, 1]
        return r, pc

    r, pc = residuals(R, t)
    if r is None or not np.isfinite(r).all():
        raise NonFiniteResidual("refinement cannot start from this pose")
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    for _ in range(max_iters):
        z = pc[:, 2]
        fz = camera.f / z
        J = np.zeros((2 * corr.n, 6))
        rot_pts = pc - t
        # d(pixel)/d(camera point)
        du_dp = np.zeros((corr.n, 3))
        dv_dp = np.zeros((corr.n, 3))
        du_dp[:, 0] = fz
        du_dp[:, 2] = -camera.f * pc[:, 0] / (z * z)
        dv_dp[:, 1] = fz
        dv_dp[:, 2] = -camera.f * pc[:, 1] / (z * z)
        # left rotation increment: d(pc)/dw = -[R p]_x
        rx, ry, rz = rot_pts[:, 0], rot_pts[:, 1], rot_pts[:, 2]
        dp_dw = np.zeros((corr.n, 3, 3))
        dp_dw[:, 0, 1] = rz
        dp_dw[:, 0, 2] = -ry
        dp_dw[:, 1, 0] = -rz
        dp_dw[:, 1, 2] = rx
        dp_dw[:, 2, 0] = ry
        dp_dw[:, 2, 1] = -rx
        J[0::2, :3] = np.einsum("nk,nkj->nj", du_dp, dp_dw)
        J[1::2, :3] = np.einsum("nk,nkj->nj", dv_dp, dp_dw)
        J[0::2, 3:] = du_dp
        J[1::2, 3:] = dv_dp
        g = J.T @ r
        H = J.T @ J
        step_taken = False
        for _ in range(8):
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = _exp_so3(delta[:3]) @ R
            t_new = t + delta[3:]
            r_new, pc_new = residuals(R_new, t_new)
            if r_new is None:
                lam *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                R, t, r, pc, cost = R_new, t_new, r_new, pc_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                step_taken = True
                if math.sqrt(float(delta @ delta)) < tol:
                    converged = True
                break
            lam *= 10.0
        if converged or not step_taken:
            if not step_taken:
                converged = True  # no descent direction left
            break
    # re-orthonormalize against drift before constructing the pose
    U, _, Vt = np.linalg.svd(R)
    d = 1.0 if np.linalg.det(U @ Vt) > 0 else -1.0
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return Pose(R=R, t=t), converged


def pnp_refine_lm(
    corr: CorrSet,
    camera: CameraIntrinsics,
    init: Pose,
    max_iters: int = LM_MAX_ITERS,
    tol: float = LM_TOL,
) -> Pose:
    """Refine a pose by minimizing squared reprojection error.

    Accepted steps never increase the cost; iteration stops when the step
    norm drops below ``tol`` or after ``max_iters`` rounds.

    Raises:
        TooFewCorrespondences: fewer than six pairs.
        NonFiniteResidual: the initial pose yields non-finite residuals.
    """
    if corr.n < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need {MIN_CORRESPONDENCES} pairs, got {corr.n}")
    pose, _ = _lm(corr, camera, init, max_iters, tol)
    return pose


def pnp_ransac(
    corr: CorrSet,
    camera: CameraIntrinsics,
    inlier_px: float = DEFAULT_INLIER_PX,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> PnPResult:
    """Robust pose from contaminated correspondences.

    Minimal six-point samples are solved linearly and scored with a
    truncated quadratic: inliers contribute their squared error, outliers
    a constant ``inlier_px**2``.  A sample whose linear solve lands
    outside even the widest band is first re-fit geometrically on its own
    six points.  Hypotheses tie-break on (score, index).  Whenever a
    sample takes the lead it is locally optimized: re-fit on the points
    it catches inside successively tighter error bands, each stage kept
    only if it lowers the score.  The sample loop ends early
    once the best hypothesis's inlier fraction makes further samples
    pointless at 99.9% confidence.  The best hypothesis is refined on its
    inliers and statistics are recomputed under the refined pose.

    Raises:
        TooFewCorrespondences: fewer than six pairs.
        NoConsensus: no hypothesis reached a 20% inlier fraction.
    """
    n = corr.n
    if n < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need {MIN_CORRESPONDENCES} pairs, got {n}")
    rng = np.random.default_rng(seed)
    thr_sq = inlier_px * inlier_px
    best_score = math.inf
    best_raw = math.inf
    best_pose = None
    best_errs = None
    needed = max_iters
    i = 0
    while i < min(max_iters, needed):
        sample = rng.choice(n, size=MIN_CORRESPONDENCES, replace=False)
        i += 1
        try:
            hyp = pnp_dlt(corr.subset(sample), camera)
        except DegenerateConfiguration:
            continue
        errs = _reproj_errors(corr, camera, hyp, clamp=True)
        if int((errs < LO_BANDS[0] * inlier_px).sum()) < MIN_CORRESPONDENCES:
            # pixel noise can throw the linear minimal solve outside every
            # band; a geometric fit on the sample is its only way back
            try:
                hyp, _ = _lm(
                    corr.subset(sample), camera, hyp, LM_SAMPLE_ITERS, LM_TOL
                )
            except NonFiniteResidual:
                continue
            errs = _reproj_errors(corr, camera, hyp, clamp=True)
        score = float(np.minimum(errs * errs, thr_sq).sum())
        if score < best_raw:
            best_raw = score
            # polish on the hypothesis's own support through shrinking
            # bands; noise in the minimal sample otherwise caps how many
            # inliers it can collect
            for mult in LO_BANDS:
                mask = errs < mult * inlier_px
                if int(mask.sum()) < MIN_CORRESPONDENCES:
                    continue
                try:
                    local, _ = _lm(
                        corr.subset(np.flatnonzero(mask)),
                        camera,
                        hyp,
                        LM_MAX_ITERS,
                        LM_TOL,
                    )
                except NonFiniteResidual:
                    break
                lerrs = _reproj_errors(corr, camera, local, clamp=True)
                lscore = float(np.minimum(lerrs * lerrs, thr_sq).sum())
                if lscore < score:
                    hyp, errs, score = local, lerrs, lscore
        if score < best_score:
            best_score, best_pose, best_errs = score, hyp, errs
            q = float((errs < inlier_px).mean()) ** MIN_CORRESPONDENCES
            if q >= 1.0:
                needed = i
            elif q > 1e-12:  # below that the bound exceeds max_iters anyway
                needed = min(
                    max_iters,
                    int(
                        math.ceil(
                            math.log(1.0 - RANSAC_CONFIDENCE) / math.log(1.0 - q)
                        )
                    ),
                )
    if best_pose is None:
        raise NoConsensus("every sample was degenerate")
    inliers = best_errs < inlier_px
    if float(inliers.mean()) < MIN_INLIER_RATIO:
        raise NoConsensus(
            f"best hypothesis supports only {inliers.mean():.1%} of the data"
        )
    refined, converged = _lm(
        corr.subset(np.flatnonzero(inliers)), camera, best_pose, LM_MAX_ITERS, LM_TOL
    )
    final_errs = _reproj_errors(corr, camera, refined, clamp=True)
    final_inliers = final_errs < inlier_px
    count = int(final_inliers.sum())
    if count < MIN_CORRESPONDENCES:
        raise NoConsensus("refinement lost the inlier support")
    return PnPResult(
        pose=refined,
        inlier_count=count,
        outlier_count=n - count,
        mean_reproj_err=float(final_errs[final_inliers].mean()),
        converged=converged,
    )
