"""Training losses for the pose model, each with its analytic gradient.

Every ``loss_*`` function returns ``(value, gradient)`` where the gradient
matches the shape of the predicted quantity.  The subgradient of ``|x|`` at
zero is taken to be zero, so gradients are defined everywhere.
"""

from dataclasses import dataclass

import numpy as np

from .camera import CropTranslation, Rot6D, check_rotation, rot6d_to_matrix
from .errors import EmptyMask

DEFAULT_NUM_POINTS = 1000


def _require_image(name, arr, lo=None, hi=None):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if lo is not None and (a.min() < lo or a.max() > hi):
        raise ValueError(f"{name} values must lie in [{lo}, {hi}]")
    return a


def _require_corr(name, arr):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"{name} must be (h, w, 3), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for the four loss groups."""

    w_pose: float = 1.0
    w_geom: float = 1.0
    w_cat: float = 1.0
    w_art: float = 1.0

    def __post_init__(self):
        for name in ("w_pose", "w_geom", "w_cat", "w_art"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PosePrediction:
    """Raw model outputs for one object crop.

    Masks are soft (values in [0, 1]); the correspondence map holds
    normalized model coordinates per pixel.  The rotation is the
    viewpoint-invariant one (as seen along the ray through the object
    center), so the reference it is scored against must use the same
    convention.
    """

    rot6d: Rot6D
    site: CropTranslation
    articulation: float
    class_logits: np.ndarray
    corr: np.ndarray
    mask_vis: np.ndarray
    mask_full: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.articulation) and 0.0 <= self.articulation <= 1.0):
            raise ValueError(f"articulation must be in [0, 1], got {self.articulation}")
        logits = np.asarray(self.class_logits, dtype=np.float64)
        if logits.ndim != 1 or logits.size < 2:
            raise ValueError("class_logits must be a vector over >= 2 categories")
        if not np.all(np.isfinite(logits)):
            raise ValueError("class_logits contains non-finite values")
        object.__setattr__(self, "class_logits", logits)
        corr = _require_corr("corr", self.corr)
        vis = _require_image("mask_vis", self.mask_vis, 0.0, 1.0)
        full = _require_image("mask_full", self.mask_full, 0.0, 1.0)
        if vis.shape != corr.shape[:2] or full.shape != corr.shape[:2]:
            raise ValueError("mask and correspondence shapes disagree")
        object.__setattr__(self, "corr", corr)
        object.__setattr__(self, "mask_vis", vis)
        object.__setattr__(self, "mask_full", full)


@dataclass(frozen=True)
class GroundTruth:
    """Reference quantities a prediction is scored against."""

    R: np.ndarray
    site: CropTranslation
    articulation: float
    class_id: int
    corr: np.ndarray
    mask_vis: np.ndarray
    mask_full: np.ndarray

    def __post_init__(self):
        check_rotation(np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        if not (np.isfinite(self.articulation) and 0.0 <= self.articulation <= 1.0):
            raise ValueError(f"articulation must be in [0, 1], got {self.articulation}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        corr = _require_corr("corr", self.corr)
        vis = _require_image("mask_vis", self.mask_vis)
        full = _require_image("mask_full", self.mask_full)
        for name, m in (("mask_vis", vis), ("mask_full", full)):
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValueError(f"{name} must be binary")
        if vis.shape != corr.shape[:2] or full.shape != corr.shape[:2]:
            raise ValueError("mask and correspondence shapes disagree")
        object.__setattr__(self, "corr", corr)
        object.__setattr__(self, "mask_vis", vis)
        object.__setattr__(self, "mask_full", full)


def loss_rotation(R_hat, R_bar, pts):
    """Point-matching rotation loss.

    Mean over points of the L1 distance between the point rotated by the
    prediction and by the reference.  The gradient is with respect to the
    nine entries of ``R_hat``.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError("pts must be (N, 3) with N >= 1")
    diff = pts @ (np.asarray(R_hat) - np.asarray(R_bar)).T
    value = float(np.abs(diff).sum(axis=1).mean())
    grad = np.sign(diff).T @ pts / pts.shape[0]
    return value, grad


def loss_center(pred_xy, gt_xy):
    """L1 loss over the two box-relative center offsets."""
    d = np.asarray(pred_xy, dtype=np.float64) - np.asarray(gt_xy, dtype=np.float64)
    if d.shape != (2,):
        raise ValueError("center offsets must have shape (2,)")
    return float(np.abs(d).sum()), np.sign(d)


def loss_depth(pred_z, gt_z):
    """L1 loss over the depth offset."""
    d = float(pred_z) - float(gt_z)
    return abs(d), float(np.sign(d))


def loss_mask(pred_vis, pred_full, gt_vis, gt_full):
    """Visible plus amodal mask loss, each a per-pixel mean of |difference|.

    Returns the summed value and a pair of gradients, one per predicted
    mask.
    """
    pv = np.asarray(pred_vis, dtype=np.float64)
    pf = np.asarray(pred_full, dtype=np.float64)
    gv = np.asarray(gt_vis, dtype=np.float64)
    gf = np.asarray(gt_full, dtype=np.float64)
    if pv.shape != gv.shape or pf.shape != gf.shape:
        raise ValueError("mask shapes disagree")
    dv = pv - gv
    df = pf - gf
    value = float(np.abs(dv).mean() + np.abs(df).mean())
    return value, (np.sign(dv) / dv.size, np.sign(df) / df.size)


def loss_corr(pred, gt, vis_mask):
    """Correspondence loss restricted to visible pixels.

    Sum of per-channel absolute differences at pixels where ``vis_mask``
    is set, divided by the number of such pixels.

    Raises:
        EmptyMask: no visible pixel to average over.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    m = np.asarray(vis_mask, dtype=np.float64)
    if p.shape != g.shape or m.shape != p.shape[:2]:
        raise ValueError("correspondence and mask shapes disagree")
    count = float(m.sum())
    if count == 0.0:
        raise EmptyMask("visible mask selects no pixels")
    diff = p - g
    value = float((np.abs(diff) * m[:, :, None]).sum() / count)
    grad = np.sign(diff) * m[:, :, None] / count
    return value, grad


def loss_articulation(pred_a, gt_a):
    """L1 loss over the normalized articulation angle."""
    d = float(pred_a) - float(gt_a)
    return abs(d), float(np.sign(d))


def loss_category(logits, class_id):
    """Cross-entropy over category logits, computed via a stable log-softmax."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= class_id < z.size:
        raise ValueError(f"class_id {class_id} out of range for {z.size} logits")
    shifted = z - z.max()
    logsumexp = float(np.log(np.exp(shifted).sum()))
    value = logsumexp - float(shifted[class_id])
    grad = np.exp(shifted - logsumexp)
    grad[class_id] -= 1.0
    return value, grad


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values and the weighted total.

    ``pose`` is ``(rotation + center) + depth`` and ``geom`` is
    ``corr + mask``, both unweighted.  ``total`` is
    ``((w_pose*pose + w_geom*geom) + w_cat*category) + w_art*articulation``
    evaluated left to right, so recomputing that expression from the
    stored fields reproduces ``total`` exactly.
    """

    rotation: float
    center: float
    depth: float
    pose: float
    corr: float
    mask: float
    geom: float
    category: float
    articulation: float
    total: float


def loss_total(pred, gt, weights, pts):
    """Weighted multitask loss over all prediction heads.

    ``pts`` are model points for the rotation term; predictions and
    ground truth must share map shapes.
    """
    if pred.corr.shape != gt.corr.shape:
        raise ValueError("prediction and ground truth map shapes disagree")
    r_hat = rot6d_to_matrix(pred.rot6d)
    l_rot, _ = loss_rotation(r_hat, gt.R, pts)
    l_center, _ = loss_center(
        (pred.site.dx, pred.site.dy), (gt.site.dx, gt.site.dy)
    )
    l_depth, _ = loss_depth(pred.site.dz, gt.site.dz)
    l_corr, _ = loss_corr(pred.corr, gt.corr, gt.mask_vis)
    l_mask, _ = loss_mask(pred.mask_vis, pred.mask_full, gt.mask_vis, gt.mask_full)
    l_cat, _ = loss_category(pred.class_logits, gt.class_id)
    l_art, _ = loss_articulation(pred.articulation, gt.articulation)
    pose = (l_rot + l_center) + l_depth
    geom = l_corr + l_mask
    total = (
        (weights.w_pose * pose + weights.w_geom * geom) + weights.w_cat * l_cat
    ) + weights.w_art * l_art
    return LossBreakdown(
        rotation=l_rot,
        center=l_center,
        depth=l_depth,
        pose=pose,
        corr=l_corr,
        mask=l_mask,
        geom=geom,
        category=l_cat,
        articulation=l_art,
        total=total,
    )
