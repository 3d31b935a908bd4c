"""Prediction head: joint category scores, viewpoint regression, box deltas.

Per ROI the head produces an (n_views, n_classes+1) score map from the
view-specific features, normalizes it over the view axis into a viewpoint
distribution, scores categories as the distribution-weighted sum of
per-view scores, and regresses a continuous azimuth per class through a
sinusoidal soft-argmax (probability-weighted sine/cosine sums fed to
atan2, so wraparound is handled by construction). A view-agnostic
baseline head with identical output shapes is provided for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cylinder import ViewFeatures, assemble_windows, contract_windows
from .tensor import DimensionError, Tensor, wrap_angle


class GeometryError(ValueError):
    """A box with non-positive width or height."""


class TargetError(ValueError):
    """Training target violates its consistency contract."""


@dataclass
class HeadParams:
    """Classification and regression affine maps, shared across views."""

    n_classes: int
    n_views: int
    w_cls: Tensor   # (ch_out, n_classes + 1)
    b_cls: Tensor
    w_reg: Tensor   # (ch_out, n_classes * 4)
    b_reg: Tensor

    @classmethod
    def initialize(cls, n_classes, n_views, ch_out, rng):
        std = np.sqrt(2.0 / ch_out)
        return cls(
            n_classes,
            n_views,
            w_cls=Tensor(rng.normal(0.0, std, (ch_out, n_classes + 1)), requires_grad=True),
            b_cls=Tensor(np.zeros(n_classes + 1), requires_grad=True),
            w_reg=Tensor(rng.normal(0.0, std, (ch_out, n_classes * 4)), requires_grad=True),
            b_reg=Tensor(np.zeros(n_classes * 4), requires_grad=True),
        )

    def parameters(self):
        return {"cls.w": self.w_cls, "cls.b": self.b_cls, "reg.w": self.w_reg, "reg.b": self.b_reg}


@dataclass
class BaselineHeadParams:
    """View-agnostic ablation head: one k x k kernel, then dense maps to all views."""

    n_classes: int
    n_views: int
    w_kernel: Tensor  # (k, k, ch_in, ch_out)
    w_cls: Tensor     # (ch_out, n_views * (n_classes + 1))
    b_cls: Tensor
    w_reg: Tensor     # (ch_out, n_views * n_classes * 4)
    b_reg: Tensor

    @classmethod
    def initialize(cls, k, n_classes, n_views, ch_in, ch_out, rng):
        kstd = np.sqrt(2.0 / (k * k * ch_in))
        std = np.sqrt(2.0 / ch_out)
        n_cls = n_views * (n_classes + 1)
        n_reg = n_views * n_classes * 4
        return cls(
            n_classes,
            n_views,
            w_kernel=Tensor(rng.normal(0.0, kstd, (k, k, ch_in, ch_out)), requires_grad=True),
            w_cls=Tensor(rng.normal(0.0, std, (ch_out, n_cls)), requires_grad=True),
            b_cls=Tensor(np.zeros(n_cls), requires_grad=True),
            w_reg=Tensor(rng.normal(0.0, std, (ch_out, n_reg)), requires_grad=True),
            b_reg=Tensor(np.zeros(n_reg), requires_grad=True),
        )

    def parameters(self):
        return {
            "agnostic.w": self.w_kernel,
            "cls.w": self.w_cls,
            "cls.b": self.b_cls,
            "reg.w": self.w_reg,
            "reg.b": self.b_reg,
        }


@dataclass
class Target:
    """Ground truth for one ROI; class 0 is background."""

    class_label: int
    box: np.ndarray | None = None      # (cx, cy, w, h) or None
    azimuth: float | None = None       # radians, None when unannotated

    def __post_init__(self):
        if self.class_label == 0 and (self.box is not None or self.azimuth is not None):
            raise TargetError("background targets carry no box or azimuth")
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=np.float64)


@dataclass
class ViewScores:
    """All per-ROI head outputs; theta's background entry is never consumed."""

    S: Tensor        # (n_views, n_classes + 1) logits
    P: Tensor        # softmax of S over the view axis, per class
    S_c: Tensor      # (n_classes + 1,) category logits
    theta: Tensor    # (n_classes + 1,) per-class angles, radians
    t: Tensor        # (n_views, n_classes, 4) box deltas
    angles: np.ndarray = field(repr=False, default=None)


def bin_angles(n_views):
    """Center angle of each azimuth bin, radians: v * 2pi / n_views."""
    return np.arange(n_views) * (2.0 * np.pi / n_views)


def _values(f):
    return f.values if isinstance(f, ViewFeatures) else f


def score_map(f, params):
    """S[v] = W_cls . F_v + b, one shared affine map applied to every view."""
    values = _values(f)
    if values.shape[-1] != params.w_cls.shape[0]:
        raise DimensionError(
            f"feature width {values.shape[-1]} != classifier input {params.w_cls.shape[0]}"
        )
    return T.linear(values, params.w_cls, params.b_cls)


def viewpoint_distribution(s):
    """Normalize scores over the view axis, independently per class."""
    return T.softmax_axis(s, axis=0)


def category_scores(s, p):
    """Eq-style attention readout: S_c[c] = sum_v S[v,c] * P[v,c].

    Gradients flow through both factors; nothing is detached.
    """
    if s.shape != p.shape:
        raise DimensionError(f"score map {s.shape} != distribution {p.shape}")
    return T.tsum(T.mul(s, p), axis=0)


def sinusoidal_soft_argmax(p_column, angles):
    """Circular mean of bin angles weighted by a probability column.

    Sums probability-weighted sines and cosines and converts the resultant
    vector to an angle with atan2; raises DegenerateDirectionError when the
    resultant vanishes (e.g. uniform mass over opposite bins).
    """
    angles = np.asarray(angles, dtype=np.float64)
    pv = p_column.data if isinstance(p_column, Tensor) else np.asarray(p_column)
    if pv.shape != angles.shape:
        raise DimensionError(f"probability shape {pv.shape} != angle shape {angles.shape}")
    if np.any(pv < 0) or abs(pv.sum() - 1.0) > 1e-6:
        raise ValueError("p_column must be a probability vector (nonnegative, sum 1)")
    p_column = p_column if isinstance(p_column, Tensor) else Tensor(pv)
    y = T.tsum(T.mul(p_column, Tensor(np.sin(angles))))
    x = T.tsum(T.mul(p_column, Tensor(np.cos(angles))))
    return T.atan2(y, x)


def class_viewpoints(p, angles):
    """Per-class soft-argmax angles, (n_classes + 1,); background included."""
    cols = []
    for c in range(p.shape[1]):
        theta_c = sinusoidal_soft_argmax(p[:, c], angles)
        cols.append(T.reshape(theta_c, (1,)))
    return T.concat(cols, axis=0)


def box_deltas(f, params):
    """Per-(view, class) deltas, (n_views, n_classes, 4), shared affine map."""
    values = _values(f)
    n_views = values.shape[0]
    out = T.linear(values, params.w_reg, params.b_reg)
    return T.reshape(out, (n_views, params.n_classes, 4))


def scores_from_maps(s, t, angles):
    """Assemble a ViewScores from a score map and delta map (Eqs. 2-3 downstream)."""
    p = viewpoint_distribution(s)
    return ViewScores(
        S=s,
        P=p,
        S_c=category_scores(s, p),
        theta=class_viewpoints(p, angles),
        t=t,
        angles=np.asarray(angles, dtype=np.float64),
    )


def ccn_scores(x, kernel, params):
    """Full head forward for one ROI feature under the cylindrical kernel."""
    feats = contract_windows(x, assemble_windows(kernel))
    return scores_from_maps(
        score_map(feats, params), box_deltas(feats, params), bin_angles(kernel.n_views)
    )


def baseline_scores(x, params):
    """View-agnostic baseline: one kernel, dense maps to all views' outputs.

    Returns (S, t) with the same shapes the cylindrical head produces, so
    the downstream scoring/soft-argmax machinery applies unchanged.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    k1, k2, cin, _ = params.w_kernel.shape
    if x.shape != (k1, k2, cin):
        raise DimensionError(f"input shape {x.shape} != kernel window {(k1, k2, cin)}")
    windows = T.reshape(params.w_kernel, (1,) + params.w_kernel.shape)
    g = T.reshape(contract_windows(x, windows), (params.w_kernel.shape[3],))
    nv, nc = params.n_views, params.n_classes
    s = T.reshape(T.linear(g, params.w_cls, params.b_cls), (nv, nc + 1))
    t = T.reshape(T.linear(g, params.w_reg, params.b_reg), (nv, nc, 4))
    return s, t


def baseline_view_scores(x, params):
    s, t = baseline_scores(x, params)
    return scores_from_maps(s, t, bin_angles(params.n_views))


# ---------------------------------------------------------------------------
# box parameterization (Girshick-style deltas on center boxes)

def _check_box(box, who):
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise GeometryError(f"{who} must be (cx, cy, w, h)")
    if box[2] <= 0 or box[3] <= 0:
        raise GeometryError(f"{who} has non-positive size: w={box[2]}, h={box[3]}")
    return box


def encode_box(proposal, gt):
    """Deltas mapping ``proposal`` onto ``gt``: ((gx-px)/pw, (gy-py)/ph, ln gw/pw, ln gh/ph)."""
    p = _check_box(proposal, "proposal")
    g = _check_box(gt, "ground-truth box")
    return np.array([
        (g[0] - p[0]) / p[2],
        (g[1] - p[1]) / p[3],
        np.log(g[2] / p[2]),
        np.log(g[3] / p[3]),
    ])


def decode_box(proposal, delta):
    """Apply deltas to a proposal; inverse of encode_box."""
    p = _check_box(proposal, "proposal")
    d = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=np.float64)
    if d.shape != (4,):
        raise GeometryError("delta must have 4 components")
    return np.array([
        p[0] + p[2] * d[0],
        p[1] + p[3] * d[1],
        p[2] * np.exp(d[2]),
        p[3] * np.exp(d[3]),
    ])


def box_iou(a, b):
    a = _check_box(a, "box a")
    b = _check_box(b, "box b")
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def angular_residual(theta, theta_hat):
    """Signed wrapped difference theta - theta_hat in (-pi, pi].

    Differentiable when ``theta`` is a Tensor (away from the +-pi seam);
    plain floats are wrapped numerically.
    """
    if isinstance(theta, Tensor):
        d = T.sub(theta, T._lift(float(theta_hat)))
        return T.atan2(T.sin(d), T.cos(d))
    return wrap_angle(float(theta) - float(theta_hat))


def azimuth_bin(theta, n_views):
    """Index of the bin whose sector contains ``theta`` (bins centered at i_v)."""
    width = 2.0 * np.pi / n_views
    return int(np.floor(wrap_angle(theta) / width + 0.5)) % n_views


def default_beta_view(n_views):
    """Half the viewpoint bin width, radians."""
    return np.pi / n_views


def loss_terms(scores, target, proposal, beta_box=1.0, beta_view=None, background_label=0):
    """Per-term losses of one ROI; absent terms are None.

    Background targets contribute classification only. For foreground, the
    delta row is selected at the ground-truth azimuth bin when annotated,
    else at the distribution's argmax for the true class (the
    semi-supervised path). The viewpoint term applies smooth L1 to the
    wrapped residual of the true class's angle.
    """
    n_views = scores.S.shape[0]
    if beta_view is None:
        beta_view = default_beta_view(n_views)
    c_hat = int(target.class_label)
    terms = {"cls": T.cross_entropy_logits(scores.S_c, c_hat), "reg": None, "view": None}
    if c_hat == background_label:
        return terms
    if target.box is None:
        raise TargetError("foreground target without a ground-truth box")
    if target.azimuth is not None:
        v_hat = azimuth_bin(target.azimuth, n_views)
    else:
        v_hat = int(np.argmax(scores.P.data[:, c_hat]))
    delta_target = encode_box(proposal, target.box)
    terms["reg"] = T.smooth_l1(scores.t[v_hat, c_hat - 1], delta_target, beta_box)
    if target.azimuth is not None:
        residual = angular_residual(scores.theta[c_hat], target.azimuth)
        terms["view"] = T.smooth_l1(residual, np.zeros(()), beta_view)
    return terms


def total_loss(scores, target, proposal, weights=(1.0, 1.0, 1.0), beta_box=1.0, beta_view=None):
    """Weighted sum of classification, box, and viewpoint losses for one ROI."""
    terms = loss_terms(scores, target, proposal, beta_box=beta_box, beta_view=beta_view)
    loss = T.scale(terms["cls"], weights[0])
    if terms["reg"] is not None:
        loss = T.add(loss, T.scale(terms["reg"], weights[1]))
    if terms["view"] is not None:
        loss = T.add(loss, T.scale(terms["view"], weights[2]))
    return loss
