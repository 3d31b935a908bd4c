"""End-to-end optimization and evaluation on the synthetic dataset.

A four-block strided conv backbone maps each image to the k x k x ch_in
feature the head consumes; both head modes (cylindrical and the
view-agnostic baseline) train under the same multi-task loss with plain
SGD (momentum + weight decay). Runs are bitwise deterministic for a
fixed seed in single-threaded execution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import head as H
from . import tensor as T
from .cylinder import CylindricalKernel, assemble_windows, contract_windows_fast
from .fileio import ConfigError, TrainConfig, read_checkpoint, read_dataset, write_checkpoint
from .head import BaselineHeadParams, HeadParams, Target
from .synth import content_bbox
from .tensor import NonFiniteError, Tensor, no_grad, wrap_angle


class TrainingDivergenceError(ArithmeticError):
    """Loss or gradients left the finite domain during training."""


class EvaluationError(ValueError):
    """Evaluation request that cannot produce metrics (e.g. empty dataset)."""


class ArchitectureMismatchError(ValueError):
    """Checkpoint and dataset/config disagree on the architecture."""


# ---------------------------------------------------------------------------
# model

_BACKBONE_SPEC = ((2, 0), (1, 1), (2, 0), (1, 1))   # (stride, padding) per 3x3 block


def backbone_channels(ch_in):
    return (max(8, ch_in // 2), ch_in, ch_in, ch_in)


def backbone_output_size(img_size):
    size = img_size
    for stride, pad in _BACKBONE_SPEC:
        size = (size + 2 * pad - 3) // stride + 1
    return size


class Model:
    """Backbone plus one of the two heads; owns all trainable tensors."""

    def __init__(self, cfg: TrainConfig):
        out = backbone_output_size(cfg.img_size)
        if out != cfg.k:
            raise ConfigError(
                f"backbone maps {cfg.img_size} px to a {out}x{out} grid, but k={cfg.k}; "
                f"supported pairs include (32, 7), (24, 5), (16, 3)"
            )
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
        self.conv = []
        widths = (1,) + backbone_channels(cfg.ch_in)
        for i, (stride, pad) in enumerate(_BACKBONE_SPEC):
            cin, cout = widths[i], widths[i + 1]
            std = np.sqrt(2.0 / (3 * 3 * cin))
            w = Tensor(rng.normal(0.0, std, (3, 3, cin, cout)), requires_grad=True)
            b = Tensor(np.zeros(cout), requires_grad=True)
            self.conv.append((w, b, stride, pad))
        if cfg.head_mode == "ccn":
            self.kernel = CylindricalKernel.initialize(
                cfg.k, cfg.n_views, cfg.ch_in, cfg.ch_out, rng, cfg.pad_mode
            )
            self.head = HeadParams.initialize(cfg.n_classes, cfg.n_views, cfg.ch_out, rng)
        elif cfg.head_mode == "baseline":
            self.kernel = None
            self.head = BaselineHeadParams.initialize(
                cfg.k, cfg.n_classes, cfg.n_views, cfg.ch_in, cfg.ch_out, rng
            )
        else:
            raise ConfigError(f"unknown head_mode {cfg.head_mode!r}")
        self.angles = H.bin_angles(cfg.n_views)

    def named_parameters(self):
        params = {}
        for i, (w, b, _, _) in enumerate(self.conv):
            params[f"backbone.conv{i}.w"] = w
            params[f"backbone.conv{i}.b"] = b
        if self.kernel is not None:
            for name, p in self.kernel.parameters().items():
                params[f"head.cyl.{name}"] = p
        for name, p in self.head.parameters().items():
            params[f"head.{name}"] = p
        return params

    def features(self, images):
        """(B, G, G, 1) image batch to (B, k, k, ch_in) ROI features."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        for w, b, stride, pad in self.conv:
            x = T.relu(T.conv2d(x, w, b, stride=stride, padding=pad))
        return x

    def view_maps(self, feats):
        """Batched score and delta maps: (B, N_v, N_c+1) and (B, N_v, N_c, 4)."""
        cfg = self.cfg
        if cfg.head_mode == "ccn":
            f = contract_windows_fast(feats, assemble_windows(self.kernel))
            s = T.linear(f, self.head.w_cls, self.head.b_cls)
            t = T.reshape(
                T.linear(f, self.head.w_reg, self.head.b_reg),
                (feats.shape[0], cfg.n_views, cfg.n_classes, 4),
            )
            return s, t
        windows = T.reshape(self.head.w_kernel, (1,) + self.head.w_kernel.shape)
        g = T.reshape(contract_windows_fast(feats, windows), (feats.shape[0], cfg.ch_out))
        s = T.reshape(
            T.linear(g, self.head.w_cls, self.head.b_cls),
            (feats.shape[0], cfg.n_views, cfg.n_classes + 1),
        )
        t = T.reshape(
            T.linear(g, self.head.w_reg, self.head.b_reg),
            (feats.shape[0], cfg.n_views, cfg.n_classes, 4),
        )
        return s, t

    def batch_scores(self, images):
        """Per-sample ViewScores for a batch of images."""
        feats = self.features(images)
        s_b, t_b = self.view_maps(feats)
        return [
            H.scores_from_maps(s_b[i], t_b[i], self.angles)
            for i in range(s_b.shape[0])
        ]

    def state_tensors(self):
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state(self, tensors):
        params = self.named_parameters()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ArchitectureMismatchError(
                f"checkpoint tensors do not match model: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, p in params.items():
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ArchitectureMismatchError(
                    f"tensor {name!r} has shape {value.shape}, expected {p.shape}"
                )
            p.data = value.copy()


def model_from_checkpoint(path, img_size=32):
    arch, tensors = read_checkpoint(path)
    cfg = TrainConfig(
        k=arch["k"], n_views=arch["n_views"], n_classes=arch["n_classes"],
        ch_in=arch["ch_in"], ch_out=arch["ch_out"],
        head_mode=arch["head_mode"], pad_mode=arch["pad_mode"], img_size=img_size,
    )
    model = Model(cfg)
    model.load_state(tensors)
    return model


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(params, grads, velocities, lr, momentum, weight_decay):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name!r}")
        v = velocities.get(name)
        if v is None:
            v = np.zeros(p.shape)
        v = momentum * v + g + weight_decay * p.data
        velocities[name] = v
        p.data = p.data - lr * v
    return params


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {}

    def step(self, grads):
        sgd_step(self.params, grads, self.velocities, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricReport:
    top1: float
    top3: float
    acc_pi_6: float
    mederr_deg: float
    aos: float
    avp_joint: float
    per_class: dict = field(default_factory=dict)
    mederr_correct_deg: float | None = None   # secondary: over correct classifications only
    n_samples: int = 0

    def validate(self):
        for name in ("top1", "top3", "acc_pi_6", "aos", "avp_joint"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise EvaluationError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.mederr_deg <= 180.0:
            raise EvaluationError(f"mederr_deg={self.mederr_deg} outside [0, 180]")
        return self

    def as_porcelain(self):
        lines = [
            f"top1={self.top1:.6f}",
            f"top3={self.top3:.6f}",
            f"acc_pi_6={self.acc_pi_6:.6f}",
            f"mederr_deg={self.mederr_deg:.6f}",
            f"aos={self.aos:.6f}",
            f"avp_joint={self.avp_joint:.6f}",
            f"n_samples={self.n_samples}",
        ]
        if self.mederr_correct_deg is not None:
            lines.append(f"mederr_correct_deg={self.mederr_correct_deg:.6f}")
        for label in sorted(self.per_class):
            stats = self.per_class[label]
            lines.append(f"class{label}_top1={stats['top1']:.6f}")
            lines.append(f"class{label}_mederr_deg={stats['mederr_deg']:.6f}")
        return "\n".join(lines)


@dataclass
class SampleOutcome:
    true_label: int
    pred_label: int
    top3_hit: bool
    err_deg: float | None     # None when the sample's azimuth is unannotated
    iou: float
    bin_match: bool


def aggregate_metrics(rows, n_classes):
    """Fold per-sample outcomes into a MetricReport.

    Acc_pi/6 counts errors strictly below 30 degrees; MedErr is taken over
    all annotated foreground samples, with the correct-classification-only
    median reported as a secondary figure. AOS averages (1 + cos err)/2
    over correctly classified samples (0 when there are none). With no
    annotated samples at all the angular metrics take their worst-case
    values (the classification metrics remain meaningful).
    """
    if not rows:
        raise EvaluationError("no foreground samples to evaluate")
    n = len(rows)
    correct_all = np.array([r.pred_label == r.true_label for r in rows])
    ann = [r for r in rows if r.err_deg is not None]
    if ann:
        errs = np.array([r.err_deg for r in ann])
        correct = np.array([r.pred_label == r.true_label for r in ann])
        acc = float((errs < 30.0).mean())
        mederr = float(np.median(errs))
        aos = float(np.mean((1.0 + np.cos(np.radians(errs[correct]))) / 2.0)) if correct.any() else 0.0
        avp = float(np.mean([
            (r.pred_label == r.true_label) and r.iou >= 0.5 and r.bin_match for r in ann
        ]))
        mederr_correct = float(np.median(errs[correct])) if correct.any() else None
    else:
        acc, mederr, aos, avp, mederr_correct = 0.0, 180.0, 0.0, 0.0, None
    report = MetricReport(
        top1=float(correct_all.mean()),
        top3=float(np.mean([r.top3_hit for r in rows])),
        acc_pi_6=acc,
        mederr_deg=mederr,
        aos=aos,
        avp_joint=avp,
        mederr_correct_deg=mederr_correct,
        n_samples=n,
    )
    for label in range(1, n_classes + 1):
        sub = [r for r in rows if r.true_label == label]
        if not sub:
            continue
        sub_err = [r.err_deg for r in sub if r.err_deg is not None]
        report.per_class[label] = {
            "top1": float(np.mean([r.pred_label == label for r in sub])),
            "mederr_deg": float(np.median(sub_err)) if sub_err else 180.0,
            "count": len(sub),
        }
    return report.validate()


def _sample_target(sample):
    if sample.label == 0:
        return Target(0)
    return Target(
        class_label=sample.label,
        box=content_bbox(sample.image),
        azimuth=None if sample.azimuth is None else float(sample.azimuth),
    )


@dataclass
class Prediction:
    pred_label: int
    theta: float          # radians in (-pi, pi]
    box: np.ndarray       # decoded (cx, cy, w, h)


def predict_one(scores, proposal, n_classes):
    """Inference protocol: argmax class over foreground, then that class's angle/deltas."""
    fg = scores.S_c.data[1:]
    pred = 1 + int(np.argmax(fg))
    theta_pred = float(scores.theta.data[pred])
    v_star = int(np.argmax(scores.P.data[:, pred]))
    decoded = H.decode_box(np.asarray(proposal, dtype=np.float64), scores.t.data[v_star, pred - 1])
    return Prediction(pred_label=pred, theta=theta_pred, box=decoded)


def predict(model, samples, batch_size=64):
    """Per-sample predictions for every foreground sample, annotated or not."""
    fg = [s for s in samples if s.label != 0]
    preds = []
    with no_grad():
        for start in range(0, len(fg), batch_size):
            chunk = fg[start:start + batch_size]
            images = np.stack([s.image.astype(np.float64) for s in chunk])[..., None]
            for scores, sample in zip(model.batch_scores(images), chunk):
                preds.append(predict_one(scores, sample.box, model.cfg.n_classes))
    return fg, preds


def _outcome(scores, sample, n_classes, n_views):
    s_c = scores.S_c.data
    fg = s_c[1:]
    pred = 1 + int(np.argmax(fg))
    order = 1 + np.argsort(fg)[::-1]
    top3_hit = sample.label in order[:3]
    theta_pred = float(scores.theta.data[pred])
    v_star = int(np.argmax(scores.P.data[:, pred]))
    proposal = np.asarray(sample.box, dtype=np.float64)
    decoded = H.decode_box(proposal, scores.t.data[v_star, pred - 1])
    iou = H.box_iou(decoded, content_bbox(sample.image))
    if sample.azimuth is None:
        err_deg = None
        bin_match = False
    else:
        err_deg = abs(np.degrees(wrap_angle(theta_pred - float(sample.azimuth))))
        bin_match = (
            H.azimuth_bin(theta_pred, n_views) == H.azimuth_bin(float(sample.azimuth), n_views)
        )
    return SampleOutcome(sample.label, pred, top3_hit, err_deg, iou, bin_match)


def evaluate(model, samples, batch_size=64):
    """Metric suite over the foreground samples of a dataset.

    Follows the ground-truth-box ablation protocol: classification argmax
    excludes the background class, the predicted angle is the predicted
    class's soft-argmax output, and AVP additionally requires decoded-box
    IoU >= 0.5 and the angle to land in the ground-truth azimuth bin.
    """
    fg = [s for s in samples if s.label != 0]
    if not fg:
        raise EvaluationError("no foreground samples to evaluate")
    cfg = model.cfg
    rows = []
    with no_grad():
        for start in range(0, len(fg), batch_size):
            chunk = fg[start:start + batch_size]
            images = np.stack([s.image.astype(np.float64) for s in chunk])[..., None]
            for scores, sample in zip(model.batch_scores(images), chunk):
                rows.append(_outcome(scores, sample, cfg.n_classes, cfg.n_views))
    return aggregate_metrics(rows, cfg.n_classes)


def evaluate_checkpoint(checkpoint_path, data_path):
    """CLI-facing evaluation: loads both files and checks they agree."""
    samples, meta = read_dataset(data_path)
    arch, _ = read_checkpoint(checkpoint_path)
    if arch["n_classes"] != meta.n_classes or arch["n_views"] != meta.n_views:
        raise ArchitectureMismatchError(
            f"checkpoint expects n_classes={arch['n_classes']}, n_views={arch['n_views']} "
            f"but dataset has n_classes={meta.n_classes}, n_views={meta.n_views}"
        )
    expected_k = backbone_output_size(meta.img_size)
    if expected_k != arch["k"]:
        raise ArchitectureMismatchError(
            f"dataset image size {meta.img_size} maps to a {expected_k}-wide grid "
            f"but the checkpoint was built for k={arch['k']}"
        )
    model = model_from_checkpoint(checkpoint_path, img_size=meta.img_size)
    return evaluate(model, samples)


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochLog:
    epoch: int
    loss_cls: float
    loss_reg: float
    loss_view: float
    val_top1: float
    val_mederr_deg: float

    def line(self):
        return (
            f"epoch={self.epoch} loss_cls={self.loss_cls:.6f} loss_reg={self.loss_reg:.6f} "
            f"loss_view={self.loss_view:.6f} val_top1={self.val_top1:.6f} "
            f"val_mederr_deg={self.val_mederr_deg:.6f}"
        )


@dataclass
class TrainResult:
    model: Model
    history: list
    checkpoint_path: str
    seconds: float


def _batch_loss(model, batch, cfg):
    images = np.stack([s.image.astype(np.float64) for s in batch])[..., None]
    scores_list = model.batch_scores(Tensor(images))
    weights = cfg.loss_weights()
    beta_view = cfg.resolved_beta_view()
    total = None
    sums = {"cls": 0.0, "reg": 0.0, "view": 0.0}
    counts = {"cls": 0, "reg": 0, "view": 0}
    for scores, sample in zip(scores_list, batch):
        target = _sample_target(sample)
        proposal = np.asarray(sample.box, dtype=np.float64)
        terms = H.loss_terms(scores, target, proposal, beta_box=cfg.beta_box, beta_view=beta_view)
        loss = T.scale(terms["cls"], weights[0])
        for key, w in (("reg", weights[1]), ("view", weights[2])):
            if terms[key] is not None:
                loss = T.add(loss, T.scale(terms[key], w))
        for key in sums:
            if terms[key] is not None:
                sums[key] += float(terms[key].data)
                counts[key] += 1
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(batch)), sums, counts


def train(cfg: TrainConfig, train_samples=None, val_samples=None, write_files=True):
    """Full training run; returns the model, per-epoch history, and timing.

    Deterministic for a fixed config and seed: initialization, shuffling,
    and every update draw from seeded generators in a fixed order. A
    non-finite loss aborts with the last completed epoch's checkpoint.
    """
    cfg.validate()
    if train_samples is None:
        train_samples, _ = read_dataset(cfg.train_data)
    if val_samples is None:
        val_samples, _ = read_dataset(cfg.resolved_val_data())
    model = Model(cfg)
    params = model.named_parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    history = []
    last_good = model.state_tensors()
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        if (epoch + 1) in cfg.lr_decay_epochs:
            opt.lr *= cfg.lr_decay_factor
        order = shuffle_rng.permutation(len(train_samples))
        sums = {"cls": 0.0, "reg": 0.0, "view": 0.0}
        counts = {"cls": 0, "reg": 0, "view": 0}
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            try:
                loss, batch_sums, batch_counts = _batch_loss(model, batch, cfg)
                if not np.isfinite(loss.data):
                    raise TrainingDivergenceError(f"non-finite loss in epoch {epoch}")
                opt.zero_grad()
                T.backward(loss)
                grads = {name: p.grad for name, p in params.items()}
                opt.step(grads)
            except (TrainingDivergenceError, NonFiniteError):
                if write_files:
                    write_checkpoint(cfg.checkpoint, cfg.arch(), last_good)
                raise
            for key in sums:
                sums[key] += batch_sums[key]
                counts[key] += batch_counts[key]
        report = evaluate(model, val_samples)
        history.append(
            EpochLog(
                epoch=epoch,
                loss_cls=sums["cls"] / max(counts["cls"], 1),
                loss_reg=sums["reg"] / max(counts["reg"], 1),
                loss_view=sums["view"] / max(counts["view"], 1),
                val_top1=report.top1,
                val_mederr_deg=report.mederr_deg,
            )
        )
        last_good = model.state_tensors()
    seconds = time.perf_counter() - started
    if write_files:
        write_checkpoint(cfg.checkpoint, cfg.arch(), model.state_tensors())
        with open(cfg.resolved_log_path(), "w", encoding="utf-8") as fh:
            for entry in history:
                fh.write(entry.line() + "\n")
    return TrainResult(model=model, history=history, checkpoint_path=cfg.checkpoint, seconds=seconds)


# ---------------------------------------------------------------------------
# head comparison (ablation)

@dataclass
class CompareResult:
    modes: tuple            # mode name per side
    per_seed: tuple         # per side: list[MetricReport], one per seed
    medians: tuple          # per side: dict of median metrics
    seeds: tuple

    def _side(self, mode):
        if isinstance(mode, int):
            return mode
        return self.modes.index(mode)

    def reports(self, mode):
        return self.per_seed[self._side(mode)]

    def median(self, mode, metric):
        return self.medians[self._side(mode)][metric]


def compare_heads(cfg, train_samples, val_samples, n_seeds=3, modes=("ccn", "baseline")):
    """Train both head modes with matched seeds/schedule/data and compare.

    Per-seed reports are collected per side plus the across-seed medians
    of the headline metrics; sides may name the same mode (a determinism
    sanity configuration).
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    per_seed = tuple([] for _ in modes)
    seeds = tuple(cfg.seed + i for i in range(n_seeds))
    for seed in seeds:
        for side, mode in enumerate(modes):
            run_cfg = replace(cfg, seed=seed, head_mode=mode)
            result = train(run_cfg, train_samples, val_samples, write_files=False)
            per_seed[side].append(evaluate(result.model, val_samples))
    medians = tuple(
        {
            "top1": float(np.median([r.top1 for r in reports])),
            "acc_pi_6": float(np.median([r.acc_pi_6 for r in reports])),
            "mederr_deg": float(np.median([r.mederr_deg for r in reports])),
            "aos": float(np.median([r.aos for r in reports])),
        }
        for reports in per_seed
    )
    return CompareResult(modes=tuple(modes), per_seed=per_seed, medians=medians, seeds=seeds)
