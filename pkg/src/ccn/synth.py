"""Deterministic synthetic azimuth dataset.

Each category is an asymmetric 3-D wireframe; samples are orthographic
renders at known azimuths with small seeded elevation jitter and pixel
noise. Everything is a pure function of the generation config: per-shape
and per-sample RNG streams are derived from (tag, category, bin, index)
seed sequences, so regeneration is byte-identical and any stored sample
can be re-rendered from its metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .head import GeometryError, azimuth_bin
from .tensor import wrap_angle

# seed-sequence tags keeping the independent RNG streams apart
_TAG_SHAPE = 11
_TAG_SAMPLE = 12
_TAG_RENDER = 13
_TAG_BACKGROUND = 14

CONTENT_THRESHOLD = 0.3
_LINE_CORE = 0.25      # px radius at full intensity
_LINE_FADE = 1.1       # px radius where intensity reaches zero
_DEPTH_DIM = 0.55      # brightness of the farthest edges


class GenerationError(RuntimeError):
    """Shape generation failed to meet the distinguishability invariant."""


@dataclass
class WireShape:
    category: int
    vertices: np.ndarray          # (n, 3), unit-cube normalized
    edges: list[tuple[int, int]]
    seed: int


@dataclass
class Sample:
    """One dataset record; label 0 marks a background crop."""

    image: np.ndarray             # (G, G) float32 in [0, 1]
    label: int
    azimuth: float | None         # radians in (-pi, pi], None = unannotated
    box: np.ndarray               # (cx, cy, w, h) float32, pixel units


@dataclass
class GenConfig:
    n_classes: int = 3
    n_views: int = 24
    samples_per_cell: int = 10
    split: float = 0.8
    unannotated_fraction: float = 0.0
    background_fraction: float = 0.1
    img_size: int = 32
    noise_sigma: float = 0.02
    elevation_jitter: float = math.radians(3.0)
    instances_per_category: int = 0   # 0: a fresh shape instance per sample
    seed: int = 0


# ---------------------------------------------------------------------------
# base topologies: five asymmetric wireframe skeletons in [-0.5, 0.5]^3

def _topology(index):
    if index == 0:
        # gabled box with an off-center ridge and a corner mast
        v = [
            (-0.45, -0.45, -0.25), (0.45, -0.45, -0.25), (0.45, -0.45, 0.25), (-0.45, -0.45, 0.25),
            (-0.45, 0.10, -0.25), (0.45, 0.10, -0.25), (0.45, 0.10, 0.25), (-0.45, 0.10, 0.25),
            (-0.40, 0.42, 0.00), (0.10, 0.42, 0.00), (0.48, 0.50, -0.25),
        ]
        e = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 5), (2, 6), (3, 7),
             (4, 5), (5, 6), (6, 7), (7, 4), (4, 8), (7, 8), (5, 9), (6, 9),
             (8, 9), (5, 10)]
    elif index == 1:
        # arrow: shaft, pyramid head, asymmetric tail fins
        v = [
            (-0.50, 0.00, 0.00), (0.25, 0.00, 0.00), (0.50, 0.00, 0.00),
            (0.25, 0.18, 0.18), (0.25, 0.18, -0.18), (0.25, -0.18, -0.18), (0.25, -0.18, 0.18),
            (-0.50, 0.30, 0.05), (-0.50, -0.12, 0.28), (-0.28, 0.00, 0.00),
        ]
        e = [(0, 1), (3, 4), (4, 5), (5, 6), (6, 3), (2, 3), (2, 4), (2, 5), (2, 6),
             (1, 3), (1, 5), (0, 7), (9, 7), (0, 8), (9, 8)]
    elif index == 2:
        # staircase prism with unequal front/back extrusion depth
        prof = [(-0.50, -0.40), (-0.50, -0.05), (-0.15, -0.05), (-0.15, 0.20),
                (0.20, 0.20), (0.20, 0.45), (0.50, 0.45), (0.50, -0.40)]
        v = [(x, y, 0.28) for x, y in prof] + [(x, y, -0.12) for x, y in prof]
        n = len(prof)
        e = [(i, (i + 1) % n) for i in range(n)]
        e += [(n + i, n + (i + 1) % n) for i in range(n)]
        e += [(i, n + i) for i in range(n)]
    elif index == 3:
        # tripod with a triangular flag on one leg
        v = [
            (0.00, 0.50, 0.00),
            (-0.45, -0.50, -0.30), (0.40, -0.50, -0.35), (0.05, -0.50, 0.45),
            (-0.22, 0.00, -0.15), (0.22, 0.00, -0.17),
            (0.30, 0.35, 0.05), (0.30, 0.12, 0.05),
        ]
        e = [(0, 1), (0, 2), (0, 3), (4, 5), (1, 5), (2, 4), (0, 6), (6, 7), (0, 7)]
    else:
        # wedge with a tail boom and fin
        v = [
            (-0.30, -0.40, -0.30), (0.50, -0.40, -0.30), (0.50, -0.40, 0.30), (-0.30, -0.40, 0.30),
            (0.50, 0.25, -0.30), (0.50, 0.25, 0.30),
            (-0.50, 0.05, 0.00), (-0.50, 0.40, 0.10),
        ]
        e = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 4), (2, 5), (4, 5), (0, 4), (3, 5),
             (0, 6), (3, 6), (6, 7)]
    return np.array(v, dtype=np.float64), [tuple(p) for p in e]


def _normalize_unit_cube(verts):
    center = (verts.max(axis=0) + verts.min(axis=0)) / 2.0
    out = verts - center
    span = (verts.max(axis=0) - verts.min(axis=0)).max()
    return out / span


def make_shape(category, seed, n_views=24, img_size=32, max_attempts=100):
    """Deterministic asymmetric wireframe for one category.

    The base topology depends only on the category; the seed jitters the
    vertices. Regenerates (bounded) until renders at all bin-center
    azimuths are pairwise distinguishable in >= 1% of pixels.
    """
    if category < 1:
        raise ValueError("categories are 1-based")
    base_v, edges = _topology((category - 1) % 5)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence((_TAG_SHAPE, category, seed, attempt)))
        verts = _normalize_unit_cube(base_v + rng.uniform(-0.05, 0.05, base_v.shape))
        shape = WireShape(category=category, vertices=verts, edges=edges, seed=seed)
        if _azimuth_identifiable(shape, n_views, img_size):
            return shape
    raise GenerationError(
        f"category {category}, seed {seed}: no azimuth-identifiable jitter in {max_attempts} tries"
    )


def _azimuth_identifiable(shape, n_views, img_size, min_frac=0.01, pix_tol=0.05):
    centers = bin_center_angles(n_views)
    stack = np.stack([render(shape, a, 0.0, 0.0, 0, img_size) for a in centers])
    need = int(np.ceil(min_frac * img_size * img_size))
    for i in range(n_views):
        diff = np.abs(stack[i + 1:] - stack[i]) > pix_tol
        if diff.size and (diff.sum(axis=(1, 2)) < need).any():
            return False
    return True


def bin_center_angles(n_views):
    return np.arange(n_views) * (2.0 * np.pi / n_views)


# ---------------------------------------------------------------------------
# rendering

def _rotate(verts, azimuth, elevation):
    ca, sa = math.cos(azimuth), math.sin(azimuth)
    ce, se = math.cos(elevation), math.sin(elevation)
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    # yaw about the vertical (y) axis, then pitch about x
    x1 = ca * x + sa * z
    z1 = -sa * x + ca * z
    y2 = ce * y - se * z1
    z2 = se * y + ce * z1
    return np.stack([x1, y2, z2], axis=1)


def render(shape, azimuth, elevation_jitter=0.0, noise_sigma=0.0, seed=0, img_size=32):
    """Orthographic anti-aliased wireframe render, values in [0, 1].

    Edges are depth-cued: brightness falls off with distance from the
    camera, which disambiguates views that project to mirror-image
    silhouettes (a wireframe seen from the front vs. the back).
    Deterministic in all arguments; the seeded RNG draws the elevation
    offset first and the pixel noise second. The azimuth is wrapped with an
    exact IEEE remainder so angles differing by 2*pi render identically.
    """
    azimuth = math.remainder(float(azimuth), math.tau)
    rng = np.random.default_rng(np.random.SeedSequence((_TAG_RENDER, int(seed))))
    elevation = rng.uniform(-elevation_jitter, elevation_jitter) if elevation_jitter > 0 else 0.0
    rot = _rotate(shape.vertices, azimuth, elevation)
    g = img_size
    px_scale = (g / 2.0 - 2.0) / 0.75
    # centered pixel coordinates; column c sits at c - (G-1)/2, row r at (G-1)/2 - r
    pts = rot[:, :2] * px_scale
    depth = rot[:, 2]
    cols = np.arange(g) - (g - 1) / 2.0
    rows = (g - 1) / 2.0 - np.arange(g)
    gx = np.broadcast_to(cols[None, :], (g, g))
    gy = np.broadcast_to(rows[:, None], (g, g))
    canvas = np.zeros((g, g))
    for i, j in shape.edges:
        ax, ay = pts[i]
        bx, by = pts[j]
        bax, bay = bx - ax, by - ay
        bb = bax * bax + bay * bay
        pax = gx - ax
        pay = gy - ay
        if bb > 0:
            t = np.clip((pax * bax + pay * bay) / bb, 0.0, 1.0)
        else:
            t = 0.0
        dx = pax - t * bax
        dy = pay - t * bay
        d = np.sqrt(dx * dx + dy * dy)
        alpha = np.clip((_LINE_FADE - d) / (_LINE_FADE - _LINE_CORE), 0.0, 1.0)
        # camera looks along -z; z in [-1, 1] maps to brightness [dim, 1]
        z_t = depth[i] + t * (depth[j] - depth[i])
        bright = _DEPTH_DIM + (1.0 - _DEPTH_DIM) * np.clip((z_t + 1.0) / 2.0, 0.0, 1.0)
        np.maximum(canvas, alpha * bright, out=canvas)
    if noise_sigma > 0:
        canvas = np.clip(canvas + rng.normal(0.0, noise_sigma, (g, g)), 0.0, 1.0)
    return canvas


def content_bbox(image, threshold=CONTENT_THRESHOLD):
    """Tight (cx, cy, w, h) box around pixels at or above the threshold.

    This is the ground-truth box convention: it is recomputable from a
    stored image alone, so dataset records only need to carry the jittered
    proposal box.
    """
    mask = np.asarray(image) >= threshold
    if not mask.any():
        raise GeometryError("image has no content above the threshold")
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    return np.array([
        (cols[0] + cols[-1]) / 2.0,
        (rows[0] + rows[-1]) / 2.0,
        float(cols[-1] - cols[0] + 1),
        float(rows[-1] - rows[0] + 1),
    ])


def full_image_box(img_size):
    """The crop-itself box used for background samples."""
    return np.array([(img_size - 1) / 2.0, (img_size - 1) / 2.0, float(img_size), float(img_size)])


# ---------------------------------------------------------------------------
# dataset assembly

def sample_render_seed(cfg_seed, category, bin_index, index):
    """Render seed of foreground sample (category, bin, index); pure derivation."""
    ss = np.random.SeedSequence((_TAG_SAMPLE, cfg_seed, category, bin_index, index))
    return int(ss.generate_state(1)[0])


def sample_instance_seed(cfg, category, bin_index, index):
    """Shape-instance seed for one sample slot.

    With a finite pool the slots cycle through it; with
    instances_per_category == 0 every slot is a distinct instance.
    """
    if cfg.instances_per_category > 0:
        instance = (bin_index * cfg.samples_per_cell + index) % cfg.instances_per_category
    else:
        instance = bin_index * cfg.samples_per_cell + index
    ss = np.random.SeedSequence((_TAG_SHAPE, cfg.seed, category, instance))
    return int(ss.generate_state(1)[0])


def _draw_azimuth(rng, bin_index, n_views):
    """float32-exact azimuth uniform within the bin (redraw on edge rounding)."""
    width = 2.0 * np.pi / n_views
    center = bin_index * width
    while True:
        theta = np.float32(wrap_angle(center + rng.uniform(-width / 2, width / 2)))
        if azimuth_bin(float(theta), n_views) == bin_index:
            return float(theta)


def make_foreground_sample(shape, cfg, bin_index, index):
    """One rendered sample; all randomness derives from (seed, cat, bin, index)."""
    rng = np.random.default_rng(
        np.random.SeedSequence((_TAG_SAMPLE, cfg.seed, shape.category, bin_index, index))
    )
    azimuth = _draw_azimuth(rng, bin_index, cfg.n_views)
    rseed = sample_render_seed(cfg.seed, shape.category, bin_index, index)
    image = render(shape, azimuth, cfg.elevation_jitter, cfg.noise_sigma, rseed, cfg.img_size)
    gt = content_bbox(image)
    sx = 1.0 + rng.uniform(-0.1, 0.1)
    sy = 1.0 + rng.uniform(-0.1, 0.1)
    dx = rng.uniform(-0.1, 0.1) * gt[2]
    dy = rng.uniform(-0.1, 0.1) * gt[3]
    proposal = np.array([gt[0] + dx, gt[1] + dy, gt[2] * sx, gt[3] * sy], dtype=np.float32)
    stripped = rng.uniform() < cfg.unannotated_fraction
    return Sample(
        image=image.astype(np.float32),
        label=shape.category,
        azimuth=None if stripped else azimuth,
        box=proposal,
    )


def make_background_sample(cfg, index):
    rng = np.random.default_rng(np.random.SeedSequence((_TAG_BACKGROUND, cfg.seed, index)))
    g = cfg.img_size
    image = np.clip(rng.normal(0.0, max(cfg.noise_sigma, 1e-8), (g, g)), 0.0, 1.0)
    return Sample(
        image=image.astype(np.float32),
        label=0,
        azimuth=None,
        box=full_image_box(g).astype(np.float32),
    )


def generate_samples(cfg):
    """All samples as (train, val) lists; a pure function of the config.

    Foreground cells are emitted in (category, bin, index) order with the
    first round(split * per_cell) of each cell going to train; background
    crops follow the same fractional split. Each sample slot renders its
    own seeded shape instance (see sample_instance_seed), so models must
    generalize across instance jitter, not memorize one silhouette.
    """
    shape_cache = {}

    def shape_for(c, b, i):
        seed = sample_instance_seed(cfg, c, b, i)
        key = (c, seed)
        if key not in shape_cache:
            shape_cache[key] = make_shape(c, seed, cfg.n_views, cfg.img_size)
        return shape_cache[key]

    train, val = [], []
    n_train_cell = int(round(cfg.split * cfg.samples_per_cell))
    for c in range(1, cfg.n_classes + 1):
        for b in range(cfg.n_views):
            for i in range(cfg.samples_per_cell):
                sample = make_foreground_sample(shape_for(c, b, i), cfg, b, i)
                (train if i < n_train_cell else val).append(sample)
    n_fg = cfg.n_classes * cfg.n_views * cfg.samples_per_cell
    n_bg = int(round(cfg.background_fraction * n_fg))
    n_bg_train = int(round(cfg.split * n_bg))
    for i in range(n_bg):
        sample = make_background_sample(cfg, i)
        (train if i < n_bg_train else val).append(sample)
    return train, val


def generate_dataset(cfg, out_path, val_path=None):
    """Generate and write the train/val dataset files; returns their paths."""
    from .fileio import dataset_val_path, write_dataset

    if val_path is None:
        val_path = dataset_val_path(out_path)
    train, val = generate_samples(cfg)
    meta = dict(img_size=cfg.img_size, n_classes=cfg.n_classes, n_views=cfg.n_views)
    write_dataset(out_path, train, **meta)
    write_dataset(val_path, val, **meta)
    return out_path, val_path
