"""Bit-exact little-endian file formats and line-oriented config parsing.

Datasets ("CCNS") store float32 images and metadata; checkpoints ("CCNW")
store an architecture block plus named float64 tensors. Both round-trip
byte-identically; writes go through a temp file and rename so partial
files never appear under the target name.
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .synth import GenConfig, Sample

DATASET_MAGIC = b"CCNS"
CHECKPOINT_MAGIC = b"CCNW"
FORMAT_VERSION = 1

_HEAD_MODES = ("ccn", "baseline")
_PAD_MODES = ("wrap", "flip")


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


@dataclass
class DatasetMeta:
    n_samples: int
    img_size: int
    n_classes: int
    n_views: int
    version: int = FORMAT_VERSION


def _atomic_write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def dataset_val_path(train_path):
    """Validation sibling of a train dataset path: data.ccns -> data.val.ccns."""
    root, ext = os.path.splitext(str(train_path))
    return f"{root}.val{ext}" if ext else f"{root}.val"


# ---------------------------------------------------------------------------
# dataset format

_DS_HEADER = struct.Struct("<4sHIHHH")
_DS_TAIL = struct.Struct("<Hf4f")


def write_dataset(path, samples, *, img_size, n_classes, n_views):
    g = int(img_size)
    parts = [_DS_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, len(samples), g, n_classes, n_views)]
    for s in samples:
        image = np.ascontiguousarray(s.image, dtype="<f4")
        if image.shape != (g, g):
            raise FormatError(f"sample image shape {image.shape} != ({g}, {g})")
        azimuth = math.nan if s.azimuth is None else float(s.azimuth)
        box = np.asarray(s.box, dtype=np.float64)
        parts.append(image.tobytes())
        parts.append(_DS_TAIL.pack(int(s.label), azimuth, *box))
    _atomic_write(path, b"".join(parts))


def read_dataset(path):
    """Stream samples back; returns (samples, DatasetMeta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DS_HEADER.size:
        raise FormatError("truncated header at offset 0")
    magic, version, n, g, n_classes, n_views = _DS_HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    img_bytes = g * g * 4
    record = img_bytes + _DS_TAIL.size
    samples = []
    off = _DS_HEADER.size
    for _ in range(n):
        if off + record > len(blob):
            raise FormatError(f"truncated record at byte offset {off}")
        image = np.frombuffer(blob, dtype="<f4", count=g * g, offset=off).reshape(g, g)
        label, azimuth, *box = _DS_TAIL.unpack_from(blob, off + img_bytes)
        samples.append(
            Sample(
                image=image.copy(),
                label=int(label),
                azimuth=None if math.isnan(azimuth) else float(azimuth),
                box=np.array(box, dtype=np.float32),
            )
        )
        off += record
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at offset {off}")
    return samples, DatasetMeta(n, g, n_classes, n_views, version)


# ---------------------------------------------------------------------------
# checkpoint format

_CK_HEADER = struct.Struct("<4sHHHHHHBBI")


def write_checkpoint(path, arch, tensors):
    """arch: dict with k, n_views, n_classes, ch_in, ch_out, head_mode, pad_mode."""
    head_mode = _HEAD_MODES.index(arch["head_mode"])
    pad_mode = _PAD_MODES.index(arch["pad_mode"])
    parts = [
        _CK_HEADER.pack(
            CHECKPOINT_MAGIC, FORMAT_VERSION,
            arch["k"], arch["n_views"], arch["n_classes"], arch["ch_in"], arch["ch_out"],
            head_mode, pad_mode, len(tensors),
        )
    ]
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    _atomic_write(path, b"".join(parts))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CK_HEADER.size:
        raise FormatError("truncated header at offset 0")
    magic, version, k, n_views, n_classes, ch_in, ch_out, head_mode, pad_mode, n_tensors = (
        _CK_HEADER.unpack_from(blob, 0)
    )
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if head_mode >= len(_HEAD_MODES) or pad_mode >= len(_PAD_MODES):
        raise FormatError(f"unknown head/pad mode codes {head_mode}/{pad_mode}")
    arch = dict(
        k=k, n_views=n_views, n_classes=n_classes, ch_in=ch_in, ch_out=ch_out,
        head_mode=_HEAD_MODES[head_mode], pad_mode=_PAD_MODES[pad_mode],
    )
    tensors = {}
    off = _CK_HEADER.size
    for _ in range(n_tensors):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += count * 8
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated tensor record at byte offset {off}") from exc
        tensors[name] = payload.reshape(dims).astype(np.float64)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at offset {off}")
    return arch, tensors


# ---------------------------------------------------------------------------
# training configuration

@dataclass
class TrainConfig:
    # architecture
    k: int = 7
    n_views: int = 24
    n_classes: int = 3
    ch_in: int = 32
    ch_out: int = 64
    head_mode: str = "ccn"
    pad_mode: str = "wrap"
    # schedule
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 16
    lr_decay_epochs: tuple = (15,)
    lr_decay_factor: float = 0.1
    # loss
    loss_w_cls: float = 1.0
    loss_w_reg: float = 1.0
    loss_w_view: float = 1.0
    beta_box: float = 1.0
    beta_view: float | None = None   # None: half the bin width in radians
    # data generation
    samples_per_cell: int = 10
    split: float = 0.8
    unannotated_fraction: float = 0.0
    background_fraction: float = 0.1
    img_size: int = 32
    noise_sigma: float = 0.02
    elevation_jitter_deg: float = 3.0
    instances_per_category: int = 0
    # run
    seed: int = 0
    train_data: str = "data.ccns"
    val_data: str = ""               # empty: derived sibling of train_data
    checkpoint: str = "model.ccnw"
    log_path: str = ""               # empty: checkpoint + ".log"

    def resolved_val_data(self):
        return self.val_data or dataset_val_path(self.train_data)

    def resolved_log_path(self):
        return self.log_path or f"{self.checkpoint}.log"

    def resolved_beta_view(self):
        return self.beta_view if self.beta_view is not None else math.pi / self.n_views

    def loss_weights(self):
        return (self.loss_w_cls, self.loss_w_reg, self.loss_w_view)

    def gen_config(self):
        return GenConfig(
            n_classes=self.n_classes,
            n_views=self.n_views,
            samples_per_cell=self.samples_per_cell,
            split=self.split,
            unannotated_fraction=self.unannotated_fraction,
            background_fraction=self.background_fraction,
            img_size=self.img_size,
            noise_sigma=self.noise_sigma,
            elevation_jitter=math.radians(self.elevation_jitter_deg),
            instances_per_category=self.instances_per_category,
            seed=self.seed,
        )

    def arch(self):
        return dict(
            k=self.k, n_views=self.n_views, n_classes=self.n_classes,
            ch_in=self.ch_in, ch_out=self.ch_out,
            head_mode=self.head_mode, pad_mode=self.pad_mode,
        )

    def validate(self):
        if self.n_views % 2 or self.n_views < self.k:
            raise ConfigError(f"n_views must be even and >= k, got {self.n_views}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"k must be odd and positive, got {self.k}")
        return self


def _parse_int_list(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(p.strip()) for p in text.split(","))


# key -> (parser, validator or None); validators raise ValueError on bad values
_CONFIG_KEYS = {
    "k": (int, lambda v: v >= 1 and v % 2 == 1),
    "n_views": (int, lambda v: v >= 2 and v % 2 == 0),
    "n_classes": (int, lambda v: v >= 1),
    "ch_in": (int, lambda v: v >= 1),
    "ch_out": (int, lambda v: v >= 1),
    "head_mode": (str, lambda v: v in _HEAD_MODES),
    "pad_mode": (str, lambda v: v in _PAD_MODES),
    "lr": (float, lambda v: v > 0),
    "momentum": (float, lambda v: 0 <= v < 1),
    "weight_decay": (float, lambda v: v >= 0),
    "epochs": (int, lambda v: v >= 1),
    "batch_size": (int, lambda v: v >= 1),
    "lr_decay_epochs": (_parse_int_list, None),
    "lr_decay_factor": (float, lambda v: 0 < v <= 1),
    "loss_w_cls": (float, lambda v: v >= 0),
    "loss_w_reg": (float, lambda v: v >= 0),
    "loss_w_view": (float, lambda v: v >= 0),
    "beta_box": (float, lambda v: v > 0),
    "beta_view": (float, lambda v: v > 0),
    "samples_per_cell": (int, lambda v: v >= 1),
    "split": (float, lambda v: 0 < v <= 1),
    "unannotated_fraction": (float, lambda v: 0 <= v <= 1),
    "background_fraction": (float, lambda v: 0 <= v <= 1),
    "img_size": (int, lambda v: v >= 8),
    "noise_sigma": (float, lambda v: 0 <= v <= 0.05),
    "instances_per_category": (int, lambda v: v >= 0),
    "elevation_jitter_deg": (float, lambda v: 0 <= v <= 5.0),
    "seed": (int, lambda v: v >= 0),
    "train_data": (str, None),
    "val_data": (str, None),
    "checkpoint": (str, None),
    "log_path": (str, None),
}


def parse_config(text):
    """Parse `key = value` lines (# comments) into a TrainConfig.

    Unknown keys, malformed lines, and out-of-range values raise
    ConfigError naming the offending line; missing keys take the
    documented defaults, so an empty file is the default config.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, check = _CONFIG_KEYS[key]
        try:
            parsed = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {val!r}") from exc
        if check is not None and not check(parsed):
            raise ConfigError(f"line {lineno}: value out of range for {key!r}: {val!r}")
        values[key] = parsed
    cfg = dataclasses.replace(TrainConfig(), **values)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
