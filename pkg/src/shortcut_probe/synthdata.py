"""Synthetic stained-glomerulus patches with a controllable stain/lesion confounder.

Each patch is a palette-tinted colour field (the stain cue) plus achromatic
Gaussian blobs (the morphology cue; proliferative patches carry extra, larger
blobs) plus pixel noise. With probability ``confound_rho`` a patch's stain is
forced from its lesion label through a fixed table, otherwise it is drawn from
``stain_proportions`` independently of the lesion.

A group is a synthetic slide: every patch in a group shares one stain and one
center, and splits never cut through a group.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, CountMismatchError, DatasetError, MagicMismatchError, TruncatedBlobError

STAIN_NAMES = ("PAS", "H&E", "Jones", "Trichrome")
LESION_NAMES = ("non-proliferative", "proliferative")

# cohort marginals: 9,674 patches, 19.7% proliferative, stain shares below
DEFAULT_N = 9674
DEFAULT_CLASS_PRIOR = 0.197
DEFAULT_STAIN_PROPORTIONS = [0.249, 0.233, 0.235, 0.283]

DEFAULT_PALETTES = [
    [0.70, 0.30, 0.55],  # PAS, magenta
    [0.50, 0.20, 0.70],  # H&E, purple
    [0.35, 0.35, 0.35],  # Jones, grey/black silver
    [0.30, 0.45, 0.70],  # Trichrome, blue
]

# forced stain for each lesion label when confounded
CONFOUND_TABLE = {1: (0, 1), 0: (2, 3)}

N_CHANNELS = 3
BLOB_AMPLITUDE = 0.25


@dataclass
class GenSpec:
    n_patches: int = DEFAULT_N
    patch_size: int = 16
    stain_palettes: list = field(default_factory=lambda: [list(p) for p in DEFAULT_PALETTES])
    palette_jitter: float = 0.03
    noise_sigma: float = 0.04
    lesion_signal_strength: float = 1.25
    confound_rho: float = 0.0
    class_prior: float = DEFAULT_CLASS_PRIOR
    stain_proportions: list = field(default_factory=lambda: list(DEFAULT_STAIN_PROPORTIONS))
    groups_per_stain: int = 90
    n_centers: int = 3
    invert_confounding: bool = False
    seed: int = 0

    def validate(self):
        if self.patch_size < 8 or self.patch_size % 2:
            raise ConfigError(f"patch_size must be even and >= 8, got {self.patch_size}")
        if self.n_patches < 1:
            raise ConfigError("n_patches must be positive")
        if len(self.stain_palettes) != 4 or any(len(p) != N_CHANNELS for p in self.stain_palettes):
            raise ConfigError("stain_palettes must be 4 RGB triples")
        if not 0.0 <= self.confound_rho <= 1.0:
            raise ConfigError(f"confound_rho must lie in [0, 1], got {self.confound_rho}")
        if not 0.0 <= self.class_prior <= 1.0:
            raise ConfigError(f"class_prior must lie in [0, 1], got {self.class_prior}")
        if self.lesion_signal_strength < 0:
            raise ConfigError("lesion_signal_strength must be >= 0")
        props = np.asarray(self.stain_proportions, dtype=float)
        if props.shape != (4,) or props.min() < 0 or not math.isclose(props.sum(), 1.0, abs_tol=1e-6):
            raise ConfigError("stain_proportions must be 4 non-negative numbers summing to 1")
        if self.groups_per_stain < 1 or self.n_centers < 1:
            raise ConfigError("groups_per_stain and n_centers must be positive")
        if self.noise_sigma < 0 or self.palette_jitter < 0:
            raise ConfigError("noise_sigma and palette_jitter must be >= 0")
        return self


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    group_id: int
    center_id: int
    stain: int
    lesion: int
    pixels: np.ndarray


@dataclass
class DatasetManifest:
    """Per-patch metadata, without pixels."""

    patch_id: np.ndarray
    group_id: np.ndarray
    center_id: np.ndarray
    stain: np.ndarray
    lesion: np.ndarray

    def __len__(self):
        return len(self.patch_id)

    def groups(self) -> dict:
        """group_id -> (n_patches, n_positive, stain, center)."""
        out = {}
        for g in np.unique(self.group_id):
            m = self.group_id == g
            out[int(g)] = (int(m.sum()), int(self.lesion[m].sum()),
                           int(self.stain[m][0]), int(self.center_id[m][0]))
        return out


class Dataset:
    """Arrays of patches plus metadata.

    Reads of ``.stain`` are counted in ``stain_reads`` so a training path can
    prove it never consumed stain labels.
    """

    def __init__(self, pixels, patch_id, group_id, center_id, stain, lesion):
        self.pixels = pixels
        self.patch_id = np.asarray(patch_id, dtype=np.int64)
        self.group_id = np.asarray(group_id, dtype=np.int64)
        self.center_id = np.asarray(center_id, dtype=np.int64)
        self._stain = np.asarray(stain, dtype=np.int64)
        self.lesion = np.asarray(lesion, dtype=np.int64)
        self.stain_reads = 0
        n = len(self.patch_id)
        for name in ("group_id", "center_id", "lesion"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from patch_id")
        if len(self._stain) != n or len(pixels) != n:
            raise ValueError("stain/pixels length differs from patch_id")

    @property
    def stain(self) -> np.ndarray:
        self.stain_reads += 1
        return self._stain

    def __len__(self):
        return len(self.patch_id)

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(self.patch_id, self.group_id, self.center_id, self._stain, self.lesion)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.pixels[idx], self.patch_id[idx], self.group_id[idx],
                       self.center_id[idx], self._stain[idx], self.lesion[idx])

    def in_groups(self, groups) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.group_id, list(groups))))

    def records(self):
        for i in range(len(self)):
            yield PatchRecord(int(self.patch_id[i]), int(self.group_id[i]), int(self.center_id[i]),
                              int(self._stain[i]), int(self.lesion[i]), self.pixels[i])

    def float64_pixels(self) -> np.ndarray:
        return self.pixels.astype(np.float64)


# --------------------------------------------------------------- generation

def _blob_field(rng, size, n_blobs, r_lo, r_hi, amplitude, yy, xx):
    out = np.zeros((size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(1.5, size - 2.5, size=2)
        r = rng.uniform(r_lo, r_hi)
        out += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    return out


def render_patch(spec: GenSpec, stain: int, lesion: int, rng) -> np.ndarray:
    """One C x H x W float32 patch in [0, 1]."""
    s = spec.patch_size
    yy, xx = np.mgrid[0:s, 0:s].astype(float)
    tint = np.asarray(spec.stain_palettes[stain], dtype=float) + spec.palette_jitter * rng.standard_normal(3)
    # shared nuisance texture, then the class-dependent morphology
    texture = _blob_field(rng, s, int(rng.poisson(2.0)), 1.0, 1.8, BLOB_AMPLITUDE, yy, xx)
    if lesion == 1:
        texture += _blob_field(rng, s, 3, 1.5, 2.5, BLOB_AMPLITUDE * spec.lesion_signal_strength, yy, xx)
    img = tint[:, None, None] + texture[None, :, :] + spec.noise_sigma * rng.standard_normal((N_CHANNELS, s, s))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(spec: GenSpec):
    """Build a dataset from ``spec``; returns ``(dataset, manifest)``. Deterministic per seed."""
    spec.validate()
    n = spec.n_patches
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    lesion = (rng.random(n) < spec.class_prior).astype(np.int64)
    free = rng.choice(4, size=n, p=np.asarray(spec.stain_proportions, dtype=float))
    forced_pick = rng.integers(0, 2, size=n)
    forced = rng.random(n) < spec.confound_rho
    pos_pair, neg_pair = CONFOUND_TABLE[1], CONFOUND_TABLE[0]
    if spec.invert_confounding:
        pos_pair, neg_pair = neg_pair, pos_pair
    table = np.where(lesion[:, None] == 1, np.array(pos_pair), np.array(neg_pair))
    forced_stain = table[np.arange(n), forced_pick]
    stain = np.where(forced, forced_stain, free).astype(np.int64)

    g = spec.groups_per_stain
    group_id = stain * g + rng.integers(0, g, size=n)
    center_id = group_id % spec.n_centers

    pixels = np.empty((n, N_CHANNELS, spec.patch_size, spec.patch_size), dtype=np.float32)
    for i in range(n):
        prng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, i]))
        pixels[i] = render_patch(spec, int(stain[i]), int(lesion[i]), prng)
    ds = Dataset(pixels, np.arange(n), group_id, center_id, stain, lesion)
    return ds, ds.manifest


# ----------------------------------------------------------------- file I/O
#
# manifest.csv: header patch_id,group_id,center_id,stain,lesion,offset
# patches.bin:  b"GLM1" | uint32 N | uint32 C | uint32 H | N*C*H*H float32, all LE

MAGIC = b"GLM1"
MANIFEST_NAME = "manifest.csv"
BLOB_NAME = "patches.bin"
MANIFEST_HEADER = ["patch_id", "group_id", "center_id", "stain", "lesion", "offset"]


def write_dataset(ds: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    n, c, h, w = ds.pixels.shape
    if h != w:
        raise ValueError(f"patches must be square, got {h}x{w}")
    with open(os.path.join(path, BLOB_NAME), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", n, c, h))
        fh.write(np.ascontiguousarray(ds.pixels, dtype="<f4").tobytes())
    with open(os.path.join(path, MANIFEST_NAME), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for i in range(n):
            wr.writerow([int(ds.patch_id[i]), int(ds.group_id[i]), int(ds.center_id[i]),
                         int(ds._stain[i]), int(ds.lesion[i]), i])


def read_dataset(path) -> Dataset:
    blob_path = os.path.join(path, BLOB_NAME)
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise MagicMismatchError(f"{blob_path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 16:
        raise TruncatedBlobError(f"{blob_path}: header truncated ({len(blob)} bytes)")
    n, c, h = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * n * c * h * h
    if len(blob) < expected:
        raise TruncatedBlobError(f"{blob_path}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise DatasetError(f"{blob_path}: {len(blob) - expected} trailing bytes")
    pixels = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, c, h, h).astype(np.float32)

    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{manifest_path}: unexpected header {header}")
        rows = [[int(v) for v in row] for row in rd if row]
    if len(rows) != n:
        raise CountMismatchError(f"{manifest_path}: {len(rows)} rows but blob holds {n} patches")
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 6)
    offsets = arr[:, 5]
    if offsets.size and (offsets.min() < 0 or offsets.max() >= n):
        raise CountMismatchError(f"{manifest_path}: offset out of range [0, {n})")
    return Dataset(pixels[offsets], arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])


# ------------------------------------------------------------------ splits

@dataclass
class SplitPlan:
    dev_fraction: float = 0.85
    n_folds: int = 5
    fold_of_group: dict = field(default_factory=dict)
    test_groups: list = field(default_factory=list)

    def dev_groups(self) -> list:
        return sorted(self.fold_of_group)

    def fold_groups(self, k: int) -> list:
        return sorted(g for g, f in self.fold_of_group.items() if f == k)

    def train_groups(self, k: int) -> list:
        return sorted(g for g, f in self.fold_of_group.items() if f != k)

    def to_dict(self) -> dict:
        return {
            "dev_fraction": self.dev_fraction,
            "n_folds": self.n_folds,
            "test_groups": sorted(int(g) for g in self.test_groups),
            "folds": [self.fold_groups(k) for k in range(self.n_folds)],
        }


def group_split(manifest: DatasetManifest, plan: Optional[SplitPlan] = None, seed: int = 0) -> SplitPlan:
    """Fill ``plan`` with a group-level test hold-out and stratified CV folds.

    Test: groups are added greedily, always from the stain furthest below its
    share, until the held-out patch count is as close as possible to
    ``(1 - dev_fraction) * N`` (ties round up). Folds: dev groups, largest
    first, go to the fold that minimises squared deviation from equal patch,
    positive and per-stain counts.
    """
    plan = SplitPlan() if plan is None else plan
    k = plan.n_folds
    if k < 2:
        raise ConfigError(f"n_folds must be >= 2, got {k}")
    if not 0.0 < plan.dev_fraction <= 1.0:
        raise ConfigError(f"dev_fraction must lie in (0, 1], got {plan.dev_fraction}")
    info = manifest.groups()
    by_stain = {}
    for gid, (_, _, s, _) in info.items():
        by_stain.setdefault(s, []).append(gid)
    for s, gids in by_stain.items():
        if len(gids) < k + 1:
            raise ConfigError(f"stain {s} has {len(gids)} groups; need at least {k + 1}")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    queues = {s: list(rng.permutation(sorted(g))) for s, g in sorted(by_stain.items())}
    n_total = len(manifest)
    stain_total = {s: sum(info[g][0] for g in gids) for s, gids in by_stain.items()}
    target = (1.0 - plan.dev_fraction) * n_total
    test, count = [], 0
    test_by_stain = {s: 0 for s in queues}
    while True:
        open_stains = [s for s in queues if len(queues[s]) > k]
        if not open_stains:
            break
        s = max(open_stains, key=lambda st: ((1.0 - plan.dev_fraction) * stain_total[st] - test_by_stain[st])
                / stain_total[st])
        gid = queues[s][0]
        size = info[gid][0]
        if abs(count + size - target) > abs(count - target):
            break
        queues[s].pop(0)
        test.append(int(gid))
        count += size
        test_by_stain[s] += size

    dev = [int(g) for s in sorted(queues) for g in queues[s]]
    order = sorted(dev, key=lambda g: (-info[g][0], int(rng.integers(1 << 30))))
    n_dev = sum(info[g][0] for g in dev)
    p_dev = sum(info[g][1] for g in dev)
    stains = sorted(by_stain)
    fold_n = np.zeros(k)
    fold_p = np.zeros(k)
    fold_s = np.zeros((k, len(stains)))
    stain_dev = np.array([sum(info[g][0] for g in dev if info[g][2] == s) for s in stains], dtype=float)
    assign = {}
    for gid in order:
        size, pos, s, _ = info[gid]
        si = stains.index(s)
        best, best_cost = 0, None
        for f in range(k):
            n_f = fold_n.copy()
            p_f = fold_p.copy()
            s_f = fold_s[:, si].copy()
            n_f[f] += size
            p_f[f] += pos
            s_f[f] += size
            cost = (((n_f - n_dev / k) / max(n_dev, 1)) ** 2).sum() \
                + 4.0 * (((p_f - p_dev / k) / max(p_dev, 1)) ** 2).sum() \
                + (((s_f - stain_dev[si] / k) / max(stain_dev[si], 1)) ** 2).sum()
            if best_cost is None or cost < best_cost:
                best, best_cost = f, cost
        assign[gid] = best
        fold_n[best] += size
        fold_p[best] += pos
        fold_s[best, si] += size
    plan.fold_of_group = dict(sorted(assign.items()))
    plan.test_groups = sorted(test)
    return plan


# ------------------------------------------------------------- diagnostics

def mutual_information(a, b) -> float:
    """Plug-in mutual information (nats) between two discrete label arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
