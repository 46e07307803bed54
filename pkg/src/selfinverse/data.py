"""Paired-image datasets: disk ingestion, jitter augmentation, synthetic bijective tasks.

Images live in rank-4 float32 arrays (1, C, H, W) with values in [-1, 1].
Synthetic tasks are involutions on separable domains, so a direction-blind
network can infer the mapping direction from the input alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")
TASKS = ("biased_negation", "gamma_swap")
TEXTURES = ("smoothed_noise", "shapes")


class DatasetError(ValueError):
    pass


def _check_image(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise DatasetError(f"{name}: expected shape (1, C, H, W), got {arr.shape}")
    if arr.dtype != np.float32:
        raise DatasetError(f"{name}: expected float32, got {arr.dtype}")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise DatasetError(f"{name}: values outside [-1, 1] (min {lo}, max {hi})")


@dataclass
class PairedSample:
    """One aligned (domain-X, domain-Y) image pair with a shared id."""

    id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        _check_image(f"sample {self.id} x", self.x)
        _check_image(f"sample {self.id} y", self.y)
        if self.x.shape != self.y.shape:
            raise DatasetError(
                f"sample {self.id}: x shape {self.x.shape} != y shape {self.y.shape}"
            )


@dataclass
class PairedDataset:
    samples: list[PairedSample]
    split: str = "train"
    domain_names: tuple[str, str] = ("A", "B")

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate sample ids: {dupes}")
        shapes = {s.x.shape for s in self.samples}
        if len(shapes) > 1:
            raise DatasetError(f"samples disagree on shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].x.shape if self.samples else ()


@dataclass(frozen=True)
class AugmentConfig:
    """Jitter: resize to load_size, random crop back to crop_size (shared offset)."""

    load_size: int = 286
    crop_size: int = 256
    enabled: bool = True

    def __post_init__(self):
        if not (self.load_size >= self.crop_size > 0):
            raise DatasetError(
                f"need load_size >= crop_size > 0, got {self.load_size}, {self.crop_size}"
            )


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str
    image_size: int = 64
    n_samples: int = 100
    seed: int = 0
    texture: str = "smoothed_noise"

    def __post_init__(self):
        if self.task not in TASKS:
            raise DatasetError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.texture not in TEXTURES:
            raise DatasetError(f"unknown texture {self.texture!r}")
        n = self.image_size
        if n < 8 or (n & (n - 1)) != 0:
            raise DatasetError(
                f"image_size must be a power of 2 and >= 8, got {n} "
                "(the generator needs 2^depth to divide the spatial size)"
            )
        if self.n_samples <= 0:
            raise DatasetError(f"n_samples must be positive, got {self.n_samples}")


def to_unit(t: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] tensor to [0, 1] intensity space."""
    return np.clip((t + 1.0) / 2.0, 0.0, 1.0)


def from_unit(u: np.ndarray) -> np.ndarray:
    return (u * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# disk ingestion

def _decode_png(path: Path, channels: int) -> np.ndarray:
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr / 255.0 * 2.0 - 1.0)[None].astype(np.float32)


def load_paired_dataset(root: Path | str, split: str, channels: int = 1) -> PairedDataset:
    """Load name-matched PNG pairs from <root>/<split>A and <root>/<split>B."""
    root = Path(root)
    dir_a = root / f"{split}A"
    dir_b = root / f"{split}B"
    for d in (dir_a, dir_b):
        if not d.is_dir():
            raise DatasetError(f"missing dataset directory: {d}")
    names_a = {p.name for p in dir_a.glob("*.png")}
    names_b = {p.name for p in dir_b.glob("*.png")}
    orphans = sorted(names_a ^ names_b)
    if orphans:
        raise DatasetError(f"unpaired files (present on one side only): {orphans}")
    samples = []
    for name in sorted(names_a):
        x = _decode_png(dir_a / name, channels)
        y = _decode_png(dir_b / name, channels)
        if x.shape != y.shape:
            raise DatasetError(
                f"pair {name}: A shape {x.shape} != B shape {y.shape}"
            )
        samples.append(PairedSample(id=Path(name).stem, x=x, y=y))
    return PairedDataset(samples=samples, split=split)


def save_paired_dataset(ds: PairedDataset, root: Path | str, manifest_extra: dict | None = None) -> Path:
    """Write the A/B directory layout of 8-bit PNGs plus a manifest.json."""
    root = Path(root)
    dir_a = root / f"{ds.split}A"
    dir_b = root / f"{ds.split}B"
    dir_a.mkdir(parents=True, exist_ok=True)
    dir_b.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        _encode_png(s.x, dir_a / f"{s.id}.png")
        _encode_png(s.y, dir_b / f"{s.id}.png")
    manifest = {
        "split": ds.split,
        "domain_names": list(ds.domain_names),
        "n_samples": len(ds),
        "image_shape": list(ds.image_shape),
        "format": "paired-png-v1",
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    path = root / f"manifest_{ds.split}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _encode_png(arr: np.ndarray, path: Path) -> None:
    u8 = np.rint(to_unit(arr[0]) * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        img = Image.fromarray(u8[0], mode="L")
    else:
        img = Image.fromarray(u8.transpose(1, 2, 0), mode="RGB")
    img.save(path)


# ---------------------------------------------------------------------------
# augmentation

def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[-2] == size and arr.shape[-1] == size:
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr))
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out.numpy()


def augment_pair(sample: PairedSample, cfg: AugmentConfig, rng: np.random.Generator) -> PairedSample:
    """Resize to load_size then crop both images at one shared random offset."""
    if min(sample.x.shape[-2:]) < cfg.crop_size:
        raise DatasetError(
            f"sample {sample.id} spatial size {sample.x.shape[-2:]} below crop_size {cfg.crop_size}"
        )
    if not cfg.enabled:
        return PairedSample(
            id=sample.id,
            x=_resize(sample.x, cfg.crop_size),
            y=_resize(sample.y, cfg.crop_size),
        )
    x = _resize(sample.x, cfg.load_size)
    y = _resize(sample.y, cfg.load_size)
    margin = cfg.load_size - cfg.crop_size
    top, left = (int(v) for v in rng.integers(0, margin + 1, size=2))
    sl = np.s_[:, :, top:top + cfg.crop_size, left:left + cfg.crop_size]
    return PairedSample(id=sample.id, x=np.ascontiguousarray(x[sl]), y=np.ascontiguousarray(y[sl]))


# ---------------------------------------------------------------------------
# synthetic involution tasks

def _base_texture(size: int, texture: str, rng: np.random.Generator) -> np.ndarray:
    """A [0, 1]-normalized grayscale texture of shape (size, size)."""
    if texture == "smoothed_noise":
        u = rng.random((size, size))
        u = gaussian_filter(u, sigma=size / 16.0, mode="wrap")
    else:  # shapes
        u = np.zeros((size, size))
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.integers(0, size, size=2)
            r = int(rng.integers(size // 8, size // 3))
            val = rng.uniform(0.2, 1.0)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
            else:
                mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
            u[mask] = np.maximum(u[mask], val)
        u = gaussian_filter(u, sigma=1.5, mode="nearest")
    lo, hi = u.min(), u.max()
    if hi - lo < 1e-9:
        return np.full_like(u, 0.5)
    return (u - lo) / (hi - lo)


def _force_mean(t: np.ndarray, target: float, iters: int = 60) -> np.ndarray:
    """Gamma-adjust a [0,1] texture so its mean hits target (bisection on t**g)."""
    lo, hi = 1e-3, 100.0
    for _ in range(iters):
        g = 0.5 * (lo + hi)
        if np.power(t, g).mean() > target:
            lo = g
        else:
            hi = g
    return t ** (0.5 * (lo + hi))


def generate_synthetic(spec: SyntheticTaskSpec, split: str = "train") -> PairedDataset:
    """Deterministic paired dataset for one of the synthetic involution tasks.

    biased_negation: x = t (bright, mean in [0.65, 0.9]), y = 1 - t; the ideal
    union-domain map v -> 1 - v is an involution and domains separate by mean.
    gamma_swap: x = t in [0.55, 1], y = t^2; ideal map squares bright inputs
    and square-roots dark ones.
    """
    rng = np.random.default_rng([spec.seed, SPLITS.index(split)])
    samples = []
    for i in range(spec.n_samples):
        t = _base_texture(spec.image_size, spec.texture, rng)
        if spec.task == "biased_negation":
            m = rng.uniform(0.65, 0.9)
            x01 = _force_mean(t, m)
            y01 = 1.0 - x01
        else:
            x01 = 0.55 + 0.45 * t
            y01 = x01 * x01
        samples.append(
            PairedSample(
                id=f"{spec.task}_{split}_{i:05d}",
                x=from_unit(x01)[None, None],
                y=from_unit(y01)[None, None],
            )
        )
    return PairedDataset(samples=samples, split=split, domain_names=("A", "B"))


def ideal_involution(task: str, t: np.ndarray) -> np.ndarray:
    """The analytic union-domain map for a synthetic task, in [-1, 1] tensor space."""
    u = to_unit(t)
    if task == "biased_negation":
        out = 1.0 - u
    elif task == "gamma_swap":
        # domain X lives in [0.55, 1] by construction, domain Y bottoms out at
        # 0.55^2; the minimum separates the domains
        out = np.where(u.min(axis=(1, 2, 3), keepdims=True) >= 0.45, u * u, np.sqrt(u))
    else:
        raise DatasetError(f"unknown task {task!r}")
    return from_unit(out)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]


def batch_iter(ds: PairedDataset, batch_size: int, shuffle: bool = False,
               rng: np.random.Generator | None = None):
    """Yield stacked (x, y) batches; the last partial batch is kept."""
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds))
    if shuffle:
        if rng is None:
            raise DatasetError("shuffle=True requires an rng")
        order = rng.permutation(order)
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        xs = np.concatenate([ds.samples[i].x for i in idx], axis=0)
        ys = np.concatenate([ds.samples[i].y for i in idx], axis=0)
        yield Batch(
            x=torch.from_numpy(xs),
            y=torch.from_numpy(ys),
            ids=[ds.samples[i].id for i in idx],
        )
