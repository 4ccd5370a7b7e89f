"""Rating manifests, splits, preprocessing and the synthetic preference corpus."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .numerics import RandomSource

MANIFEST_HEADER = ("image", "user", "rating")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class RatingRecord:
    image: str
    user: str
    rating: float


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("normalization std must be positive (constant training ratings?)")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class SplitSpec:
    train_users: frozenset[str]
    test_users: frozenset[str]
    train: tuple[RatingRecord, ...]
    test: tuple[RatingRecord, ...]

    @property
    def train_images(self) -> frozenset[str]:
        return frozenset(r.image for r in self.train)

    @property
    def test_images(self) -> frozenset[str]:
        return frozenset(r.image for r in self.test)


# ----------------------------------------------------------------------------
# manifest


def load_manifest(path) -> list[RatingRecord]:
    """Parse an ``image,user,rating`` CSV; ratings must lie in [1, 5]."""
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: expected header 'image,user,rating', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            image, user, raw = (c.strip() for c in row)
            try:
                rating = float(raw)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: rating {raw!r} is not a number") from None
            if not 1.0 <= rating <= 5.0:
                raise ManifestError(f"{path}:{lineno}: rating {rating:g} outside [1, 5]")
            if not image or not user:
                raise ManifestError(f"{path}:{lineno}: empty image or user field")
            records.append(RatingRecord(image, user, rating))
    return records


def write_manifest(path, records: Iterable[RatingRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.image, r.user, repr(float(r.rating))])


def records_by_user(records: Iterable[RatingRecord]) -> dict[str, list[RatingRecord]]:
    out: dict[str, list[RatingRecord]] = {}
    for r in records:
        out.setdefault(r.user, []).append(r)
    return out


# ----------------------------------------------------------------------------
# normalization and splits


def fit_normalization(records: Sequence[RatingRecord]) -> NormalizationStats:
    r = np.array([x.rating for x in records], dtype=np.float64)
    if r.size == 0:
        raise ValueError("cannot fit normalization on zero ratings")
    return NormalizationStats(float(r.mean()), float(r.std()))


def normalize_ratings(records: Sequence[RatingRecord], stats: NormalizationStats) -> list[RatingRecord]:
    return [replace(r, rating=(r.rating - stats.mean) / stats.std) for r in records]


def denormalize(values, stats: NormalizationStats):
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


def split_by_users(records: Sequence[RatingRecord], n_test_users: int, rng: RandomSource) -> SplitSpec:
    """Hold out ``n_test_users`` users; drop training ratings of images they rated."""
    users = sorted({r.user for r in records})
    if not 0 < n_test_users < len(users):
        raise ValueError(f"need 0 < n_test_users < {len(users)}, got {n_test_users}")
    test_users = frozenset(users[i] for i in rng.choice(len(users), size=n_test_users, replace=False))
    test = tuple(r for r in records if r.user in test_users)
    held_images = {r.image for r in test}
    train = tuple(r for r in records if r.user not in test_users and r.image not in held_images)
    for u in test_users:
        if not any(r.user == u for r in test):
            raise ValueError(f"test user {u} has no ratings")
    return SplitSpec(frozenset(users) - test_users, test_users, train, test)


# ----------------------------------------------------------------------------
# images


def load_image(path) -> np.ndarray:
    """PNG or binary PPM -> float32 ``[3, H, W]`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray) -> None:
    """Write ``[3, H, W]`` floats in [0, 1] as 8-bit PNG, or PPM (P6) for ``.ppm`` paths."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    fmt = "PPM" if str(path).lower().endswith((".ppm", ".pnm")) else "PNG"
    Image.fromarray(arr, "RGB").save(path, format=fmt)


class ImageStore:
    """Lazily loaded images keyed by their manifest reference."""

    def __init__(self, root, images: dict[str, np.ndarray] | None = None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, np.ndarray] = dict(images or {})

    def __getitem__(self, ref: str) -> np.ndarray:
        img = self._cache.get(ref)
        if img is None:
            path = Path(ref) if self.root is None else self.root / ref
            if not path.exists():
                raise FileNotFoundError(f"image {ref!r} not found at {path}")
            img = self._cache[ref] = load_image(path)
        return img

    def __contains__(self, ref: str) -> bool:
        return ref in self._cache or (self.root is not None and (self.root / ref).exists())


# ----------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    resize_to: int = 40
    crop_to: int = 32
    flip_p: float = 0.5
    channel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    channel_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to must not exceed resize_to")

    @classmethod
    def full_scale(cls, channel_mean=(0.5, 0.5, 0.5), channel_std=(0.25, 0.25, 0.25)) -> "AugmentationConfig":
        return cls(256, 224, 0.5, tuple(channel_mean), tuple(channel_std))

    def to_dict(self) -> dict:
        return {
            "resize_to": self.resize_to,
            "crop_to": self.crop_to,
            "flip_p": self.flip_p,
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        return cls(d["resize_to"], d["crop_to"], d["flip_p"], tuple(d["channel_mean"]), tuple(d["channel_std"]))


def channel_stats(images: Iterable[np.ndarray]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    s = np.zeros(3)
    ss = np.zeros(3)
    n = 0
    for img in images:
        flat = img.reshape(3, -1).astype(np.float64)
        s += flat.sum(1)
        ss += (flat**2).sum(1)
        n += flat.shape[1]
    mean = s / n
    std = np.sqrt(np.maximum(ss / n - mean**2, 1e-12))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear square resize of ``[3, H, W]`` (aspect ratio is not preserved)."""
    if image.shape[1:] == (size, size):
        return image
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), "F").resize((size, size), Image.BILINEAR)) for c in image]
    return np.stack(chans).astype(np.float32)


def augment(image: np.ndarray, config: AugmentationConfig, rng: RandomSource | None = None, training: bool = False) -> np.ndarray:
    """Resize, (train: random flip + random crop | eval: center crop), then channel-normalize."""
    img = resize(image, config.resize_to)
    c, r = config.crop_to, config.resize_to
    if training:
        if rng is None:
            raise ValueError("training-mode augmentation needs a RandomSource")
        if rng.random() < config.flip_p:
            img = img[:, :, ::-1]
        top, left = (int(v) for v in rng.integers(0, r - c + 1, size=2))
    else:
        top = left = (r - c) // 2
    img = img[:, top : top + c, left : left + c]
    mean = np.asarray(config.channel_mean, np.float32).reshape(3, 1, 1)
    std = np.asarray(config.channel_std, np.float32).reshape(3, 1, 1)
    return np.ascontiguousarray((img - mean) / std, dtype=np.float32)


class Preprocessor:
    """Turns image references into network-ready batches.

    Eval-mode views are deterministic and cached; training views draw a
    fresh flip/crop from the given stream every call.
    """

    def __init__(self, store: ImageStore, config: AugmentationConfig):
        self.store = store
        self.config = config
        self._eval: dict[str, np.ndarray] = {}

    def eval_view(self, ref: str) -> np.ndarray:
        v = self._eval.get(ref)
        if v is None:
            v = self._eval[ref] = augment(self.store[ref], self.config, training=False)
        return v

    def eval_batch(self, refs: Sequence[str]) -> np.ndarray:
        return np.stack([self.eval_view(r) for r in refs])

    def train_batch(self, refs: Sequence[str], rng: RandomSource) -> np.ndarray:
        return np.stack([augment(self.store[r], self.config, rng.child(i), training=True) for i, r in enumerate(refs)])


# ----------------------------------------------------------------------------
# synthetic corpus

# shared taste over (luminance, contrast, saturation, edge density)
SHARED_TASTE = np.array([0.55, 0.45, 0.5, 0.35]) / np.linalg.norm([0.55, 0.45, 0.5, 0.35])
FEATURE_NAMES = ("mean_luminance", "rms_contrast", "mean_saturation", "mean_gradient")


@dataclass(frozen=True)
class SyntheticUserSpec:
    user_id: str
    weights: tuple[float, ...]
    noise_sigma: float
    quantize: bool = True

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "weights": list(self.weights), "noise_sigma": self.noise_sigma, "quantize": self.quantize}


@dataclass
class SyntheticCorpus:
    images: dict[str, np.ndarray]
    records: list[RatingRecord]
    users: list[SyntheticUserSpec]
    features: np.ndarray  # standardized phi, one row per image (same order as images)
    shared_scale: float
    seed: int
    oracle: dict[str, np.ndarray] = field(default_factory=dict)  # user -> noiseless score per image

    @property
    def image_ids(self) -> list[str]:
        return list(self.images)

    def oracle_score(self, user: str, image: str) -> float:
        return float(self.oracle[user][self.image_ids.index(image)])


def image_features(image: np.ndarray) -> np.ndarray:
    """Raw (unstandardized) feature vector of a ``[3, H, W]`` image in [0, 1]."""
    r, g, b = image.astype(np.float64)
    lum = 0.299 * r + 0.587 * g + 0.114 * b
    mx, mn = image.max(axis=0).astype(np.float64), image.min(axis=0).astype(np.float64)
    sat = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    gy, gx = np.gradient(lum)
    return np.array([lum.mean(), lum.std(), sat.mean(), np.sqrt(gx * gx + gy * gy).mean()])


def _procedural_image(size: int, rng: RandomSource) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.random(3), rng.random(3)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    for _ in range(int(rng.integers(0, 5))):
        color = rng.random(3)
        cx, cy = rng.random(2)
        rad = rng.uniform(0.08, 0.35)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < rad**2
        else:
            mask = (np.abs(xx - cx) < rad) & (np.abs(yy - cy) < rad * rng.uniform(0.4, 1.0))
        img[:, mask] = color[:, None]

    # texture: blocky noise at a random scale, random strength
    cell = int(rng.choice([1, 2, 4]))
    coarse = rng.normal(0, 1, size=(3, -(-size // cell), -(-size // cell)))
    tex = np.repeat(np.repeat(coarse, cell, axis=1), cell, axis=2)[:, :size, :size]
    img = img + tex * rng.uniform(0.0, 0.18)

    gray = img.mean(axis=0, keepdims=True)
    img = gray + (img - gray) * rng.uniform(0.0, 1.6)  # saturation
    m = img.mean()
    img = m + (img - m) * rng.uniform(0.4, 1.5)  # contrast
    img = img + rng.uniform(-0.3, 0.3)  # brightness
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.float32) / 255.0


def synth_generate(
    n_users: int,
    n_images: int,
    image_size: int = 32,
    seed: int = 0,
    noise_sigma: float = 0.35,
    quantize: bool = True,
    shared_scale: float = 0.7,
    mean_raters: float = 5.0,
    max_raters: int = 12,
) -> SyntheticCorpus:
    """Procedural images rated by simulated users with known linear tastes.

    Each user's noiseless score is ``shared_scale * SHARED_TASTE.phi + w_u.phi``
    (``w_u`` a random unit vector) standardized over the corpus; the rating is
    ``round(3 + 1.1 * (score + noise))`` clipped to 1..5, or, with
    ``quantize=False``, an exact affine map of the score into [1, 5].
    """
    if n_users <= 0 or n_images <= 0 or image_size <= 0:
        raise ValueError("n_users, n_images and image_size must be positive")
    root = RandomSource(seed)
    ids = [f"img{i:05d}" for i in range(n_images)]
    images = {ref: _procedural_image(image_size, root.child("image", i)) for i, ref in enumerate(ids)}

    raw = np.stack([image_features(images[ref]) for ref in ids])
    sd = raw.std(axis=0)
    phi = (raw - raw.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

    urng = root.child("users")
    users, oracle = [], {}
    for u in range(n_users):
        w = urng.normal(size=4)
        w = w / np.linalg.norm(w)
        uid = f"u{u:03d}"
        users.append(SyntheticUserSpec(uid, tuple(float(v) for v in w), float(noise_sigma), quantize))
        score = phi @ (shared_scale * SHARED_TASTE + w)
        score = (score - score.mean()) / max(score.std(), 1e-12)
        oracle[uid] = score

    rrng = root.child("raters")
    noise_rng = root.child("noise")
    per_image = np.clip(1 + rrng.generator.poisson(mean_raters - 1, size=n_images), 1, min(max_raters, n_users))
    records = []
    for i, ref in enumerate(ids):
        for u in sorted(rrng.choice(n_users, size=int(per_image[i]), replace=False)):
            spec = users[u]
            s = oracle[spec.user_id][i]
            if quantize:
                rating = float(np.clip(np.rint(3 + 1.1 * (s + noise_rng.normal(0, noise_sigma))), 1, 5))
            else:
                o = oracle[spec.user_id]
                lo, hi = o.min(), o.max()
                rating = float(1 + 4 * (s - lo) / (hi - lo)) if hi > lo else 3.0
            records.append(RatingRecord(f"images/{ref}.png", spec.user_id, rating))
    images = {f"images/{ref}.png": img for ref, img in images.items()}
    return SyntheticCorpus(images, records, users, phi, shared_scale, seed, oracle)


def write_corpus(corpus: SyntheticCorpus, out_dir) -> None:
    """Images under ``images/``, ``manifest.csv``, and the hidden user specs under ``hidden/``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "hidden").mkdir(exist_ok=True)
    for ref, img in corpus.images.items():
        save_image(out / ref, img)
    write_manifest(out / "manifest.csv", corpus.records)
    hidden = {
        "seed": corpus.seed,
        "shared_scale": corpus.shared_scale,
        "shared_taste": SHARED_TASTE.tolist(),
        "features": list(FEATURE_NAMES),
        "users": [u.to_dict() for u in corpus.users],
    }
    with open(out / "hidden" / "users.json", "w", encoding="utf-8") as fh:
        json.dump(hidden, fh, sort_keys=True, indent=1)
        fh.write("\n")


def manifest_root(path) -> Path:
    return Path(os.path.dirname(os.path.abspath(path)))
