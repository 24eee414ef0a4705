"""Multi-scale residual quantizer: images -> pyramids of codebook indices.

The codec is a learned orthonormal patch-linear map (top principal components
of training patches) around a shared codebook. Encoding quantizes the feature
residual scale by scale: pool the residual down to the scale's grid, snap each
cell to the nearest codebook entry, replicate back up, subtract, continue.

Codebook entry 0 is pinned to the zero vector and pooling uses matched
partitions (each fine cell belongs to exactly one coarse cell), which makes
per-scale residual energy provably non-increasing: the nearest entry is never
worse than the zero entry, and a partition-constant fit can only remove energy
from its block.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import CollapseError, PrefixRangeError, ShapeMismatchError
from .serialization import load_container, pack_arrays, sha256_bytes

CODEC_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ScaleSchedule:
    sides: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        if not self.sides or any(b <= a for a, b in zip(self.sides, self.sides[1:])):
            raise ValueError("scale sides must be strictly increasing")

    def __len__(self) -> int:
        return len(self.sides)

    def token_count(self, prefix: int | None = None) -> int:
        prefix = len(self.sides) if prefix is None else prefix
        return sum(s * s for s in self.sides[:prefix])


@dataclass(frozen=True)
class CodecConfig:
    image_size: int = 16
    channels: int = 3
    schedule: ScaleSchedule = ScaleSchedule()
    codebook_size: int = 64
    dim: int = 16
    epochs: int = 8
    seed: int = 0

    def __post_init__(self):
        top = self.schedule.sides[-1]
        if self.image_size % top != 0:
            raise ValueError("image_size must be divisible by the largest scale side")
        patch = self.image_size // top
        if self.dim > patch * patch * self.channels:
            raise ValueError("feature dim exceeds patch dimensionality")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least two entries")

    @property
    def patch(self) -> int:
        return self.image_size // self.schedule.sides[-1]

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class LatentPyramid:
    maps: tuple[np.ndarray, ...]  # per scale, (s_i, s_i) int64 in [0, K)
    image_size: int

    def flatten(self, prefix: int | None = None) -> np.ndarray:
        prefix = len(self.maps) if prefix is None else prefix
        if not 1 <= prefix <= len(self.maps):
            raise PrefixRangeError(f"prefix {prefix} outside [1, {len(self.maps)}]")
        return np.concatenate([m.reshape(-1) for m in self.maps[:prefix]])


@dataclass
class Codec:
    config: CodecConfig
    mean: np.ndarray  # (patch_dim,)
    basis: np.ndarray  # (patch_dim, dim), orthonormal columns
    codebook: np.ndarray  # (K, dim), row 0 all zeros
    usage: np.ndarray  # (K,) assignment counts from the final training pass

    def grid_side(self) -> int:
        return self.config.schedule.sides[-1]


def _partition_index(fine: int, coarse: int) -> np.ndarray:
    """Map each fine cell to its coarse owner; balanced contiguous runs."""
    return (np.arange(fine) * coarse) // fine


def _pool_matrix(fine: int, coarse: int) -> np.ndarray:
    idx = _partition_index(fine, coarse)
    m = np.zeros((coarse, fine))
    m[idx, np.arange(fine)] = 1.0
    return m / m.sum(axis=1, keepdims=True)


def image_to_features(codec: Codec, image: np.ndarray) -> np.ndarray:
    cfg = codec.config
    if image.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeMismatchError(
            f"expected {(cfg.image_size, cfg.image_size, cfg.channels)}, got {image.shape}"
        )
    s, p = codec.grid_side(), cfg.patch
    patches = (
        image.astype(np.float64)
        .reshape(s, p, s, p, cfg.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(s, s, cfg.patch_dim)
    )
    return (patches - codec.mean) @ codec.basis


def features_to_image(codec: Codec, features: np.ndarray) -> np.ndarray:
    cfg = codec.config
    s, p = codec.grid_side(), cfg.patch
    patches = features @ codec.basis.T + codec.mean
    image = (
        patches.reshape(s, s, p, p, cfg.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(cfg.image_size, cfg.image_size, cfg.channels)
    )
    return np.clip(image, 0.0, 1.0)


def _nearest(codebook: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Nearest entry by squared distance; argmin breaks ties toward index 0."""
    d2 = ((vectors[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _rvq_pass(codec_like, features: np.ndarray, collect=None):
    """Shared residual-quantization loop over the scale schedule.

    collect, when given, receives (scale_index, pooled_vectors, indices,
    per_vector_error2) at every scale — used by training to drive k-means.
    """
    schedule = codec_like.config.schedule.sides
    top = schedule[-1]
    codebook = codec_like.codebook
    residual = features.copy()
    maps = []
    prev_energy = float((residual**2).sum())
    for si, side in enumerate(schedule):
        idx = _partition_index(top, side)
        pool = _pool_matrix(top, side)
        pooled = np.einsum("af,fgd,bg->abd", pool, residual, pool)
        flat = pooled.reshape(-1, pooled.shape[-1])
        codes = _nearest(codebook, flat)
        chosen = codebook[codes]
        if collect is not None:
            err2 = ((flat - chosen) ** 2).sum(axis=1)
            collect(si, flat, codes, err2)
        quant = chosen.reshape(side, side, -1)
        residual = residual - quant[idx][:, idx]
        energy = float((residual**2).sum())
        if energy > prev_energy * (1.0 + 1e-9) + 1e-12:
            raise AssertionError(
                f"residual energy increased at scale {side}: {prev_energy} -> {energy}"
            )
        prev_energy = energy
        maps.append(codes.reshape(side, side).astype(np.int64))
    return maps


def encode(codec: Codec, image: np.ndarray) -> LatentPyramid:
    features = image_to_features(codec, image)
    maps = _rvq_pass(codec, features)
    return LatentPyramid(maps=tuple(maps), image_size=codec.config.image_size)


def decode(codec: Codec, pyramid: LatentPyramid, prefix: int | None = None) -> np.ndarray:
    schedule = codec.config.schedule.sides
    prefix = len(schedule) if prefix is None else prefix
    if not 1 <= prefix <= len(schedule):
        raise PrefixRangeError(f"prefix {prefix} outside [1, {len(schedule)}]")
    top = schedule[-1]
    features = np.zeros((top, top, codec.config.dim))
    for si in range(prefix):
        side = schedule[si]
        idx = _partition_index(top, side)
        quant = codec.codebook[pyramid.maps[si]]
        features += quant[idx][:, idx]
    return features_to_image(codec, features)


def pyramid_from_flat(
    flat: np.ndarray, schedule: ScaleSchedule, image_size: int, prefix: int | None = None
) -> LatentPyramid:
    """Rebuild a pyramid from a flattened index prefix; finer scales not
    covered by the prefix are filled with the zero entry (index 0)."""
    flat = np.asarray(flat, dtype=np.int64)
    prefix = len(schedule) if prefix is None else prefix
    expected = schedule.token_count(prefix)
    if len(flat) != expected:
        raise ShapeMismatchError(f"expected {expected} indices for prefix {prefix}, got {len(flat)}")
    maps = []
    offset = 0
    for si, side in enumerate(schedule.sides):
        if si < prefix:
            maps.append(flat[offset : offset + side * side].reshape(side, side).copy())
            offset += side * side
        else:
            maps.append(np.zeros((side, side), dtype=np.int64))
    return LatentPyramid(maps=tuple(maps), image_size=image_size)


def compression_ratio(schedule: ScaleSchedule, prefix: int, image_size: int) -> Fraction:
    """Tokens kept over pixels, as an exact rational."""
    if not 1 <= prefix <= len(schedule):
        raise PrefixRangeError(f"prefix {prefix} outside [1, {len(schedule)}]")
    return Fraction(schedule.token_count(prefix), image_size * image_size)


# ---------------------------------------------------------------------------
# Training


def _fit_patch_basis(config: CodecConfig, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s, p = config.schedule.sides[-1], config.patch
    patches = (
        images.astype(np.float64)
        .reshape(-1, s, p, s, p, config.channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(-1, config.patch_dim)
    )
    mean = patches.mean(axis=0)
    centered = patches - mean
    cov = centered.T @ centered / len(centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][: config.dim]
    basis = eigvecs[:, order]
    # deterministic sign: largest-magnitude component of each column positive
    for j in range(basis.shape[1]):
        k = int(np.argmax(np.abs(basis[:, j])))
        if basis[k, j] < 0:
            basis[:, j] = -basis[:, j]
    return mean, basis


def train_codec(images: np.ndarray, config: CodecConfig | None = None, min_images: int = 500) -> Codec:
    """Fit the patch basis and k-means the shared codebook over all scales.

    Dead entries are re-seeded each epoch from the residual vectors the
    current codebook fits worst.
    """
    config = config or CodecConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeMismatchError("expected images of shape (n, size, size, channels)")
    if images.shape[1] != images.shape[2]:
        raise ShapeMismatchError("images must be square")
    if len(images) < min_images:
        raise ValueError(f"need at least {min_images} training images, got {len(images)}")

    rng = np.random.default_rng(config.seed)
    mean, basis = _fit_patch_basis(config, images)
    codec = Codec(
        config=config,
        mean=mean,
        basis=basis,
        codebook=np.zeros((config.codebook_size, config.dim)),
        usage=np.zeros(config.codebook_size, dtype=np.int64),
    )

    feats = np.stack([image_to_features(codec, img) for img in images])

    # init: entry 0 stays zero, the rest sampled from zero-codebook pooled residuals
    top = config.schedule.sides[-1]
    pool_rows = []
    for side in config.schedule.sides:
        pool = _pool_matrix(top, side)
        pooled = np.einsum("af,nfgd,bg->nabd", pool, feats, pool)
        pool_rows.append(pooled.reshape(-1, config.dim))
    init_pool = np.concatenate(pool_rows, axis=0)
    picks = rng.choice(len(init_pool), size=config.codebook_size - 1, replace=False)
    codec.codebook[1:] = init_pool[picks]

    k = config.codebook_size
    for _ in range(config.epochs):
        sums = np.zeros((k, config.dim))
        counts = np.zeros(k, dtype=np.int64)
        worst: list[tuple[float, np.ndarray]] = []

        def collect(si, flat, codes, err2):
            np.add.at(sums, codes, flat)
            np.add.at(counts, codes, 1)
            top_local = np.argsort(err2)[::-1][:4]
            for i in top_local:
                worst.append((float(err2[i]), flat[i].copy()))

        for f in feats:
            _rvq_pass(codec, f, collect=collect)

        nonzero = (counts > 0) & (np.arange(k) > 0)
        codec.codebook[nonzero] = sums[nonzero] / counts[nonzero, None]
        dead = np.flatnonzero((counts == 0) & (np.arange(k) > 0))
        if len(dead) and worst:
            worst.sort(key=lambda t: -t[0])
            for j, entry in enumerate(dead):
                codec.codebook[entry] = worst[j % len(worst)][1]
        codec.usage = counts

    # final usage pass with the converged codebook
    usage = np.zeros(k, dtype=np.int64)

    def count_usage(si, flat, codes, err2):
        np.add.at(usage, codes, 1)

    for f in feats:
        _rvq_pass(codec, f, collect=count_usage)
    codec.usage = usage
    unused = int((usage == 0).sum())
    if unused > k // 2:
        raise CollapseError(f"{unused}/{k} codebook entries unused after training")
    return codec


def reconstruction_mse(codec: Codec, images: np.ndarray, prefix: int | None = None) -> float:
    total = 0.0
    for img in images:
        rec = decode(codec, encode(codec, img), prefix)
        total += float(((rec - img) ** 2).mean())
    return total / len(images)


# ---------------------------------------------------------------------------
# Persistence and benchmark


def codec_to_bytes(codec: Codec) -> bytes:
    meta = {
        "kind": "codec",
        "format_version": CODEC_FORMAT_VERSION,
        "image_size": codec.config.image_size,
        "channels": codec.config.channels,
        "schedule": list(codec.config.schedule.sides),
        "codebook_size": codec.config.codebook_size,
        "dim": codec.config.dim,
        "epochs": codec.config.epochs,
        "seed": codec.config.seed,
    }
    arrays = {
        "mean": codec.mean,
        "basis": codec.basis,
        "codebook": codec.codebook,
        "usage": codec.usage.astype(np.int64),
    }
    return pack_arrays(meta, arrays)


def save_codec(codec: Codec, path: str | Path) -> str:
    data = codec_to_bytes(codec)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def codec_hash(codec: Codec) -> str:
    return sha256_bytes(codec_to_bytes(codec))


def load_codec(path: str | Path) -> Codec:
    meta, arrays = load_container(path)
    if meta.get("kind") != "codec" or meta.get("format_version") != CODEC_FORMAT_VERSION:
        raise ValueError("not a codec checkpoint of a supported version")
    config = CodecConfig(
        image_size=meta["image_size"],
        channels=meta["channels"],
        schedule=ScaleSchedule(tuple(meta["schedule"])),
        codebook_size=meta["codebook_size"],
        dim=meta["dim"],
        epochs=meta["epochs"],
        seed=meta["seed"],
    )
    return Codec(
        config=config,
        mean=arrays["mean"],
        basis=arrays["basis"],
        codebook=arrays["codebook"],
        usage=arrays["usage"],
    )


def benchmark_rows(codec: Codec, images: np.ndarray) -> list[dict]:
    """Per-prefix compression ratio and reconstruction MSE."""
    rows = []
    sched = codec.config.schedule
    for prefix in range(1, len(sched) + 1):
        ratio = compression_ratio(sched, prefix, codec.config.image_size)
        rows.append(
            {
                "compressor": f"rvq-prefix-{prefix}",
                "ratio": f"{ratio.numerator}/{ratio.denominator}",
                "mse": reconstruction_mse(codec, images, prefix),
            }
        )
    return rows


def write_benchmark_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["compressor", "ratio", "mse"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
