"""Image encoding of routing instances and the pixel-collision estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import gammainc

from .problems import CVRPInstance, Instance, TSPInstance

SIZE = 224
NUM_PIXELS = SIZE * SIZE

DEPOT_PIXEL = (1.0, 1.0, 0.0)


@dataclass(frozen=True, eq=False)
class RasterImage:
    """(224, 224, 3) float32 image; rows follow y, columns follow x."""

    pixels: np.ndarray
    source: str | None = None

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32, copy=True)
        if px.shape != (SIZE, SIZE, 3):
            raise ValueError(f"raster must be {SIZE}x{SIZE}x3, got {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


def pixel_index(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) pixel of each coordinate: floor(c * 224) clamped to 223."""
    idx = np.clip(np.floor(np.asarray(coords) * SIZE).astype(np.int64), 0, SIZE - 1)
    return idx[..., 1], idx[..., 0]


def _source(inst) -> str | None:
    return None if inst.seed is None else f"{inst.kind}-seed{inst.seed}"


def rasterize_tsp(inst: TSPInstance) -> RasterImage:
    px = np.zeros((SIZE, SIZE, 3), dtype=np.float32)
    rows, cols = pixel_index(inst.coords)
    px[rows, cols, :] = 1.0
    return RasterImage(px, _source(inst))


def rasterize_cvrp(inst: CVRPInstance) -> RasterImage:
    px = np.zeros((SIZE, SIZE, 3), dtype=np.float32)
    rows, cols = pixel_index(inst.coords)
    cust = inst.customers
    d = (inst.demands[cust] / inst.capacity).astype(np.float32)
    px[rows[cust], cols[cust], 0] = 1.0
    # customer/customer collisions keep the larger demand
    np.maximum.at(px[:, :, 2], (rows[cust], cols[cust]), d)
    r, c = rows[inst.depot], cols[inst.depot]
    px[r, c] = DEPOT_PIXEL
    return RasterImage(px, _source(inst))


def rasterize(inst: Instance) -> RasterImage:
    if isinstance(inst, CVRPInstance):
        return rasterize_cvrp(inst)
    return rasterize_tsp(inst)


# ---------------------------------------------------------------- collisions


def pixel_collision_prob(n: int, m: int = NUM_PIXELS) -> float:
    """Poisson probability that one pixel receives two or more of ``n`` nodes.

    1 - e^-l - l e^-l with l = n/m, which is the regularized lower incomplete
    gamma P(2, l); using it avoids cancellation when l is tiny.
    """
    if n < 0 or m < 1:
        raise ValueError("need n >= 0 and m >= 1")
    return float(gammainc(2, n / m))


def at_most_one_collision_prob(n: int, m: int = NUM_PIXELS) -> float:
    """(1-p)^m + m p (1-p)^(m-1), evaluated in log space."""
    p = pixel_collision_prob(n, m)
    if p == 0.0:
        return 1.0
    # (1-p)^(m-1) * (1 + (m-1) p)
    return math.exp((m - 1) * math.log1p(-p) + math.log1p((m - 1) * p))


def simulate_at_most_one_collision(n: int, m: int = NUM_PIXELS, trials: int = 1_000_000,
                                   seed: int = 0, chunk: int = 100_000) -> float:
    """Monte-Carlo frequency of "at most one pixel holds several nodes".

    Throws ``n`` balls uniformly into ``m`` bins per trial.
    """
    if n < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        bins = np.sort(rng.integers(0, m, size=(b, n), dtype=np.int32), axis=1)
        same = bins[:, 1:] == bins[:, :-1]
        # start of a run of equal bins = one multiply-occupied pixel
        starts = same.copy()
        starts[:, 1:] &= ~same[:, :-1]
        hits += int(np.count_nonzero(starts.sum(axis=1) <= 1))
        done += b
    return hits / trials


# ---------------------------------------------------------------- export


def save_raster(img: RasterImage, path) -> None:
    """Write a 3-page float32 TIFF (one page per channel); lossless."""
    frames = [Image.fromarray(np.ascontiguousarray(img.pixels[:, :, c]), mode="F") for c in range(3)]
    frames[0].save(Path(path), format="TIFF", save_all=True, append_images=frames[1:])


def load_raster(path) -> RasterImage:
    with Image.open(Path(path)) as im:
        pages = []
        for i in range(im.n_frames):
            im.seek(i)
            pages.append(np.array(im, dtype=np.float32))
    return RasterImage(np.stack(pages, axis=-1))
