"""
Repulsion-sample generators.

A repulsion source yields unlabeled input batches on which particle predictions are
pushed apart: training inputs, patch-shuffled training images (labels destroyed,
pixel statistics kept), an unlabeled OOD pool, uniform noise, or uniform samples from a
box over the input domain.

Patch shuffling splits an H x W image into p x p tiles anchored at multiples of p.
When p does not divide H or W the residual edge tiles are smaller; tiles are only
exchanged with tiles of the same shape, and all channels move together.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import EmptyPool, PatchError, SpecError
from .models import Matrix

# (row slice, column slice) of one tile
Tile = tuple[slice, slice]
# (destination tile, source tile) pairs
TileMoves = list[tuple[Tile, Tile]]


class SourceKind(Enum):
    """Where repulsion samples come from."""

    TRAIN_INPUTS = "train-inputs"
    PATCH_SHUFFLE = "patch-shuffle"
    OOD_POOL = "ood-pool"
    UNIFORM_NOISE = "uniform-noise"
    UNIFORM_DOMAIN = "uniform-domain"


@dataclass(frozen=True)
class RepulsionSource:
    """
    A configured repulsion-sample generator.

    Use the factory classmethods rather than the constructor.
    """

    kind: SourceKind
    data: Optional[Matrix] = None
    patch_side: int = 0
    image_shape: tuple[int, int, int] = (0, 0, 0)
    low: float = 0.0
    high: float = 1.0
    dim: int = 0
    bounds: Optional[Matrix] = None  # dim x 2 (low, high)

    @classmethod
    def train_inputs(cls, inputs: Matrix) -> "RepulsionSource":
        """Training inputs themselves."""
        return cls(kind=SourceKind.TRAIN_INPUTS, data=_pool(inputs))

    @classmethod
    def ood_pool(cls, inputs: Matrix) -> "RepulsionSource":
        """An unlabeled pool of out-of-distribution inputs."""
        return cls(kind=SourceKind.OOD_POOL, data=_pool(inputs))

    @classmethod
    def patch_shuffle(
        cls, inputs: Matrix, patch_side: int, image_shape: tuple[int, int, int]
    ) -> "RepulsionSource":
        """
        Training images with their tiles shuffled.

        Args:
            inputs: N x (H*W*C) flattened images.
            patch_side: Tile side p in pixels.
            image_shape: (H, W, C).
        """
        data = _pool(inputs)
        height, width, channels = image_shape
        if data.shape[1] != height * width * channels:
            raise SpecError(
                f"inputs of width {data.shape[1]} cannot be reshaped to {image_shape}"
            )
        if patch_side < 1 or patch_side > max(height, width):
            raise PatchError(f"patch side {patch_side} invalid for a {height}x{width} image")
        return cls(
            kind=SourceKind.PATCH_SHUFFLE,
            data=data,
            patch_side=patch_side,
            image_shape=(height, width, channels),
        )

    @classmethod
    def uniform_noise(cls, low: float, high: float, dim: int) -> "RepulsionSource":
        """I.i.d. uniform noise on [low, high) in every coordinate."""
        if not low < high or dim < 1:
            raise SpecError(
                f"uniform noise needs low < high and dim >= 1, got {low}, {high}, {dim}"
            )
        return cls(kind=SourceKind.UNIFORM_NOISE, low=low, high=high, dim=dim)

    @classmethod
    def uniform_domain(cls, bounds: Matrix | list[list[float]]) -> "RepulsionSource":
        """Uniform samples from a box; ``bounds`` holds one (low, high) row per dimension."""
        box = np.asarray(bounds, dtype=np.float64)
        if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 1:
            raise SpecError(f"bounds must be a dim x 2 array, got shape {box.shape}")
        if not (box[:, 0] < box[:, 1]).all():
            raise SpecError("every bound needs low < high")
        return cls(kind=SourceKind.UNIFORM_DOMAIN, bounds=box, dim=box.shape[0])

    @property
    def input_dim(self) -> int:
        if self.data is not None:
            return int(self.data.shape[1])
        return self.dim


def _pool(inputs: Matrix) -> Matrix:
    data = np.asarray(inputs, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyPool(f"repulsion pool is empty (shape {data.shape})")
    return data


def _sample_rows(data: Matrix, rng: np.random.Generator, size: int) -> Matrix:
    """Rows without replacement, or with replacement when ``size`` exceeds the pool."""
    replace = size > data.shape[0]
    return data[rng.choice(data.shape[0], size=size, replace=replace)]


def draw(source: RepulsionSource, rng: np.random.Generator, size: int) -> Matrix:
    """
    Draw a repulsion batch.

    Args:
        source: Configured generator.
        rng: Random stream; the batch is deterministic given its state.
        size: Batch size B_r (>= 1).

    Returns:
        B_r x d_in matrix.

    Raises:
        EmptyPool: If a data-backed source has no rows.
    """
    if size < 1:
        raise SpecError(f"repulsion batch size must be >= 1, got {size}")
    kind = source.kind
    if kind in (SourceKind.TRAIN_INPUTS, SourceKind.OOD_POOL, SourceKind.PATCH_SHUFFLE):
        if source.data is None or source.data.shape[0] == 0:
            raise EmptyPool(f"{kind.value} source has no data")
        batch = _sample_rows(source.data, rng, size)
        if kind is SourceKind.PATCH_SHUFFLE:
            shape = source.image_shape
            batch = np.stack(
                [patch_shuffle(row.reshape(shape), source.patch_side, rng).ravel() for row in batch]
            )
        return batch
    if kind is SourceKind.UNIFORM_NOISE:
        return rng.uniform(source.low, source.high, size=(size, source.dim))
    assert source.bounds is not None
    return rng.uniform(source.bounds[:, 0], source.bounds[:, 1], size=(size, source.dim))


def _spans(length: int, p: int) -> list[slice]:
    return [slice(start, min(start + p, length)) for start in range(0, length, p)]


def tile_moves(height: int, width: int, patch_side: int, rng: np.random.Generator) -> TileMoves:
    """
    Random tile permutation for an image grid.

    Tiles are grouped by shape (full tiles, right edge, bottom edge, corner) in that
    order, tiles within a group in row-major order, and each group is permuted with one
    ``rng.permutation`` call. Destination k of a group receives source ``perm[k]``.

    Raises:
        PatchError: If the patch side is < 1 or exceeds both image sides.
    """
    if patch_side < 1 or patch_side > max(height, width):
        raise PatchError(f"patch side {patch_side} invalid for a {height}x{width} image")
    groups: dict[tuple[int, int], list[Tile]] = {}
    for rows in _spans(height, patch_side):
        for cols in _spans(width, patch_side):
            shape = (rows.stop - rows.start, cols.stop - cols.start)
            groups.setdefault(shape, []).append((rows, cols))

    moves: TileMoves = []
    for shape in sorted(groups, reverse=True):
        tiles = groups[shape]
        perm = rng.permutation(len(tiles))
        moves.extend((tiles[k], tiles[int(perm[k])]) for k in range(len(tiles)))
    return moves


def apply_tile_moves(image: Matrix, moves: TileMoves, inverse: bool = False) -> Matrix:
    """Rearrange tiles of an H x W x C image; ``inverse`` undoes the same moves."""
    out = np.empty_like(image)
    for dest, src in moves:
        if inverse:
            dest, src = src, dest
        out[dest[0], dest[1], ...] = image[src[0], src[1], ...]
    return out


def patch_shuffle(image: Matrix, patch_side: int, rng: np.random.Generator) -> Matrix:
    """
    Permute same-shape p x p tiles of an image uniformly at random.

    The output is a rearrangement of the input pixels: the multiset of values and every
    per-channel sum are preserved exactly.

    Args:
        image: H x W x C array (H x W is treated as single-channel).
        patch_side: Tile side p.
        rng: Random stream.
    """
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    moves = tile_moves(image.shape[0], image.shape[1], patch_side, rng)
    out = apply_tile_moves(image, moves)
    return out[..., 0] if squeeze else out
