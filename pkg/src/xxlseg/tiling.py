"""Block tiling of large volumes with per-face overlap."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._threads import thread_map

Box = tuple[slice, slice, slice]


@dataclass(frozen=True)
class Block:
    core: Box
    padded: Box

    def core_in_padded(self) -> Box:
        """Core region in the padded block's local coordinates."""
        return tuple(
            slice(c.start - p.start, c.stop - p.start) for c, p in zip(self.core, self.padded)
        )


@dataclass(frozen=True)
class BlockTiling:
    dims: tuple[int, int, int]
    block_edge: int
    overlap: int
    blocks: tuple[Block, ...]


def make_tiling(dims, block_edge: int = 64, overlap: int = 8) -> BlockTiling:
    """Cores of edge ``block_edge`` (the last one per axis may be shorter), each
    padded by ``overlap`` on every face and clamped to the volume."""
    dims = tuple(int(d) for d in getattr(dims, "dims", dims))
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if block_edge < 1:
        raise ValueError("block_edge must be >= 1")
    if overlap < 0:
        raise ValueError("overlap must be >= 0")

    starts = [range(0, n, block_edge) for n in dims]
    blocks = []
    # x varies fastest, matching the payload order
    for sz, sy, sx in itertools.product(*reversed(starts)):
        core, padded = [], []
        for s, n in zip((sx, sy, sz), dims):
            e = min(s + block_edge, n)
            core.append(slice(s, e))
            padded.append(slice(max(s - overlap, 0), min(e + overlap, n)))
        blocks.append(Block(tuple(core), tuple(padded)))
    return BlockTiling(dims, int(block_edge), int(overlap), tuple(blocks))


def blockwise_apply(fn, volume: np.ndarray, tiling: BlockTiling, out_dtype=None, threads=None):
    """Run ``fn`` on every padded block and stitch the cores back together.

    ``fn`` must return an array shaped like its input block.
    """
    volume = np.asarray(volume)
    if tuple(volume.shape) != tiling.dims:
        raise ValueError(f"volume shape {volume.shape} does not match tiling dims {tiling.dims}")
    out = np.empty(volume.shape, dtype=out_dtype or volume.dtype)

    def run(block):
        result = np.asarray(fn(volume[block.padded]))
        if result.shape != volume[block.padded].shape:
            raise ValueError("blockwise function changed the block shape")
        return result[block.core_in_padded()]

    for block, core in zip(tiling.blocks, thread_map(run, tiling.blocks, threads)):
        out[block.core] = core
    return out
