"""Block partitioning of the quantizable matrices and channel reordering.

Blocks are ``block_rows x block_cols`` tiles. Flat block ids run over sites
in order, then row-blocks, then column-blocks. The last row-block of a
matrix may be short; columns must tile exactly so groups never straddle a
block edge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, PermutationError
from .toymodel import CouplingGroup, ModelBundle, coupling_graph


@dataclass
class BlockPartition:
    sites: list              # LinearSite, in partition order
    block_rows: int
    block_cols: int
    group_size: int
    grids: list              # (row_blocks, col_blocks) per site
    offsets: np.ndarray      # first flat id of each site, plus a final total
    sizes: np.ndarray        # element count M_i per block
    site_of: np.ndarray      # site index of each block
    layer_of: np.ndarray     # decoder layer of each block

    @property
    def n_blocks(self) -> int:
        return int(self.offsets[-1])

    @property
    def total_weights(self) -> int:
        return int(self.sizes.sum())

    def block_id(self, site_index: int, rb: int, cb: int) -> int:
        nrb, ncb = self.grids[site_index]
        if not (0 <= rb < nrb and 0 <= cb < ncb):
            raise IndexError(f"block ({rb}, {cb}) outside grid {nrb}x{ncb}")
        return int(self.offsets[site_index]) + rb * ncb + cb

    def locate(self, block: int) -> tuple[int, int, int]:
        """Flat id -> (site index, row-block, col-block)."""
        if not 0 <= block < self.n_blocks:
            raise IndexError(block)
        s = int(self.site_of[block])
        rb, cb = divmod(block - int(self.offsets[s]), self.grids[s][1])
        return s, rb, cb

    def block_slices(self, block: int) -> tuple[str, slice, slice]:
        s, rb, cb = self.locate(block)
        r0, c0 = rb * self.block_rows, cb * self.block_cols
        rows = self.sites[s].shape[0]
        return self.sites[s].name, slice(r0, min(r0 + self.block_rows, rows)), slice(c0, c0 + self.block_cols)

    def site_blocks(self, site_index: int) -> range:
        return range(int(self.offsets[site_index]), int(self.offsets[site_index + 1]))

    def bit_grid(self, site_index: int, assignment) -> np.ndarray:
        ids = self.site_blocks(site_index)
        return np.asarray(assignment)[ids.start:ids.stop].reshape(self.grids[site_index])

    def block_reduce(self, site_index: int, mat: np.ndarray, op=np.sum) -> np.ndarray:
        """Reduce a site-shaped matrix to one value per block (flattened row-major)."""
        nrb, ncb = self.grids[site_index]
        rows = mat.shape[0]
        pad = nrb * self.block_rows - rows
        if pad:
            mat = np.vstack([mat, np.zeros((pad, mat.shape[1]))])
        tiles = mat.reshape(nrb, self.block_rows, ncb, self.block_cols)
        return op(tiles, axis=(1, 3)).reshape(-1)

    def average_bits(self, assignment) -> float:
        return float((np.asarray(assignment) * self.sizes).sum() / self.sizes.sum())

    def layer_blocks(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.layer_of == layer)


def partition_weights(model: ModelBundle, block_rows: int = 64, block_cols: int = 128,
                      group_size: int = 128) -> BlockPartition:
    if block_rows < 1 or block_cols < 1 or group_size < 1:
        raise ConfigError("block and group sizes must be positive", key="block_rows")
    if block_cols % group_size:
        raise ConfigError(f"block_cols={block_cols} is not a multiple of group_size={group_size}",
                          key="block_cols")
    grids, sizes, site_of, layer_of, offsets = [], [], [], [], [0]
    for i, site in enumerate(model.quantizable):
        rows, cols = site.shape
        if cols % block_cols:
            raise ConfigError(f"{site.name} has {cols} columns, not a multiple of block_cols={block_cols}",
                              key="block_cols")
        nrb, ncb = -(-rows // block_rows), cols // block_cols
        grids.append((nrb, ncb))
        for rb in range(nrb):
            m = min(block_rows, rows - rb * block_rows)
            sizes.extend([m * block_cols] * ncb)
        site_of.extend([i] * (nrb * ncb))
        layer_of.extend([site.layer] * (nrb * ncb))
        offsets.append(offsets[-1] + nrb * ncb)
    return BlockPartition(list(model.quantizable), block_rows, block_cols, group_size, grids,
                          np.array(offsets), np.array(sizes, dtype=np.int64),
                          np.array(site_of, dtype=np.int64), np.array(layer_of, dtype=np.int64))


# ---------------------------------------------------------------------------
# reordering
# ---------------------------------------------------------------------------

def channel_scores(sens: dict[str, np.ndarray], group: CouplingGroup) -> np.ndarray:
    """l1 mass per channel summed over every member that has a sensitivity map.

    Members without an entry in ``sens`` (embedding, head, norm gains) carry
    no quantization sensitivity and contribute nothing.
    """
    width = group.width
    score = np.zeros(width)
    for m in group.members:
        if m.stop - m.start != width:
            raise ContractError(f"member {m.param} has width {m.stop - m.start}, group width is {width}")
        if m.param not in sens:
            continue
        s = np.abs(np.asarray(sens[m.param], dtype=np.float64))
        marg = s.sum(axis=1) if m.axis == "rows" else s.sum(axis=0)
        if m.stop > marg.size:
            raise ContractError(f"slice {m.start}:{m.stop} exceeds {m.param} {m.axis}")
        score += marg[m.start:m.stop]
    return score


def sort_descending(scores) -> np.ndarray:
    """new -> old index map placing the largest scores first; ties keep order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def compute_permutations(model: ModelBundle, sens: dict[str, np.ndarray], groups=None) -> list[np.ndarray]:
    groups = coupling_graph(model) if groups is None else groups
    return [sort_descending(channel_scores(sens, g)) for g in groups]


def identity_permutations(groups) -> list[np.ndarray]:
    return [np.arange(g.width) for g in groups]


def check_permutation(perm, width: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (width,) or not np.array_equal(np.sort(perm), np.arange(width)):
        raise PermutationError(f"not a bijection on [0, {width})")
    return perm.astype(np.int64)


def invert(perm) -> np.ndarray:
    return np.argsort(np.asarray(perm), kind="stable")


def apply_permutations(model: ModelBundle, perms, groups=None) -> ModelBundle:
    """Permute every coupled slice; the network computes the same function."""
    groups = coupling_graph(model) if groups is None else groups
    if len(perms) != len(groups):
        raise PermutationError(f"{len(perms)} permutations for {len(groups)} groups")
    out = model.copy()
    for g, perm in zip(groups, perms):
        perm = check_permutation(perm, g.width)
        for m in g.members:
            arr = out.params[m.param]
            idx = m.start + perm
            if arr.ndim == 1 or m.axis == "cols":
                arr[..., m.start:m.stop] = arr[..., idx]
            else:
                arr[m.start:m.stop] = arr[idx]
    return out


def invert_permutations(perms) -> list[np.ndarray]:
    return [invert(p) for p in perms]


def save_permutations(perms, path) -> None:
    Path(path).write_text(json.dumps({str(i): [int(v) for v in p] for i, p in enumerate(perms)}, indent=1))


def load_permutations(path) -> list[np.ndarray]:
    raw = json.loads(Path(path).read_text())
    return [np.array(raw[str(i)], dtype=np.int64) for i in range(len(raw))]


def top_left_mass(s: np.ndarray) -> float:
    """Share of total |s| sitting in the top-left quadrant of a matrix."""
    s = np.abs(s)
    total = s.sum()
    if total == 0:
        return 0.0
    r, c = s.shape
    return float(s[:r // 2, :c // 2].sum() / total)
