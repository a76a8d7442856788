"""Group-wise round-to-nearest quantization with per-block bitwidths.

A *group* is ``group_size`` consecutive weights of one matrix row; every
group carries a 16-bit float scale and a ``b``-bit zero code, where ``b`` is
the bitwidth of the block containing the group. ``b = 0`` prunes the block.

Scales are always rounded to float16 (toward zero), in memory as well as on
disk, so a packed file and the live quantizer dequantize to the same bits.
Rounding toward zero keeps both ends of the code range reachable, which is
what makes re-quantizing a dequantized matrix a no-op.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericError

PACK_MAGIC = b"SBIT"
PACK_VERSION = 1
_F16_TINY = float(np.finfo(np.float16).smallest_subnormal)


@dataclass(frozen=True)
class QuantConfig:
    group_size: int = 128
    bit_min: int = 1
    bit_max: int = 8
    scale_bits: int = 16
    symmetric: bool = False

    def __post_init__(self):
        if not 0 <= self.bit_min <= self.bit_max <= 8:
            raise ContractError(f"need 0 <= bit_min <= bit_max <= 8, got {self.bit_min}..{self.bit_max}")
        if self.group_size < 1:
            raise ContractError("group_size must be positive")


@dataclass
class GroupQuant:
    codes: np.ndarray  # int64, length group_size
    scale: float       # float16-representable
    zero_code: int
    bits: int

    def dequantize(self) -> np.ndarray:
        if self.bits == 0:
            return np.zeros(len(self.codes))
        return self.scale * (self.codes.astype(np.float64) - float(self.zero_code))


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    return t + np.where(np.abs(x - t) >= 0.5, np.sign(x), 0.0)


def f16_floor(s):
    """Largest float16 value <= ``s`` (elementwise, positive input), as float64."""
    s = np.asarray(s, dtype=np.float64)
    with np.errstate(over="ignore"):
        h = s.astype(np.float16)
    if np.any(np.isinf(h)):
        raise NumericError("quantization scale overflows float16")
    over = h.astype(np.float64) > s
    if np.any(over):
        h = h.copy()
        h[over] = np.nextafter(h[over], np.float16(0))
    out = h.astype(np.float64)
    return np.where(out > 0, out, _F16_TINY)


def _constant_grid(v: float, n: int):
    """Exact scale/code pair for a group whose entries all equal ``v``."""
    if v == 0.0:
        return 1.0, 0, 0
    mag = abs(v)
    for k in range(1, n + 1):
        s = mag / k
        if float(np.float16(s)) == s:
            break
    else:
        k, s = 1, float(np.float16(mag))
        if s == 0.0:
            # below half the smallest float16 step: rounding to zero is nearest
            return _F16_TINY, 0, 0
    return (s, 0, k) if v > 0 else (s, k, 0)


def quantize_groups(values: np.ndarray, bits, symmetric: bool = False):
    """Vectorized RTN over the rows of ``values`` (one group per row).

    ``bits`` is a scalar or one bitwidth per group. Returns ``(codes,
    scales, zeros)``; groups with ``b = 0`` get zero codes and scale 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("cannot quantize non-finite values")
    n_groups, g = values.shape
    bits = np.broadcast_to(np.asarray(bits, dtype=np.int64), (n_groups,))
    if np.any((bits < 0) | (bits > 8)):
        raise ContractError("bits must lie in [0, 8]")
    levels = (1 << bits) - 1
    codes = np.zeros((n_groups, g), dtype=np.int64)
    scales = np.zeros(n_groups)
    zeros = np.zeros(n_groups, dtype=np.int64)
    if n_groups == 0:
        return codes, scales, zeros

    vmin = values.min(axis=1)
    vmax = values.max(axis=1)
    live = bits > 0
    const = live & (vmin == vmax)
    reg = live & ~const

    if np.any(reg):
        v = values[reg]
        n = levels[reg].astype(np.float64)
        if symmetric:
            a = np.maximum(np.abs(vmin[reg]), np.abs(vmax[reg]))
            lo, hi = -a, a
        else:
            # the grid always spans zero, so one-signed groups stay representable
            lo = np.minimum(vmin[reg], 0.0)
            hi = np.maximum(vmax[reg], 0.0)
        s = f16_floor((hi - lo) / n)
        z = np.clip(round_half_away(-lo / s), 0, n)
        c = np.clip(round_half_away(v / s[:, None]) + z[:, None], 0, n[:, None])
        codes[reg] = c.astype(np.int64)
        scales[reg] = s
        zeros[reg] = z.astype(np.int64)

    for i in np.flatnonzero(const):
        s, z, c = _constant_grid(float(vmin[i]), int(levels[i]))
        scales[i], zeros[i] = s, z
        codes[i] = c
    return codes, scales, zeros


def dequantize_groups(codes, scales, zeros) -> np.ndarray:
    return np.asarray(scales, dtype=np.float64)[..., None] * (
        np.asarray(codes, dtype=np.float64) - np.asarray(zeros, dtype=np.float64)[..., None])


def rtn_quantize_group(values, bits: int, symmetric: bool = False) -> GroupQuant:
    """Quantize one group with the asymmetric min-max RTN grid."""
    if not 0 <= bits <= 8:
        raise ContractError("bits must lie in [0, 8]")
    codes, scales, zeros = quantize_groups(np.asarray(values, dtype=np.float64)[None, :], bits, symmetric)
    return GroupQuant(codes[0], float(scales[0]), int(zeros[0]), int(bits))


def quantize_matrix(w: np.ndarray, bits_map: np.ndarray, group_size: int, symmetric: bool = False):
    """Quantize a matrix whose per-group bitwidths are given by ``bits_map``.

    ``bits_map`` has shape ``(rows, cols // group_size)``. Returns codes of
    the matrix shape plus per-group scales and zeros.
    """
    rows, cols = w.shape
    if cols % group_size:
        raise ContractError(f"{cols} columns are not a multiple of group size {group_size}")
    groups = w.reshape(rows * (cols // group_size), group_size)
    codes, scales, zeros = quantize_groups(groups, np.asarray(bits_map).reshape(-1), symmetric)
    return codes.reshape(rows, cols), scales.reshape(rows, -1), zeros.reshape(rows, -1)


def dequantize_matrix(codes, scales, zeros, group_size: int) -> np.ndarray:
    rows, cols = codes.shape
    g = codes.reshape(rows, cols // group_size, group_size)
    return dequantize_groups(g, scales, zeros).reshape(rows, cols)


def fake_quantize(w: np.ndarray, bits: int, group_size: int, symmetric: bool = False) -> np.ndarray:
    """Quantize-dequantize ``w`` at a single bitwidth."""
    rows, cols = w.shape
    bmap = np.full((rows, cols // group_size), bits, dtype=np.int64)
    codes, scales, zeros = quantize_matrix(w, bmap, group_size, symmetric)
    return dequantize_matrix(codes, scales, zeros, group_size)


class QuantCache:
    """Per-site dequantized matrices at every candidate bitwidth.

    Groups never straddle blocks, so ``Q(w, b)`` for any assignment is a
    block-wise selection from these precomputed levels.
    """

    def __init__(self, model, partition, config: QuantConfig, bit_values=None):
        self.partition = partition
        self.config = config
        self.bit_values = sorted(set(range(config.bit_max + 1)) if bit_values is None else set(bit_values))
        self.levels = {}
        for site in partition.sites:
            w = model.params[site.name]
            stack = np.zeros((self.config.bit_max + 1,) + w.shape)
            for b in self.bit_values:
                stack[b] = fake_quantize(w, b, config.group_size, config.symmetric)
            self.levels[site.name] = stack

    def site_weights(self, site_index: int, assignment) -> np.ndarray:
        site = self.partition.sites[site_index]
        grid = self.partition.bit_grid(site_index, assignment)
        m, n = self.partition.block_rows, self.partition.block_cols
        rows, cols = site.shape
        bitmap = np.repeat(np.repeat(grid, m, axis=0)[:rows], n, axis=1)
        stack = self.levels[site.name]
        return np.take_along_axis(stack, bitmap[None], axis=0)[0]

    def weights(self, assignment, sites=None) -> dict[str, np.ndarray]:
        assignment = np.asarray(assignment)
        idx = range(len(self.partition.sites)) if sites is None else sites
        return {self.partition.sites[i].name: self.site_weights(i, assignment) for i in idx}


def quantize_model(model, partition, assignment, config: QuantConfig, cache: QuantCache | None = None) -> dict:
    """Quantized weight set ``Q(w, b)``: every parameter, linears dequantized."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (partition.n_blocks,):
        raise ContractError(f"assignment has {assignment.size} entries, partition has {partition.n_blocks} blocks")
    bad = (assignment != 0) & ((assignment < config.bit_min) | (assignment > config.bit_max))
    if np.any(bad) or np.any(assignment < 0):
        raise ContractError("assignment outside [bit_min, bit_max] (or 0)")
    out = dict(model.params)
    if cache is not None:
        out.update(cache.weights(assignment))
        return out
    for i, site in enumerate(partition.sites):
        grid = partition.bit_grid(i, assignment)
        rows, cols = site.shape
        bmap = np.repeat(np.repeat(grid, partition.block_rows, axis=0)[:rows],
                         partition.block_cols // config.group_size, axis=1)
        codes, scales, zeros = quantize_matrix(model.params[site.name], bmap, config.group_size, config.symmetric)
        out[site.name] = dequantize_matrix(codes, scales, zeros, config.group_size)
    return out


# ---------------------------------------------------------------------------
# effective bits
# ---------------------------------------------------------------------------

def effective_bits(assignment, partition, config: QuantConfig) -> tuple[float, float]:
    """(weight-only average bits, average bits including scale/zero/table metadata)."""
    b = np.asarray(assignment, dtype=np.int64)
    sizes = partition.sizes
    total_w = int(sizes.sum())
    weight_bits = int((b * sizes).sum())
    groups = sizes // config.group_size
    meta = int((groups * np.where(b > 0, config.scale_bits + b, 0)).sum()) + 8 * partition.n_blocks
    return weight_bits / total_w, (weight_bits + meta) / total_w


# ---------------------------------------------------------------------------
# packed format
# ---------------------------------------------------------------------------

@dataclass
class PackedBlock:
    bits: int
    codes: np.ndarray   # (rows_in_block, block_cols) int64
    scales: np.ndarray  # (rows_in_block, block_cols // group_size) float64 (float16 values)
    zeros: np.ndarray   # same shape as scales, int64

    def dequantize(self, group_size: int) -> np.ndarray:
        if self.bits == 0:
            return np.zeros(self.codes.shape)
        return dequantize_matrix(self.codes, self.scales, self.zeros, group_size)


@dataclass
class PackedTensor:
    name: str
    rows: int
    cols: int
    block_rows: int
    block_cols: int
    group_size: int
    bit_table: np.ndarray  # uint8, one per block, row-major over the block grid
    payload: bytes

    @property
    def grid(self) -> tuple[int, int]:
        return -(-self.rows // self.block_rows), self.cols // self.block_cols

    def block_rows_at(self, rb: int) -> int:
        return min(self.block_rows, self.rows - rb * self.block_rows)


def group_payload_bytes(bits: int, group_size: int) -> int:
    """Scale (2 bytes) plus zero code and codes packed LSB-first, byte-padded."""
    if bits == 0:
        return 0
    return 2 + -(-(group_size + 1) * bits // 8)


def payload_size(rows, cols, block_rows, block_cols, group_size, bit_table) -> int:
    nrb = -(-rows // block_rows)
    ncb = cols // block_cols
    table = np.asarray(bit_table).reshape(nrb, ncb)
    total = 0
    for rb in range(nrb):
        rib = min(block_rows, rows - rb * block_rows)
        for cb in range(ncb):
            total += rib * (block_cols // group_size) * group_payload_bytes(int(table[rb, cb]), group_size)
    return total


def _pack_bits(vals: np.ndarray, bits: int) -> bytes:
    """Pack each row of ``vals`` LSB-first into its own byte-aligned run."""
    shifts = np.arange(bits, dtype=np.int64)
    bitplanes = ((vals[:, :, None] >> shifts) & 1).astype(np.uint8).reshape(vals.shape[0], -1)
    return np.packbits(bitplanes, axis=1, bitorder="little").tobytes()


def _unpack_bits(buf: np.ndarray, n_rows: int, n_vals: int, bits: int) -> np.ndarray:
    row_bytes = -(-n_vals * bits // 8)
    raw = buf.reshape(n_rows, row_bytes)
    planes = np.unpackbits(raw, axis=1, bitorder="little")[:, :n_vals * bits]
    planes = planes.reshape(n_rows, n_vals, bits).astype(np.int64)
    return (planes << np.arange(bits, dtype=np.int64)).sum(axis=2)


def pack_tensor(name: str, blocks: list[PackedBlock], rows: int, cols: int,
                block_rows: int, block_cols: int, group_size: int) -> PackedTensor:
    """Serialize row-major ``blocks`` into a :class:`PackedTensor`."""
    nrb, ncb = -(-rows // block_rows), cols // block_cols
    if len(blocks) != nrb * ncb or cols % block_cols or block_cols % group_size:
        raise ContractError("block list does not match the declared grid")
    table = np.zeros(len(blocks), dtype=np.uint8)
    chunks = []
    for idx, blk in enumerate(blocks):
        rb = idx // ncb
        rib = min(block_rows, rows - rb * block_rows)
        if blk.codes.shape != (rib, block_cols):
            raise ContractError(f"block {idx} has shape {blk.codes.shape}, expected {(rib, block_cols)}")
        table[idx] = blk.bits
        if blk.bits == 0:
            continue
        n_groups = rib * (block_cols // group_size)
        codes = blk.codes.reshape(n_groups, group_size)
        zeros = np.asarray(blk.zeros, dtype=np.int64).reshape(n_groups, 1)
        if codes.min() < 0 or codes.max() >= (1 << blk.bits) or zeros.min() < 0 or zeros.max() >= (1 << blk.bits):
            raise ContractError(f"block {idx} has codes outside {blk.bits}-bit range")
        scale16 = np.asarray(blk.scales, dtype=np.float64).reshape(n_groups).astype("<f2")
        if np.any(scale16.astype(np.float64) != np.asarray(blk.scales).reshape(n_groups)):
            raise ContractError(f"block {idx} scales are not float16 values")
        stream = np.frombuffer(_pack_bits(np.hstack([zeros, codes]), blk.bits), dtype=np.uint8)
        stream = stream.reshape(n_groups, -1)
        per_group = np.hstack([scale16.view(np.uint8).reshape(n_groups, 2), stream])
        chunks.append(per_group.tobytes())
    return PackedTensor(name, rows, cols, block_rows, block_cols, group_size, table, b"".join(chunks))


def unpack_tensor(pt: PackedTensor, base_offset: int = 0) -> list[PackedBlock]:
    nrb, ncb = pt.grid
    expected = payload_size(pt.rows, pt.cols, pt.block_rows, pt.block_cols, pt.group_size, pt.bit_table)
    if len(pt.payload) < expected:
        raise FormatError(f"payload of {pt.name!r} truncated: {len(pt.payload)} of {expected} bytes",
                          offset=base_offset + len(pt.payload))
    buf = np.frombuffer(pt.payload, dtype=np.uint8)
    pos = 0
    blocks = []
    for idx in range(nrb * ncb):
        rib = pt.block_rows_at(idx // ncb)
        b = int(pt.bit_table[idx])
        gpr = pt.block_cols // pt.group_size
        n_groups = rib * gpr
        if b == 0:
            blocks.append(PackedBlock(0, np.zeros((rib, pt.block_cols), dtype=np.int64),
                                      np.zeros((rib, gpr)), np.zeros((rib, gpr), dtype=np.int64)))
            continue
        per = group_payload_bytes(b, pt.group_size)
        raw = buf[pos:pos + per * n_groups].reshape(n_groups, per)
        pos += per * n_groups
        scales = raw[:, :2].copy().view("<f2").reshape(n_groups).astype(np.float64)
        vals = _unpack_bits(np.ascontiguousarray(raw[:, 2:]), n_groups, pt.group_size + 1, b)
        blocks.append(PackedBlock(b, vals[:, 1:].reshape(rib, pt.block_cols),
                                  scales.reshape(rib, gpr), vals[:, 0].reshape(rib, gpr)))
    return blocks


def dequantize_packed(pt: PackedTensor) -> np.ndarray:
    out = np.zeros((pt.rows, pt.cols))
    nrb, ncb = pt.grid
    for idx, blk in enumerate(unpack_tensor(pt)):
        rb, cb = divmod(idx, ncb)
        r0, c0 = rb * pt.block_rows, cb * pt.block_cols
        out[r0:r0 + blk.codes.shape[0], c0:c0 + pt.block_cols] = blk.dequantize(pt.group_size)
    return out


def pack_site(name: str, w: np.ndarray, grid: np.ndarray, block_rows: int, block_cols: int,
              config: QuantConfig) -> PackedTensor:
    """Quantize matrix ``w`` under a block bit grid and pack it."""
    rows, cols = w.shape
    g = config.group_size
    blocks = []
    for rb in range(grid.shape[0]):
        for cb in range(grid.shape[1]):
            sub = w[rb * block_rows:(rb + 1) * block_rows, cb * block_cols:(cb + 1) * block_cols]
            b = int(grid[rb, cb])
            bmap = np.full((sub.shape[0], block_cols // g), b, dtype=np.int64)
            codes, scales, zeros = quantize_matrix(sub, bmap, g, config.symmetric)
            blocks.append(PackedBlock(b, codes, scales, zeros))
    return pack_tensor(name, blocks, rows, cols, block_rows, block_cols, g)


def _tensor_header_size(pt: PackedTensor) -> int:
    return 2 + len(pt.name.encode()) + 5 * 4 + len(pt.bit_table)


def predicted_file_size(tensors: list[PackedTensor]) -> int:
    """Closed-form container size from headers and bit tables alone."""
    total = 4 + 2 + 4
    for pt in tensors:
        total += _tensor_header_size(pt)
        total += payload_size(pt.rows, pt.cols, pt.block_rows, pt.block_cols, pt.group_size, pt.bit_table)
    return total


def write_packed(tensors: list[PackedTensor], path) -> int:
    parts = [PACK_MAGIC, struct.pack("<HI", PACK_VERSION, len(tensors))]
    for pt in tensors:
        raw = pt.name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<5I", pt.rows, pt.cols, pt.block_rows, pt.block_cols, pt.group_size))
        parts.append(np.asarray(pt.bit_table, dtype=np.uint8).tobytes())
        parts.append(pt.payload)
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return len(data)


def read_packed(path_or_bytes) -> list[PackedTensor]:
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated {what}", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != PACK_MAGIC:
        raise FormatError("bad magic", offset=0)
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != PACK_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        rows, cols, br, bc, gs = struct.unpack("<5I", take(20, "tensor header"))
        if br == 0 or bc == 0 or gs == 0 or cols % bc or bc % gs:
            raise FormatError(f"inconsistent geometry for {name!r}", offset=pos - 20)
        n_blocks = -(-rows // br) * (cols // bc)
        table = np.frombuffer(take(n_blocks, "bit table"), dtype=np.uint8).copy()
        if table.size and table.max() > 8:
            raise FormatError(f"bitwidth above 8 in {name!r}", offset=pos - n_blocks)
        need = payload_size(rows, cols, br, bc, gs, table)
        start = pos
        payload = take(need, f"payload of {name!r}")
        pt = PackedTensor(name, rows, cols, br, bc, gs, table, payload)
        out.append(pt)
        del start
    return out
