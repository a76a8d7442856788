"""Toy decoder-only transformer, synthetic corpus, and channel coupling.

The decoder is pre-norm: each layer applies RMS-norm + causal softmax
attention, then RMS-norm + a SiLU-gated MLP, both as residual updates.
There is no positional encoding. Linear weights are stored as
``(d_out, d_in)`` so rows are output channels and columns input channels.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import Tape, grad
from .errors import FormatError, InputError, SizeError, SpecError, TrainingError

PROJECTIONS = ("q", "k", "v", "o", "up", "gate", "down")

CHECKPOINT_MAGIC = b"SBCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    vocab: int = 256
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 128
    seq_len: int = 64
    seed: int = 7

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self, group_size: int | None = None) -> "ModelSpec":
        for name in ("vocab", "d_model", "n_layers", "n_heads", "d_ff", "seq_len"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise SpecError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if group_size is not None:
            for name in ("d_model", "d_ff"):
                if getattr(self, name) % group_size:
                    raise SpecError(f"{name}={getattr(self, name)} is not divisible by group size {group_size}")
        return self


@dataclass(frozen=True)
class LinearSite:
    id: int
    name: str
    layer: int
    kind: str
    shape: tuple[int, int]


@dataclass(frozen=True)
class CouplingMember:
    param: str
    axis: str  # "rows" or "cols"; 1-D gains use "cols"
    start: int
    stop: int


@dataclass(frozen=True)
class CouplingGroup:
    kind: str  # "residual", "mlp-local" or "head-local"
    members: tuple[CouplingMember, ...]
    layer: int | None = None
    head: int | None = None

    @property
    def width(self) -> int:
        return self.members[0].stop - self.members[0].start


@dataclass
class ModelBundle:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    quantizable: list[LinearSite] = field(default_factory=list)

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.spec, {k: v.copy() for k, v in self.params.items()}, list(self.quantizable))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def site(self, name: str) -> LinearSite:
        for s in self.quantizable:
            if s.name == name:
                return s
        raise KeyError(name)


@dataclass
class CalibrationSet:
    sequences: np.ndarray  # (n_seqs, seq_len) int64
    seed: int

    def __len__(self):
        return len(self.sequences)

    def batch(self, idx) -> np.ndarray:
        return self.sequences[np.asarray(idx)]


def site_name(layer: int, kind: str) -> str:
    return f"layer{layer}.{kind}"


def linear_sites(spec: ModelSpec) -> list[LinearSite]:
    d, f = spec.d_model, spec.d_ff
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
              "up": (f, d), "gate": (f, d), "down": (d, f)}
    sites = []
    for layer in range(spec.n_layers):
        for kind in PROJECTIONS:
            sites.append(LinearSite(len(sites), site_name(layer, kind), layer, kind, shapes[kind]))
    return sites


def build_model(spec: ModelSpec) -> ModelBundle:
    """Seeded scaled-normal initialization; equal specs give equal bundles."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.d_model
    resid_scale = 1.0 / math.sqrt(2 * spec.n_layers)
    params = {"embed": rng.standard_normal((spec.vocab, d))}
    sites = linear_sites(spec)
    for s in sites:
        rows, cols = s.shape
        std = 1.0 / math.sqrt(cols)
        if s.kind in ("o", "down"):
            std *= resid_scale
        params[s.name] = rng.standard_normal((rows, cols)) * std
    for layer in range(spec.n_layers):
        params[f"layer{layer}.norm1"] = np.ones(d)
        params[f"layer{layer}.norm2"] = np.ones(d)
    params["norm_f"] = np.ones(d)
    params["head"] = rng.standard_normal((spec.vocab, d)) * 0.02
    return ModelBundle(spec, params, sites)


# ---------------------------------------------------------------------------
# corpus and calibration data
# ---------------------------------------------------------------------------

def transition_table(vocab: int, seed: int, fanout: int = 8):
    """Order-2 transition table as (candidates, probabilities), each (V, V, fanout).

    Each previous token owns a small candidate set; the token before it
    reweights that set, so both context positions carry information.
    """
    rng = np.random.default_rng(seed)
    fanout = min(fanout, vocab)
    cand_by_prev = np.stack([rng.choice(vocab, size=fanout, replace=False) for _ in range(vocab)])
    base = rng.normal(0.0, 1.5, size=(vocab, fanout))
    n_modes = 4
    mode_of = rng.integers(0, n_modes, size=vocab)
    tilt = rng.normal(0.0, 1.5, size=(n_modes, vocab, fanout))
    logits = base[None, :, :] + tilt[mode_of][:, :, :]
    logits -= logits.max(axis=2, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=2, keepdims=True)
    cands = np.broadcast_to(cand_by_prev[None, :, :], (vocab, vocab, fanout))
    return np.ascontiguousarray(cands), probs


def make_corpus(vocab: int, length: int, seed: int) -> np.ndarray:
    """Token stream drawn from a seeded order-2 Markov chain."""
    if vocab < 1 or length < 0:
        raise SizeError("vocab must be >= 1 and length >= 0")
    cands, probs = transition_table(vocab, seed)
    cdf = np.cumsum(probs, axis=2)
    rng = np.random.default_rng(seed + 1)
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    a, b = int(rng.integers(vocab)), int(rng.integers(vocab))
    for t in range(length):
        row = cdf[a, b]
        j = min(int(np.searchsorted(row, u[t] * row[-1], side="right")), len(row) - 1)
        nxt = int(cands[a, b, j])
        out[t] = nxt
        a, b = b, nxt
    return out


def load_byte_corpus(path) -> np.ndarray:
    """Raw bytes of a file as tokens (vocab 256)."""
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)


def make_calibration(corpus: np.ndarray, n_seqs: int, seq_len: int, seed: int) -> CalibrationSet:
    """``n_seqs`` disjoint contiguous windows of ``seq_len`` tokens."""
    corpus = np.asarray(corpus, dtype=np.int64)
    slots = len(corpus) // seq_len if seq_len > 0 else 0
    if n_seqs < 1 or seq_len < 2 or slots < n_seqs:
        raise SizeError(f"corpus of {len(corpus)} tokens cannot supply {n_seqs} x {seq_len} disjoint windows")
    rng = np.random.default_rng(seed)
    pick = rng.choice(slots, size=n_seqs, replace=False)
    seqs = np.stack([corpus[s * seq_len:(s + 1) * seq_len] for s in pick])
    return CalibrationSet(seqs, seed)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

class Trace:
    """Nodes of one recorded forward pass."""

    def __init__(self, tape, loss, weights, site_io):
        self.tape = tape
        self.loss = loss
        self.weights = weights      # param name -> leaf node
        self.site_io = site_io      # site name -> (input node, output node)

    def grads(self, names=None) -> dict[str, np.ndarray]:
        if names is None:
            names = list(self.weights)
        return grad(self.tape, self.loss, names)


def _layer(tp, p, spec, layer, x, n_seq, t_len, site_io):
    def lin(inp, kind):
        name = site_name(layer, kind)
        out = tp.matmul(inp, tp.transpose(p[name]))
        site_io[name] = (inp, out)
        return out

    h = tp.mul(tp.rms_norm(x), p[f"layer{layer}.norm1"])
    nh, dh, d = spec.n_heads, spec.d_head, spec.d_model

    def heads(z):
        return tp.transpose(tp.reshape(z, (n_seq, t_len, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads(lin(h, "q")), heads(lin(h, "k")), heads(lin(h, "v"))
    scores = tp.scale(tp.matmul(q, tp.transpose(k)), 1.0 / math.sqrt(dh))
    att = tp.softmax(tp.causal_mask(scores))
    ctx = tp.reshape(tp.transpose(tp.matmul(att, v), (0, 2, 1, 3)), (n_seq * t_len, d))
    x = tp.add(x, lin(ctx, "o"))
    h2 = tp.mul(tp.rms_norm(x), p[f"layer{layer}.norm2"])
    act = tp.mul(tp.silu(lin(h2, "gate")), lin(h2, "up"))
    return tp.add(x, lin(act, "down"))


def check_batch(spec: ModelSpec, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise InputError("batch must be (n_seqs, length) with length >= 2")
    if tokens.shape[1] > spec.seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds seq_len={spec.seq_len}")
    if tokens.min() < 0 or tokens.max() >= spec.vocab:
        raise InputError("token id outside [0, vocab)")
    return tokens


def run_forward(spec: ModelSpec, params: dict, tokens, record: bool = False,
                start_layer: int = 0, x_start=None, layer_inputs: list | None = None):
    """Shared forward pass. Returns ``(loss_node, tape, leaves, site_io)``.

    ``x_start`` (the residual stream entering ``start_layer``) lets callers
    resume from cached activations. When ``layer_inputs`` is a list it is
    filled with the residual stream entering every layer from
    ``start_layer`` on, plus the final stream.
    """
    tokens = check_batch(spec, tokens)
    n_seq, length = tokens.shape
    t_len = length - 1
    tp = Tape(record=record)
    leaves = {}

    def leaf(name):
        if name not in leaves:
            leaves[name] = tp.param(name, params[name])
        return leaves[name]

    site_io = {}
    if start_layer == 0 or x_start is None:
        start_layer = 0
        x = tp.reshape(tp.embedding(leaf("embed"), tokens[:, :-1]), (n_seq * t_len, spec.d_model))
    else:
        x = tp.const(x_start)
    for layer in range(start_layer, spec.n_layers):
        if layer_inputs is not None:
            layer_inputs.append(x.value)
        names = [site_name(layer, k) for k in PROJECTIONS] + [f"layer{layer}.norm1", f"layer{layer}.norm2"]
        p = {n: leaf(n) for n in names}
        x = _layer(tp, p, spec, layer, x, n_seq, t_len, site_io)
    if layer_inputs is not None:
        layer_inputs.append(x.value)
    h = tp.mul(tp.rms_norm(x), leaf("norm_f"))
    logits = tp.matmul(h, tp.transpose(leaf("head")))
    loss = tp.cross_entropy(logits, tokens[:, 1:].reshape(-1))
    return loss, tp, leaves, site_io


def forward_loss(model: ModelBundle, batch, weights: dict | None = None, tape: bool = False):
    """Mean next-token cross-entropy on ``batch``.

    ``weights`` overrides entries of ``model.params`` (e.g. dequantized
    linears). With ``tape=True`` a :class:`Trace` is returned instead of a
    float, from which gradients for every parameter can be taken.
    """
    params = model.params if weights is None else {**model.params, **weights}
    loss, tp, leaves, site_io = run_forward(model.spec, params, batch, record=tape)
    if tape:
        return Trace(tp, loss, leaves, site_io)
    return float(loss.value)


def batched_loss(model: ModelBundle, sequences, weights=None, chunk: int = 16) -> float:
    """Token-weighted mean loss over many sequences, evaluated in chunks."""
    sequences = np.asarray(sequences)
    total, count = 0.0, 0
    for start in range(0, len(sequences), chunk):
        part = sequences[start:start + chunk]
        n = part.shape[0] * (part.shape[1] - 1)
        total += forward_loss(model, part, weights) * n
        count += n
    return total / count


def loss_and_grads(model: ModelBundle, sequences, weights=None, names=None, chunk: int = 16):
    """Mean loss and its gradients over ``sequences`` (chunked, equal-length)."""
    sequences = np.asarray(sequences)
    if names is None:
        names = list(model.params)
    total, count = 0.0, 0
    acc = {n: np.zeros_like(model.params[n]) for n in names}
    for start in range(0, len(sequences), chunk):
        part = sequences[start:start + chunk]
        n = part.shape[0] * (part.shape[1] - 1)
        tr = forward_loss(model, part, weights, tape=True)
        g = tr.grads(names)
        total += float(tr.loss.value) * n
        count += n
        for k in names:
            acc[k] += g[k] * n
    return total / count, {k: v / count for k, v in acc.items()}


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def pretrain(model: ModelBundle, corpus, steps: int = 2000, lr: float = 1.0,
             batch_size: int = 4, seed: int = 0, log_every: int = 0, history: list | None = None) -> ModelBundle:
    """Plain SGD on random corpus windows drawn from a seeded schedule."""
    if steps < 0:
        raise TrainingError("steps must be >= 0")
    out = model.copy()
    if steps == 0:
        return out
    corpus = np.asarray(corpus, dtype=np.int64)
    seq = model.spec.seq_len
    if len(corpus) < seq + 1:
        raise SizeError("corpus shorter than one training window")
    rng = np.random.default_rng(seed)
    names = list(out.params)
    for step in range(steps):
        starts = rng.integers(0, len(corpus) - seq + 1, size=batch_size)
        batch = np.stack([corpus[s:s + seq] for s in starts])
        tr = forward_loss(out, batch, tape=True)
        loss = float(tr.loss.value)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        g = tr.grads(names)
        for n in names:
            out.params[n] = out.params[n] - lr * g[n]
        if history is not None:
            history.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d} loss {loss:.4f}")
    return out


# ---------------------------------------------------------------------------
# channel coupling
# ---------------------------------------------------------------------------

def coupling_graph(model: ModelBundle) -> list[CouplingGroup]:
    """Axis slices that must share a permutation to keep the function intact.

    Group order: the residual group, then per layer its MLP group followed
    by its head groups.
    """
    spec = model.spec
    d, f, dh = spec.d_model, spec.d_ff, spec.d_head
    res = [CouplingMember("embed", "cols", 0, d), CouplingMember("head", "cols", 0, d),
           CouplingMember("norm_f", "cols", 0, d)]
    for layer in range(spec.n_layers):
        res.append(CouplingMember(f"layer{layer}.norm1", "cols", 0, d))
        res.append(CouplingMember(f"layer{layer}.norm2", "cols", 0, d))
        for kind in ("q", "k", "v", "up", "gate"):
            res.append(CouplingMember(site_name(layer, kind), "cols", 0, d))
        for kind in ("o", "down"):
            res.append(CouplingMember(site_name(layer, kind), "rows", 0, d))
    groups = [CouplingGroup("residual", tuple(res))]
    for layer in range(spec.n_layers):
        groups.append(CouplingGroup("mlp-local", (
            CouplingMember(site_name(layer, "up"), "rows", 0, f),
            CouplingMember(site_name(layer, "gate"), "rows", 0, f),
            CouplingMember(site_name(layer, "down"), "cols", 0, f),
        ), layer=layer))
        for head in range(spec.n_heads):
            lo, hi = head * dh, (head + 1) * dh
            groups.append(CouplingGroup("head-local", (
                CouplingMember(site_name(layer, "v"), "rows", lo, hi),
                CouplingMember(site_name(layer, "o"), "cols", lo, hi),
            ), layer=layer, head=head))
    return groups


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(model: ModelBundle, path) -> None:
    """Little-endian container: magic, version, spec JSON, named float64 tensors."""
    spec_blob = json.dumps(asdict(model.spec), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(spec_blob)), spec_blob,
             struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelBundle:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated checkpoint", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file", offset=0)
    version, spec_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    spec = ModelSpec(**json.loads(take(spec_len)))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    return ModelBundle(spec, params, linear_sites(spec))
