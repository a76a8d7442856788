"""Sensitivity estimators around a quantized model.

Gradients are taken at the quantized weights ``wq``; ``delta = w - wq`` is
the change that restoring full precision would make. The first-order loss
change of restoring a component is ``g . delta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .layout import BlockPartition
from .toymodel import ModelBundle, batched_loss, forward_loss, loss_and_grads


@dataclass
class SensitivitySnapshot:
    t: int
    batch_id: int
    element: dict = field(default_factory=dict)   # site name -> S
    s_up: np.ndarray | None = None
    s_down: np.ndarray | None = None
    components: dict = field(default_factory=dict)

    def write_csv(self, path, assignment) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "bits", "s_up", "s_down"])
            for i, b in enumerate(assignment):
                w.writerow([i, int(b), repr(float(self.s_up[i])), repr(float(self.s_down[i]))])


def site_names(partition: BlockPartition) -> list[str]:
    return [s.name for s in partition.sites]


def deltas(model: ModelBundle, wq: dict, names) -> dict[str, np.ndarray]:
    return {n: model.params[n] - wq[n] for n in names}


def gradients_at(model: ModelBundle, sequences, weights: dict, names, chunk: int = 16):
    """Mean loss over ``sequences`` and its gradients for ``names`` at ``weights``."""
    return loss_and_grads(model, sequences, weights, list(names), chunk=chunk)


def first_order_sensitivity(grads, delta) -> float:
    """|sum g * delta| over one component (arrays or dicts of arrays)."""
    if isinstance(grads, dict):
        return abs(sum(float((grads[k] * delta[k]).sum()) for k in delta))
    return abs(float((np.asarray(grads) * np.asarray(delta)).sum()))


def fp_baseline_metric(grads, delta) -> float:
    """sum |g| * |delta| with gradients taken at the unquantized weights."""
    if isinstance(grads, dict):
        return sum(float((np.abs(grads[k]) * np.abs(delta[k])).sum()) for k in delta)
    return float((np.abs(grads) * np.abs(delta)).sum())


def layer_components(partition: BlockPartition) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for s in partition.sites:
        out.setdefault(s.layer, []).append(s.name)
    return out


def layer_estimates(partition: BlockPartition, grads: dict, delta: dict, metric=first_order_sensitivity) -> np.ndarray:
    comps = layer_components(partition)
    return np.array([metric({n: grads[n] for n in comps[l]}, {n: delta[n] for n in comps[l]})
                     for l in sorted(comps)])


def true_component_sensitivity(model: ModelBundle, wq: dict, restored: dict, batch, base_loss=None) -> float:
    """|L(wq with ``restored`` swapped in) - L(wq)| on ``batch``.

    ``restored`` maps site names to the replacement matrices: the
    full-precision weights, or the component re-quantized at other bits.
    """
    if base_loss is None:
        base_loss = batched_loss(model, batch, wq)
    return abs(batched_loss(model, batch, {**wq, **restored}) - base_loss)


def true_layer_sensitivities(model: ModelBundle, partition: BlockPartition, wq: dict, batch) -> np.ndarray:
    """Ground truth per decoder layer: restore that layer to full precision."""
    base = batched_loss(model, batch, wq)
    comps = layer_components(partition)
    return np.array([true_component_sensitivity(model, wq, {n: model.params[n] for n in comps[l]}, batch, base)
                     for l in sorted(comps)])


# ---------------------------------------------------------------------------
# element-wise sensitivity
# ---------------------------------------------------------------------------

def element_sensitivity(model: ModelBundle, wq: dict, batch, names=None, factorized: bool = False,
                        chunk: int = 16) -> dict[str, np.ndarray]:
    """S = |G * (W - Wq)| per site, G the batch-mean gradient at ``wq``.

    With ``factorized`` the weight gradient is rebuilt from the output
    gradients and inputs of each linear map, ``G = sum_t g_y(t) x(t)^T``,
    instead of being read off the tape.
    """
    names = list(wq) if names is None else list(names)
    if not factorized:
        _, g = loss_and_grads(model, batch, wq, names, chunk=chunk)
        return {n: np.abs(g[n] * (model.params[n] - wq[n])) for n in names}
    batch = np.asarray(batch)
    count = 0
    acc = {n: np.zeros_like(model.params[n]) for n in names}
    for start in range(0, len(batch), chunk):
        part = batch[start:start + chunk]
        tr = forward_loss(model, part, wq, tape=True)
        adj = tr.tape.backward(tr.loss)
        n_tok = part.shape[0] * (part.shape[1] - 1)
        for n in names:
            x_node, y_node = tr.site_io[n]
            gy = adj[y_node.index]
            if gy is not None:
                acc[n] += (gy.T @ x_node.value) * n_tok
        count += n_tok
    return {n: np.abs(acc[n] / count * (model.params[n] - wq[n])) for n in names}


def linear_element_sensitivity(w, wq, x, gy, factorized: bool = True) -> np.ndarray:
    """Single linear map ``y = Wq x`` with inputs ``x`` (T, d_in) and output grads ``gy`` (T, d_out)."""
    x, gy = np.asarray(x, dtype=np.float64), np.asarray(gy, dtype=np.float64)
    delta = np.abs(np.asarray(w) - np.asarray(wq))
    if factorized:
        out = np.zeros_like(delta)
        for t in range(x.shape[0]):
            out += np.outer(gy[t], x[t])
        return np.abs(out) * delta
    return np.abs(gy.T @ x) * delta


# ---------------------------------------------------------------------------
# block-level surrogates
# ---------------------------------------------------------------------------

def block_updown(partition: BlockPartition, grads: dict, w: dict, wq: dict, assignment,
                 bit_min: int, bit_max: int, signed: bool = True):
    """Per-block (s_up, s_down).

    ``s_up`` is the first-order loss decrease from moving a block toward
    full precision, ``-g . (wq - w) = g . (w - wq)`` read as a gain: larger
    means raising the block helps more. With ``signed=False`` the terms are
    aggregated as ``sum |g * (w - wq)|``. ``s_down = 2^-b * ||g * wq||_1``.
    Blocks that cannot move carry ``-inf`` / ``+inf`` sentinels.
    """
    b = np.asarray(assignment, dtype=np.int64)
    s_up = np.zeros(partition.n_blocks)
    s_down = np.zeros(partition.n_blocks)
    for i, site in enumerate(partition.sites):
        ids = partition.site_blocks(i)
        g = grads[site.name]
        d = w[site.name] - wq[site.name]
        up_terms = -g * d if signed else np.abs(g * d)
        # with g the gradient at wq, L(w) - L(wq) ~ g.(w - wq); the gain of restoring is its negation
        s_up[ids.start:ids.stop] = partition.block_reduce(i, up_terms)
        s_down[ids.start:ids.stop] = partition.block_reduce(i, np.abs(g * wq[site.name]))
    s_down *= np.exp2(-b.astype(np.float64))
    s_up[b >= bit_max] = -np.inf
    s_down[b <= bit_min] = np.inf
    return s_up, s_down


def protect_elements(model: ModelBundle, wq: dict, sens: dict, fraction: float, rng=None) -> dict:
    """Restore the top (or, given ``rng``, a random) ``fraction`` of elements to full precision."""
    names = list(sens)
    flat = np.concatenate([sens[n].ravel() for n in names])
    k = max(1, int(round(fraction * flat.size)))
    if rng is None:
        chosen = np.argsort(-flat, kind="stable")[:k]
    else:
        chosen = rng.choice(flat.size, size=k, replace=False)
    mask = np.zeros(flat.size, dtype=bool)
    mask[chosen] = True
    out = dict(wq)
    pos = 0
    for n in names:
        size = sens[n].size
        m = mask[pos:pos + size].reshape(sens[n].shape)
        out[n] = np.where(m, model.params[n], wq[n])
        pos += size
    return out
