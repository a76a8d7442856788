"""End-to-end runs: pretrain, warm start, reorder, search, pack, report."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import allocator, layout, quantizer, sensitivity
from .config import RunConfig
from .errors import ReportError, StageError
from .toymodel import (ModelBundle, build_model, batched_loss, coupling_graph, load_byte_corpus,
                       load_checkpoint, loss_and_grads, make_calibration, make_corpus, pretrain,
                       run_forward, save_checkpoint)


class SearchProblem:
    """Adapter giving the search loop losses and block scores for one model."""

    def __init__(self, model: ModelBundle, partition, qconfig, calib, chunk: int = 16):
        self.model = model
        self.partition = partition
        self.qconfig = qconfig
        self.calib = np.asarray(calib)
        self.chunk = chunk
        self.cache = quantizer.QuantCache(model, partition, qconfig)
        self.names = [s.name for s in partition.sites]

    @property
    def n_blocks(self):
        return self.partition.n_blocks

    @property
    def sizes(self):
        return self.partition.sizes

    @property
    def n_calib(self):
        return len(self.calib)

    def weights(self, b):
        return self.cache.weights(b)

    def loss(self, b, batch_idx=None) -> float:
        seqs = self.calib if batch_idx is None else self.calib[batch_idx]
        return batched_loss(self.model, seqs, self.weights(b), chunk=self.chunk)

    def grads(self, b, batch_idx=None):
        seqs = self.calib if batch_idx is None else self.calib[batch_idx]
        _, g = loss_and_grads(self.model, seqs, self.weights(b), self.names, chunk=self.chunk)
        return g

    def scores(self, b, grads, signed=True):
        return sensitivity.block_updown(self.partition, grads, self.model.params, self.weights(b), b,
                                        self.qconfig.bit_min, self.qconfig.bit_max, signed)


class LayerCachedValue:
    """Negated calibration loss for single-block moves from a base assignment.

    ``rebase(b)`` stores the residual stream entering each layer under
    ``b``; evaluating an assignment that differs only in layers ``>= l``
    then resumes the forward pass at layer ``l``. Results equal a full
    forward pass bit for bit.
    """

    def __init__(self, problem: SearchProblem):
        self.problem = problem
        self.base = None
        self.inputs = None
        self.weights = None
        self.evals = 0

    def rebase(self, b):
        self.base = np.array(b)
        self.weights = self.problem.weights(self.base)
        self.inputs = []
        for start in range(0, self.problem.n_calib, self.problem.chunk):
            part = self.problem.calib[start:start + self.problem.chunk]
            acts = []
            run_forward(self.problem.model.spec, {**self.problem.model.params, **self.weights}, part,
                        layer_inputs=acts)
            self.inputs.append(acts)

    def __call__(self, b) -> float:
        self.evals += 1
        b = np.asarray(b)
        if self.base is None:
            return -self.problem.loss(b)
        changed = np.flatnonzero(b != self.base)
        if changed.size == 0:
            return -self.problem.loss(b)
        part_ = self.problem.partition
        sites = sorted({int(part_.site_of[i]) for i in changed})
        layer = int(part_.layer_of[changed].min())
        weights = dict(self.weights)
        weights.update(self.problem.cache.weights(b, sites))
        params = {**self.problem.model.params, **weights}
        total, count = 0.0, 0
        for j, start in enumerate(range(0, self.problem.n_calib, self.problem.chunk)):
            part = self.problem.calib[start:start + self.problem.chunk]
            x0 = self.inputs[j][layer] if layer > 0 else None
            loss, *_ = run_forward(self.problem.model.spec, params, part, start_layer=layer, x_start=x0)
            n = part.shape[0] * (part.shape[1] - 1)
            total += float(loss.value) * n
            count += n
        return -(total / count)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def prepare_model(cfg: RunConfig, out_dir: Path | None = None) -> ModelBundle:
    """Load ``cfg.checkpoint`` if given, else build and pretrain (saving the result)."""
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    spec = cfg.model_spec()
    spec.validate(cfg.group_size)
    model = build_model(spec)
    corpus = corpus_for(cfg)
    model = pretrain(model, corpus, steps=cfg.pretrain_steps, lr=cfg.lr, batch_size=cfg.train_batch,
                     seed=cfg.train_seed)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.ckpt")
    return model


def corpus_for(cfg: RunConfig) -> np.ndarray:
    if cfg.corpus_path:
        return load_byte_corpus(cfg.corpus_path)
    return make_corpus(cfg.vocab, cfg.corpus_len, cfg.corpus_seed)


def calibration_for(cfg: RunConfig):
    return make_calibration(corpus_for(cfg), cfg.calib_seqs, cfg.calib_len, cfg.calib_seed)


def reorder_model(model: ModelBundle, partition, qconfig, calib, bits: int):
    """Sensitivity-driven permutations computed at the uniform ``bits`` model."""
    b = np.full(partition.n_blocks, bits, dtype=np.int64)
    wq = quantizer.quantize_model(model, partition, b, qconfig)
    names = [s.name for s in partition.sites]
    sens = sensitivity.element_sensitivity(model, {n: wq[n] for n in names}, calib, names)
    groups = coupling_graph(model)
    perms = layout.compute_permutations(model, sens, groups)
    return layout.apply_permutations(model, perms, groups), perms, sens


def layer_bits(partition, b) -> dict[int, float]:
    b = np.asarray(b)
    out = {}
    for layer in sorted(set(partition.layer_of.tolist())):
        ids = partition.layer_of == layer
        out[layer] = float((b[ids] * partition.sizes[ids]).sum() / partition.sizes[ids].sum())
    return out


def projection_bits(partition, b) -> dict[str, float]:
    b = np.asarray(b)
    kinds = np.array([partition.sites[s].kind for s in partition.site_of])
    out = {}
    for kind in dict.fromkeys(s.kind for s in partition.sites):
        ids = kinds == kind
        out[kind] = float((b[ids] * partition.sizes[ids]).sum() / partition.sizes[ids].sum())
    return out


def layer_sensitivity(problem: SearchProblem, b) -> list[float]:
    wq = problem.weights(b)
    g = problem.grads(b)
    delta = sensitivity.deltas(problem.model, wq, problem.names)
    return [float(v) for v in sensitivity.layer_estimates(problem.partition, g, delta)]


def pack_model(model: ModelBundle, partition, b, qconfig) -> list:
    tensors = []
    for i, site in enumerate(partition.sites):
        grid = partition.bit_grid(i, b)
        tensors.append(quantizer.pack_site(site.name, model.params[site.name], grid,
                                           partition.block_rows, partition.block_cols, qconfig))
    return tensors


def packed_weights(tensors) -> dict[str, np.ndarray]:
    return {pt.name: quantizer.dequantize_packed(pt) for pt in tensors}


def write_assignment_csv(path, partition, b) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "row_block", "col_block", "bits"])
        for i in range(partition.n_blocks):
            s, rb, cb = partition.locate(i)
            w.writerow([partition.sites[s].name, rb, cb, int(b[i])])


def read_assignment_csv(path, partition) -> np.ndarray:
    index = {s.name: i for i, s in enumerate(partition.sites)}
    b = np.zeros(partition.n_blocks, dtype=np.int64)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            b[partition.block_id(index[row["site"]], int(row["row_block"]), int(row["col_block"]))] = int(row["bits"])
    return b


def run_pipeline(cfg: RunConfig, model: ModelBundle | None = None, write: bool = True) -> dict:
    """Full stage sequence for one budget. Returns the report dictionary."""
    cfg.validate()
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    qcfg = cfg.quant_config()
    if model is None:
        model = _stage("pretrain", prepare_model, cfg, out if write else None)
    elif write:
        save_checkpoint(model, out / "model.ckpt")
    calib = _stage("calibrate", calibration_for, cfg).sequences
    partition = _stage("partition", layout.partition_weights, model, cfg.block_rows, cfg.block_cols,
                       cfg.group_size)
    warm = allocator.warm_start(partition.n_blocks, cfg.budget, cfg.bit_min, cfg.bit_max)
    perms = layout.identity_permutations(coupling_graph(model))
    if cfg.reorder:
        model, perms, _ = _stage("reorder", reorder_model, model, partition, qcfg, calib, int(warm[0]))
    problem = _stage("quantize", SearchProblem, model, partition, qcfg, calib)
    loss_fp = batched_loss(model, calib)
    loss_uniform = problem.loss(warm)
    sens_before = _stage("sensitivity", layer_sensitivity, problem, warm)
    b, trace = _stage("search", allocator.scalable_greedy, problem, cfg.budget, cfg.search_config())
    tensors = _stage("pack", pack_model, model, partition, b, qcfg)
    loss_final = _stage("evaluate", batched_loss, model, calib, packed_weights(tensors))
    sens_after = layer_sensitivity(problem, b)
    wbits, tbits = quantizer.effective_bits(b, partition, qcfg)
    accepted = [r for r in trace.records if r.accepted]
    report = {
        "config": cfg.to_dict(),
        "n_blocks": partition.n_blocks,
        "effective_bits": {"weight": wbits, "total": tbits},
        "loss": {"full_precision": loss_fp, "uniform_warm_start": loss_uniform, "final": loss_final},
        "layer_bits": {str(k): v for k, v in layer_bits(partition, b).items()},
        "projection_bits": projection_bits(partition, b),
        "layer_sensitivity": {"before": sens_before, "after": sens_after},
        "trace": {"iterations": len(trace.records), "accepted": len(accepted),
                  "expand_steps": sum(r.phase == "expand" for r in trace.records),
                  "balanced_steps": sum(r.phase == "balanced" for r in trace.records),
                  "final_k": trace.records[-1].k if trace.records else 0,
                  "saturated": bool(trace.saturated)},
    }
    if write:
        layout.save_permutations(perms, out / "permutations.json")
        save_checkpoint(model, out / "reordered.ckpt")
        quantizer.write_packed(tensors, out / "weights.sbit")
        (out / "trace.jsonl").write_text(trace.to_jsonl())
        write_assignment_csv(out / "assignment.csv", partition, b)
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        emit_report(out)
    report["assignment"] = b
    return report


def run_sweep(cfg: RunConfig, model: ModelBundle | None = None, write: bool = True) -> list[dict]:
    """One pipeline run per budget in ``cfg.sweep`` sharing the pretrained model."""
    base = Path(cfg.out_dir)
    if model is None:
        if write:
            base.mkdir(parents=True, exist_ok=True)
        model = _stage("pretrain", prepare_model, cfg, base if write else None)
    rows = []
    for B in cfg.sweep:
        sub = RunConfig(**{**cfg.to_dict(), "budget": B, "out_dir": str(base / f"B{B:g}")})
        rep = run_pipeline(sub, model, write)
        rows.append({"budget": B, "loss": rep["loss"]["final"], "uniform_loss": rep["loss"]["uniform_warm_start"],
                     "weight_bits": rep["effective_bits"]["weight"], "total_bits": rep["effective_bits"]["total"]})
    if write:
        with open(base / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def emit_report(out_dir) -> dict:
    """Regenerate the tabular CSVs from the stored run artifacts."""
    out = Path(out_dir)
    for name in ("report.json", "assignment.csv", "reordered.ckpt", "weights.sbit"):
        if not (out / name).exists():
            raise ReportError(f"missing artifact {name} in {out}")
    report = json.loads((out / "report.json").read_text())
    cfg = RunConfig(**report["config"])
    model = load_checkpoint(out / "reordered.ckpt")
    partition = layout.partition_weights(model, cfg.block_rows, cfg.block_cols, cfg.group_size)
    b = read_assignment_csv(out / "assignment.csv", partition)
    with open(out / "bits_per_layer.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "avg_bits"])
        for k, v in layer_bits(partition, b).items():
            w.writerow([k, repr(v)])
    with open(out / "bits_per_projection.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["projection", "avg_bits"])
        for k, v in projection_bits(partition, b).items():
            w.writerow([k, repr(v)])
    with open(out / "layer_sensitivity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "before", "after"])
        before, after = report["layer_sensitivity"]["before"], report["layer_sensitivity"]["after"]
        for k, (x, y) in enumerate(zip(before, after)):
            w.writerow([k, repr(x), repr(y)])
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    for i, site in enumerate(partition.sites):
        emit_heatmap(partition.bit_grid(i, b), heat / f"{site.name}.bits.pgm", "bits", (cfg.bit_min, cfg.bit_max))
    return report


def packed_loss(out_dir) -> float:
    """Calibration loss recomputed from the packed weight file alone."""
    out = Path(out_dir)
    report = json.loads((out / "report.json").read_text())
    cfg = RunConfig(**report["config"])
    model = load_checkpoint(out / "reordered.ckpt")
    tensors = quantizer.read_packed(out / "weights.sbit")
    return batched_loss(model, calibration_for(cfg).sequences, packed_weights(tensors))


def emit_heatmap(mat, path, mode: str = "sensitivity", bit_range=(0, 8)) -> np.ndarray:
    """Write an 8-bit binary PGM plus a CSV of the raw values; returns the pixels.

    ``sensitivity`` mode normalizes each row by its maximum; ``bits`` mode
    maps ``bit_range`` linearly onto 0..255.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ValueError("heatmap needs a nonempty matrix")
    if mode == "sensitivity":
        a = np.abs(mat)
        peak = a.max(axis=1, keepdims=True)
        norm = np.divide(a, peak, out=np.zeros_like(a), where=peak > 0)
    elif mode == "bits":
        lo, hi = bit_range
        norm = np.clip((mat - lo) / (hi - lo), 0.0, 1.0)
    else:
        raise ValueError(f"unknown heatmap mode {mode!r}")
    pix = np.floor(norm * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode()
    path.write_bytes(header + pix.tobytes())
    np.savetxt(path.with_suffix(".csv"), mat, delimiter=",", fmt="%.17g")
    return pix


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
