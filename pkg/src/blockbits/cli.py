"""Command-line driver: ``python -m blockbits <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import allocator, layout, pipeline, quantizer
from .config import RunConfig, load_config
from .errors import BlockBitsError
from .toymodel import batched_loss, save_checkpoint


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return load_config(args.config, overrides)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = pipeline.prepare_model(RunConfig(**{**cfg.to_dict(), "checkpoint": None}), out)
    loss = batched_loss(model, pipeline.calibration_for(cfg).sequences)
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "calibration_loss": loss}))
    return 0


def cmd_quantize(args) -> int:
    """Uniform quantization at ``--bits`` (defaults to floor of the budget)."""
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = pipeline.prepare_model(cfg, out)
    part = layout.partition_weights(model, cfg.block_rows, cfg.block_cols, cfg.group_size)
    bits = int(args.bits) if args.bits is not None else int(cfg.budget)
    b = np.full(part.n_blocks, bits, dtype=np.int64)
    tensors = pipeline.pack_model(model, part, b, cfg.quant_config())
    size = quantizer.write_packed(tensors, out / f"uniform{bits}.sbit")
    loss = batched_loss(model, pipeline.calibration_for(cfg).sequences, pipeline.packed_weights(tensors))
    wb, tb = quantizer.effective_bits(b, part, cfg.quant_config())
    print(json.dumps({"bits": bits, "loss": loss, "bytes": size, "weight_bits": wb, "total_bits": tb}))
    return 0


def _summary(rep) -> dict:
    return {"budget": rep["config"]["budget"], "loss": rep["loss"], "effective_bits": rep["effective_bits"]}


def cmd_search(args) -> int:
    rep = pipeline.run_pipeline(_config(args))
    print(json.dumps(_summary(rep)))
    return 0


def cmd_sweep(args) -> int:
    rows = pipeline.run_sweep(_config(args))
    for r in rows:
        print(json.dumps(r))
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    rep = pipeline.emit_report(cfg.out_dir)
    rep["loss"]["from_packed"] = pipeline.packed_loss(cfg.out_dir)
    print(json.dumps(_summary(rep)))
    return 0


def cmd_probe(args) -> int:
    """Monotonicity / diminishing-returns probe with one bitwidth per decoder layer."""
    cfg = _config(args)
    model = pipeline.prepare_model(cfg, None)
    part = layout.partition_weights(model, cfg.block_rows, cfg.block_cols, cfg.group_size)
    problem = pipeline.SearchProblem(model, part, cfg.quant_config(), pipeline.calibration_for(cfg).sequences)

    def value(layer_bits):
        return -problem.loss(np.asarray(layer_bits)[part.layer_of])

    n = model.spec.n_layers
    # average precision runs from 2 to 4 bits along each chain
    rep = allocator.lattice_probe(value, n, int(args.chains), cfg.search_seed, length=9, bit_lo=2, bit_hi=2,
                                  bit_max=cfg.bit_max, step=max(1, n // 4))
    print(json.dumps({"chains": rep.chains, "monotone_violation_rate": rep.monotone_rate,
                      "dr_violation_rate": rep.dr_rate}))
    return 0


def cmd_selftest(args) -> int:
    """Quick oracle checks: greedy bound, pack round trip, gradient check."""
    from .engine import finite_diff_check
    from .toymodel import ModelSpec, build_model, forward_loss

    failures = 0
    rng = np.random.default_rng(0)
    worst = 1.0
    for _ in range(20):
        n = int(rng.integers(2, 5))
        f = allocator.random_drsub_instance(rng, n)
        B = float(rng.integers(1, 3 * n)) / n
        g = allocator.classic_greedy(f, n, B, 3)
        _, opt, _ = allocator.exhaustive_oracle(f, n, range(4), B)
        if opt > 0:
            worst = min(worst, g.values[-1] / opt)
    ok = worst >= 1 - 1 / np.e
    failures += not ok
    print(f"greedy ratio {worst:.4f} {'ok' if ok else 'FAIL'}")

    qc = quantizer.QuantConfig(group_size=16)
    bad = 0
    for _ in range(50):
        rows, bc = int(rng.integers(1, 9)), 32
        grid = rng.integers(0, 9, size=(-(-rows // 4), 2))
        w = rng.standard_normal((rows, 2 * bc))
        pt = quantizer.pack_site("t", w, grid, 4, bc, qc)
        back = quantizer.read_packed(_packed_bytes([pt]))[0]
        bad += back.payload != pt.payload
    failures += bool(bad)
    print(f"pack round trip {'ok' if not bad else 'FAIL'}")

    spec = ModelSpec(vocab=16, d_model=8, n_layers=1, n_heads=2, d_ff=16, seq_len=8, seed=1)
    m = build_model(spec)
    batch = rng.integers(0, 16, size=(2, 8))
    tr = forward_loss(m, batch, tape=True)
    err = finite_diff_check(lambda p: forward_loss(m, batch, p), m.params, tr.grads(), n_coords=16)
    ok = err <= 1e-4
    failures += not ok
    print(f"gradient check {err:.2e} {'ok' if ok else 'FAIL'}")
    return 1 if failures else 0


def _packed_bytes(tensors) -> bytes:
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.sbit"
        quantizer.write_packed(tensors, path)
        return path.read_bytes()


COMMANDS = {
    "pretrain": cmd_pretrain,
    "quantize": cmd_quantize,
    "search": cmd_search,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "probe": cmd_probe,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockbits", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        if name != "selftest":
            _add_config_flags(p)
        if name == "quantize":
            p.add_argument("--bits", default=None)
        if name == "probe":
            p.add_argument("--chains", default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except BlockBitsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
