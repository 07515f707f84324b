"""``sparsedecode`` command line: sweep, verify, collapse, model.

Exit codes: 0 success, 2 usage error, 3 correctness failure, 4 resource cap.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

from . import kernels
from .bench import DEFAULT_SPARSITY, FORMATS, BenchConfig, emit_table, run_collapse, run_sweep, speedup_markdown
from .errors import AllocationError, CorrectnessError, ResourceCapError
from .selectors import CLI_NAMES, SelectorSpec
from .traffic import WorkloadGeometry, break_even_sparsity, fit_calibration, model_sweep

EXIT_OK, EXIT_USAGE, EXIT_CORRECTNESS, EXIT_RESOURCE = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}")
    return [int(v) if v.is_integer() else v for v in vals]


def _add_geometry(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("geometry")
    g.add_argument("--batch", type=_int_list, help="comma list of batch sizes")
    g.add_argument("--context", type=int, help="tokens per sequence (N)")
    g.add_argument("--q-heads", type=int)
    g.add_argument("--kv-heads", type=int)
    g.add_argument("--head-dim", type=int)
    g.add_argument("--page-size", type=int)
    g.add_argument("--dtype", choices=("f16", "f32"))


def _add_selector(p: argparse.ArgumentParser, default: str | None = "oracle") -> None:
    g = p.add_argument_group("selector")
    g.add_argument("--selector", choices=sorted(CLI_NAMES), default=None,
                   help=f"index selection mechanism (default: {default or 'none'})")
    g.add_argument("--sparsity", type=_float_list, help="comma list of sparsity factors S")
    g.add_argument("--sink", type=int)
    g.add_argument("--local", type=int)
    g.add_argument("--heavy-frac", type=float)
    g.add_argument("--channels", type=int)
    g.add_argument("--det-frac", type=float)
    g.add_argument("--samples", type=int)


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="write output here instead of stdout")
    p.add_argument("--format", choices=FORMATS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsedecode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sw = sub.add_parser("sweep", help="time dense vs sparse decode over sparsity levels")
    sw.add_argument("--config", help="JSON file mirroring BenchConfig; flags override it")
    _add_geometry(sw)
    _add_selector(sw)
    sw.add_argument("--repeats", type=int)
    sw.add_argument("--warmup", type=int)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--mem-cap-gib", type=float, help="refuse workloads with a larger KV cache")
    _add_output(sw)

    ve = sub.add_parser("verify", help="run the property checks on a geometry")
    ve.add_argument("--config")
    _add_geometry(ve)
    ve.add_argument("--seed", type=int)
    ve.add_argument("--mem-cap-gib", type=float)

    co = sub.add_parser("collapse", help="build and check a collapse witness for random V")
    co.add_argument("--n", type=int, default=64, help="number of tokens N")
    co.add_argument("--d", type=int, default=16, help="value width d")
    co.add_argument("--beta", type=float, default=0.5)
    co.add_argument("--seed", type=int, default=0)
    co.add_argument("--out")

    mo = sub.add_parser("model", help="traffic-model sweep, no execution")
    _add_geometry(mo)
    _add_selector(mo, default=None)
    mo.add_argument("--dedup", action="store_true", help="dedup gathers within a GQA group")
    _add_output(mo)
    return parser


def _selector_from_args(args, base: dict | None) -> dict | None:
    given = {
        "sink": args.sink, "local": args.local, "heavy_fraction": args.heavy_frac,
        "channels": args.channels, "deterministic_fraction": args.det_frac, "sample_count": args.samples,
    }
    given = {k: v for k, v in given.items() if v is not None}
    if args.selector is None and not given:
        return base
    kind = CLI_NAMES[args.selector] if args.selector else (base or {}).get("kind", "oracle_topk")
    sel = {"kind": kind}
    if base and base.get("kind") == kind:
        sel.update({k: v for k, v in base.items() if k not in ("sparsity", "top_k")})
    sel.update(given)
    if kind == "stochastic":
        sel.setdefault("rng_seed", getattr(args, "seed", None) or 0)
    if "heavy_fraction" not in sel:
        sel["sparsity"] = 1
    return sel


def _bench_config(args) -> BenchConfig:
    data = BenchConfig().to_dict()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            data.update(json.load(fh))
    flags = {
        "batch_sizes": args.batch, "context": args.context, "num_q_heads": args.q_heads,
        "num_kv_heads": args.kv_heads, "head_dim": args.head_dim, "page_size": args.page_size,
        "repeats": getattr(args, "repeats", None), "warmup": getattr(args, "warmup", None),
        "seed": getattr(args, "seed", None), "output": getattr(args, "out", None),
        "format": getattr(args, "format", None),
        "sparsity_levels": getattr(args, "sparsity", None),
    }
    if args.dtype:
        flags["element_width"] = 2 if args.dtype == "f16" else 4
    if getattr(args, "mem_cap_gib", None) is not None:
        flags["mem_cap_bytes"] = int(args.mem_cap_gib * 2**30)
    data.update({k: v for k, v in flags.items() if v is not None})
    if hasattr(args, "selector"):
        data["selector"] = _selector_from_args(args, data.get("selector"))
    return BenchConfig.from_dict(data)


def _write(text: str, path: str | None) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_sweep(args) -> int:
    config = _bench_config(args)
    print(f"# backend={kernels.BACKEND} N={config.context} B={list(config.batch_sizes)} "
          f"selector={config.selector.kind}", file=sys.stderr)
    records = run_sweep(config, log=lambda m: print(m, file=sys.stderr))
    _write(emit_table(records, config.format), config.output)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verify

    data_args = args
    if args.context is None and not args.config:
        data_args.context = 1024
    if args.batch is None and not args.config:
        data_args.batch = [2]
    config = _bench_config(data_args)
    results = run_verify(config)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CORRECTNESS


def cmd_collapse(args) -> int:
    report = run_collapse(args.n, args.d, args.beta, args.seed)
    _write(json.dumps(report, indent=2) + "\n", args.out)
    if report.get("witness") and not report.get("passed"):
        return EXIT_CORRECTNESS
    return EXIT_OK


def cmd_model(args) -> int:
    geom = WorkloadGeometry(
        1, args.context or 131072, args.q_heads or 32, args.kv_heads or 8, args.head_dim or 128,
        4 if args.dtype == "f32" else 2, args.page_size or 16,
    )
    batches = args.batch or [1, 4, 8, 16]
    levels = args.sparsity or list(DEFAULT_SPARSITY)
    sel = _selector_from_args(args, None)
    spec = SelectorSpec.from_dict(sel) if sel else None
    cal = fit_calibration()
    rows = model_sweep(geom, batches, levels, spec, cal, dedup=args.dedup)
    fmt = args.format or "markdown"
    if fmt == "csv":
        import csv
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        table: dict[int, tuple[float, dict]] = {}
        for r in rows:
            table.setdefault(r["B"], (r["dense_ms_calibrated"], {}))[1][r["S"]] = r["predicted_speedup"]
        text = speedup_markdown([(b, base, c) for b, (base, c) in table.items()], levels,
                                baseline_label="dense (ms, calibrated)")
        s_star = break_even_sparsity(geom.with_batch(max(batches)), spec, cal, dedup=args.dedup)
        text += (f"\ncalibration: {cal.bandwidth_gbps:.0f} GB/s effective, overhead {cal.overhead_ms:.4f} ms; "
                 f"break-even S* at B={max(batches)}: {'unbounded' if math.isinf(s_star) else f'{s_star:.2f}'}\n")
        if spec is not None and spec.kind != "double_sparsity":
            text += "note: score-pass indexer is a measurement instrument, not deployable\n"
    _write(text, args.out)
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "verify": cmd_verify, "collapse": cmd_collapse, "model": cmd_model}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CorrectnessError, FloatingPointError) as e:
        print(f"correctness failure: {e}", file=sys.stderr)
        return EXIT_CORRECTNESS
    except (ResourceCapError, AllocationError) as e:
        print(f"resource cap exceeded: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
