"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments, serialization, theory
from .algorithms import ConfigError
from .experiments import ExperimentConfig
from .problems import SaddleSpec, build_two_piece_example, generate_saddle_instance

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_VERIFY = 2

log = logging.getLogger("monoprox")


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def cmd_generate(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    for key in ("n", "d_y", "d_z", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    try:
        spec = SaddleSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid problem spec: {exc}") from None
    ens = generate_saddle_instance(spec)
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"saddle_seed{spec.seed}.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    x_star = ens.solution()
    meta = {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "normal_sampler": "numpy Generator(PCG64).standard_normal (ziggurat)",
        "mu": theory.ensemble_modulus(ens),
        "L": theory.ensemble_lipschitz(ens),
        "delta_spectral": theory.estimate_delta_spectral(ens),
        "x_star": [float(v) for v in x_star],
    }
    digest = serialization.save(ens, out, meta)
    print(f"wrote {out}  n={ens.n} dim={ens.dim} mu={meta['mu']:.10g} L={meta['L']:.6g} sha256={digest}")
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        doc = _load_json(args.config)
        base = Path(args.config).parent
    else:
        doc = {"algorithms": [{"name": args.algorithm, "gamma": args.gamma, "p": args.p}]}
        if args.problem:
            doc["problem"] = args.problem
        base = None
    for flag, key in (("trials", "trials"), ("iters", "iterations"), ("seed", "seed"), ("target_error", "target_error"), ("out", "output_dir")):
        val = getattr(args, flag)
        if val is not None:
            doc[key] = val
    if isinstance(doc.get("problem"), str) and base is not None:
        doc["problem"] = str(base / doc["problem"]) if not Path(doc["problem"]).is_absolute() else doc["problem"]
    return ExperimentConfig.from_dict(doc)


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    summary = experiments.run_experiment(cfg, write_trials=args.write_trials)
    for key, info in summary.items():
        print(f"{key:<24} gamma={info['gamma']:.6g}  final mean sq error={info['final_mean_sq_error']:.3e}")
    print(f"outputs in {cfg.output_dir}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    summary = experiments.reproduce(
        args.figure,
        seed=args.seed or 0,
        out_dir=args.out or "out",
        iters=args.iters or 20_000,
        trials=args.trials or 5,
        target_error=args.target_error or 1e-10,
    )
    print(f"{args.figure}: seed={summary['seed']} trials={summary['trials']} iters={summary['iters']} ({summary['elapsed_s']} s)")
    for key, c in summary["curves"].items():
        hits = [h for h in c["calls_to_target"] if h is not None]
        reach = f"{sorted(hits)[len(hits) // 2]}" if hits else "not reached"
        print(f"  {key:<24} plateau={c['plateau_mean_sq_error']:.3e}  median calls to target={reach}")
    return EXIT_OK


def cmd_verify(args) -> int:
    ens = serialization.load(args.problem)[0] if args.problem else None
    checks = experiments.verify_suite(
        ens,
        seed=args.seed or 0,
        states=args.iters or 1000,
        delta_mode=args.delta_mode,
        delta_scale=args.delta_scale,
    )
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_estimate(args) -> int:
    if args.problem == "two-piece":
        ens = build_two_piece_example()
    elif args.problem:
        if not Path(args.problem).exists():
            raise ConfigError(f"problem file {args.problem} does not exist")
        ens = serialization.load(args.problem)[0]
    else:
        ens = generate_saddle_instance(SaddleSpec(seed=args.seed or 0))
    rep = experiments.estimate_report(ens, seed=args.seed or 0)
    print(experiments.format_estimate(rep))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "estimate.txt").write_text(experiments.format_estimate(rep) + "\n")
        experiments.write_estimate(rep, out / "estimate.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="monoprox", description="Stochastic proximal-point experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *, out_default=None):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=out_default)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--target-error", type=float, default=None)

    g = sub.add_parser("generate", help="write a seeded saddle-point instance")
    common(g, out_default="out")
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--d-y", dest="d_y", type=int, default=None)
    g.add_argument("--d-z", dest="d_z", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run algorithms over trials and write CSV traces")
    common(r)
    r.add_argument("--problem", default=None, help="serialized ensemble (default: generated instance)")
    r.add_argument("--algorithm", default="sppm")
    r.add_argument("--gamma", default="auto", type=lambda s: s if s == "auto" else float(s))
    r.add_argument("--p", type=float, default=None)
    r.add_argument("--write-trials", action="store_true", help="also write every trial trace")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("reproduce", help="regenerate figure data")
    rp.add_argument("figure", choices=sorted(experiments.FIGURES))
    common(rp)
    rp.set_defaults(func=cmd_reproduce)

    v = sub.add_parser("verify", help="run the invariant and step-inequality suite")
    common(v)
    v.add_argument("--problem", default=None)
    v.add_argument("--delta-mode", choices=("certified", "spectral"), default="certified")
    v.add_argument("--delta-scale", type=float, default=1.0)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("estimate", help="report problem constants and stepsizes")
    common(e)
    e.add_argument("--problem", default=None, help="serialized ensemble, or 'two-piece'")
    e.set_defaults(func=cmd_estimate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
