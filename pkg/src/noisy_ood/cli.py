"""Command line entry point: ``noisy-ood <run|gen-data|eval|noise-demo> ...``.

Exit codes: 0 success, 2 usage or config error, 3 run failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .data import dump_dataset, load_manifest, preprocess
from .features import load_bank
from .metrics import DEFAULT_THRESHOLD, METRIC_NAMES, evaluate
from .noise import NoiseKind, NoisePolicy, apply_gaussian, apply_poisson, apply_salt_pepper, apply_speckle, make_rng
from .pgm import PGMError, read_pgm, write_pgm
from .trainer import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds must name at least one seed")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisy-ood", description="Noise-augmentation OOD-gap experiments on synthetic images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", type=Path, help="JSON experiment config (defaults are used for omitted keys)")
        sp.add_argument("--seeds", type=_seed_list, help="comma-separated seeds overriding the config, e.g. 73,7")
        sp.add_argument("--out", type=Path, help=out_help)

    run = sub.add_parser("run", help="run the full experiment grid and write reports")
    common(run, "output directory (overrides output_dir)")
    run.add_argument("--condition", choices=runner.CONDITIONS, action="append", help="restrict to a condition (repeatable)")
    run.add_argument("--format", choices=("csv", "markdown"), default="markdown", help="report echoed to stdout")

    gen = sub.add_parser("gen-data", help="write the synthetic splits of one seed as PGM files plus manifests")
    common(gen, "dataset directory")

    ev = sub.add_parser("eval", help="metrics of a saved head on a manifest")
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--checkpoint", type=Path, required=True, help="head.bin from a run directory")
    ev.add_argument("--bank", type=Path, required=True, help="bank.bin from a run directory")
    ev.add_argument("--config", type=Path, help="config supplying preprocess_size and threshold")
    ev.add_argument("--threshold", type=float, help="decision threshold (default 0.5)")
    ev.add_argument("--format", choices=("csv", "markdown"), default="csv")

    nd = sub.add_parser("noise-demo", help="apply one noise operator to a PGM image")
    nd.add_argument("--kind", choices=[k.value for k in NoiseKind], required=True)
    nd.add_argument("--in", dest="src", type=Path, required=True)
    nd.add_argument("--out", type=Path, required=True)
    nd.add_argument("--seed", type=int, default=0)
    defaults = NoisePolicy()
    nd.add_argument("--mean", type=float, default=defaults.gaussian_mean, help="gaussian mean")
    nd.add_argument("--variance", type=float, help="gaussian or speckle variance")
    nd.add_argument("--density", type=float, default=defaults.sp_density, help="salt-and-pepper density")
    nd.add_argument("--salt-ratio", type=float, default=defaults.sp_salt_ratio)
    nd.add_argument("--scale", type=float, default=defaults.poisson_scale, help="poisson photon scale")
    return p


def _config(args) -> dict:
    cfg = runner.load_config(args.config) if getattr(args, "config", None) else runner.resolve_config({})
    if getattr(args, "seeds", None):
        if len(set(args.seeds)) != len(args.seeds):
            raise runner.ConfigError("--seeds: seeds must be distinct")
        cfg["seeds"] = args.seeds
    if getattr(args, "condition", None):
        cfg["conditions"] = list(dict.fromkeys(args.condition))
    if args.command == "run" and args.out is not None:
        cfg["output_dir"] = str(args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    try:
        report = runner.run_experiment(cfg)
    except runner.RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    rows = runner.report_rows(report)
    text = runner.render_csv(rows) if args.format == "csv" else runner.render_markdown(rows)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = cfg["seeds"][0]
    out = args.out if args.out is not None else Path(cfg["output_dir"]) / "data" / str(seed)
    paths = dump_dataset(runner.build_data(cfg, seed), out)
    for split, path in paths.items():
        print(f"{split}\t{path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = runner.load_config(args.config) if args.config else runner.resolve_config({})
    threshold = args.threshold if args.threshold is not None else cfg.get("threshold", DEFAULT_THRESHOLD)
    try:
        bank = load_bank(args.bank)
        head, _ = load_checkpoint(args.checkpoint)
        items = load_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    size = cfg["data"]["preprocess_size"]
    items = [type(it)(preprocess(it.image, size), it.label, it.source_id, it.index) for it in items]
    rec = evaluate(head, bank, items, threshold)
    if args.format == "csv":
        print(",".join(METRIC_NAMES + ("n_samples",)))
        print(",".join([repr(float(rec.value(m))) for m in METRIC_NAMES] + [str(rec.n_samples)]))
    else:
        print("| " + " | ".join(METRIC_NAMES) + " |")
        print("|" + "---|" * len(METRIC_NAMES))
        print("| " + " | ".join(f"{rec.value(m):.2f}" for m in METRIC_NAMES) + " |")
    return EXIT_OK


def cmd_noise_demo(args) -> int:
    try:
        img = read_pgm(args.src)
    except (OSError, PGMError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    rng = make_rng(args.seed)
    defaults = NoisePolicy()
    kind = NoiseKind(args.kind)
    try:
        if kind is NoiseKind.GAUSSIAN:
            var = defaults.gaussian_variance if args.variance is None else args.variance
            out = apply_gaussian(img, args.mean, var, rng)
        elif kind is NoiseKind.SPECKLE:
            var = defaults.speckle_variance if args.variance is None else args.variance
            out = apply_speckle(img, var, rng)
        elif kind is NoiseKind.SALT_PEPPER:
            out = apply_salt_pepper(img, args.density, args.salt_ratio, rng)
        else:
            out = apply_poisson(img, args.scale, rng)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(args.out, out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "gen-data": cmd_gen_data, "eval": cmd_eval, "noise-demo": cmd_noise_demo}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage text on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except runner.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
