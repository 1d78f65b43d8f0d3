"""Command line entry point: ``encoderlock <subcommand>``.

Exit codes: 0 success, 2 configuration/validation failure, 3 runtime failure
(details in the run directory's failures.jsonl).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, bundled_config
from .runner import Runner, StageError, load_encoder, report_from_dir

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

LOCK_COMMANDS = {"lock-supervised": "supervised", "lock-unsupervised": "unsupervised", "lock-zeroshot": "zeroshot"}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="experiment config (JSON); 'toy' selects the bundled toy config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    common.add_argument("--device", help="compute device (cpu)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="encoderlock", description="Lock pre-trained encoders against prohibited domains.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline for the config's variant")
    for name, variant in LOCK_COMMANDS.items():
        sub.add_parser(name, parents=[common], help=f"pipeline with the {variant} lock")
    sub.add_parser("synth-dataset", parents=[common], help="zero-shot prompt/image synthesis only")
    sub.add_parser("probe", parents=[common], help="probe the encoders of an existing run and write the report")
    rep = sub.add_parser("report", parents=[common], help="regenerate report files from stored probe results")
    rep.add_argument("--epsilon", type=float)
    sub.add_parser("plot", parents=[common], help="re-render plots of an existing run")
    exp = sub.add_parser("export-embeddings", parents=[common], help="write embeddings as CSV")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--dataset", required=True, help="registry name, e.g. toy_usps")
    exp.add_argument("--split", default="test")
    exp.add_argument("--output", required=True)
    return p


def _config(args, variant: str | None = None) -> ExperimentConfig:
    path = args.config
    if path is None and args.out and (Path(args.out) / "config.json").exists():
        path = Path(args.out) / "config.json"
    if path is None:
        raise ConfigError("--config is required")
    if path in ("toy", "toy_unsupervised", "toy_zeroshot"):
        path = bundled_config(path)
    return ExperimentConfig.load(path, seed=args.seed, output_dir=args.out, variant=variant, device=args.device)


def _summary(out: Path) -> None:
    report = out / "report.json"
    if report.exists():
        rep = json.loads(report.read_text())
        print(json.dumps({"run_dir": str(out), "verdict": rep["verdict"], "relative_drop": rep["relative_drop"],
                          "ppi": rep["ppi"], "delta_w_per_mille": rep["delta_w_per_mille"]}, indent=2))
    else:
        print(json.dumps({"run_dir": str(out)}))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("device", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cmd = args.command
        if cmd == "export-embeddings":
            from .datasets import resolve
            from .embeddings import export_embeddings

            export_embeddings(load_encoder(args.checkpoint), resolve(args.dataset), args.output, args.split)
            print(args.output)
            return EXIT_OK
        if cmd in ("report", "plot"):
            out = Path(args.out or _config(args).output_dir)
            if not (out / "probe" / "probes.json").exists():
                raise ConfigError(f"{out} has no probe results")
            eps = getattr(args, "epsilon", None)
            if eps is None:
                cfg_path = out / "config.json"
                eps = json.loads(cfg_path.read_text()).get("probe", {}).get("epsilon", 0.02) if cfg_path.exists() else 0.02
            report_from_dir(out, eps, plots=True)
            _summary(out)
            return EXIT_OK
        if cmd == "synth-dataset":
            cfg = _config(args, "zeroshot")
            out = Runner(cfg).run(["pretrain", "synthetic"])
        elif cmd == "probe":
            cfg = _config(args)
            out = Runner(cfg).run(["probe", "report"])
        else:
            cfg = _config(args, LOCK_COMMANDS.get(cmd))
            out = Runner(cfg).run()
        _summary(out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc} (see failures.jsonl)", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
