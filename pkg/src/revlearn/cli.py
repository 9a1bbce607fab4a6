"""Command-line entry point: ``revlearn {pretrain,run,replay,metrics,report}``.

Exit status is 0 on success, 1 on a protocol or assertion failure and 2 on a
usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .exceptions import (
    CompatibilityError,
    ConfigurationError,
    LifecycleError,
    NumericalDivergenceError,
    ProtocolError,
)
from .io import dumps, load_distributions, read_json, save_core, save_distributions, write_json
from .metrics import divergence_report
from .model import SCALE_WIDTHS, ModelConfig, OutputDistribution
from .report import emit_plot_data, emit_tables, render_report

logger = logging.getLogger("revlearn")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

SEED_ENV = "RLAE_SEED_OVERRIDE"
PRETRAIN_KEYS = {"corpus_seed", "steps", "learning_rate", "clip_norm", "corpus_size"}


class UsageError(Exception):
    pass


def _seed_override(spec: harness.ExperimentSpec) -> harness.ExperimentSpec:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return spec
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    logger.warning("!!! %s=%d is set: spec seeds %s are REPLACED by [%d]; this run is not comparable "
                   "to the pinned configuration !!!", SEED_ENV, seed, list(spec.seeds), seed)
    return replace(spec, seeds=(seed,))


def write_outputs(record: dict, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    path = write_json(record, out_dir / "record.json")
    emit_tables(record, out_dir / "tables")
    emit_plot_data(record, out_dir / "plots")
    (out_dir / "report.txt").write_text(render_report(read_json(path)), encoding="utf-8")
    return path


def cmd_pretrain(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    data = harness.parse_spec_text(path.read_text(encoding="utf-8"))
    train = {k: data.pop(k) for k in list(data) if k in PRETRAIN_KEYS}
    if "scale_tag" in data and "hidden_widths" not in data:
        if data["scale_tag"] not in SCALE_WIDTHS:
            raise ConfigurationError(f"unknown scale_tag {data['scale_tag']!r}")
        data["hidden_widths"] = SCALE_WIDTHS[data["scale_tag"]]
    try:
        config = ModelConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"invalid model config: {exc}") from exc
    core = harness.pretrain(
        config, int(train.get("corpus_seed", 0)), int(train.get("steps", 200)),
        learning_rate=float(train.get("learning_rate", 1.0)),
        corpus_size=int(train.get("corpus_size", 2048)), clip_norm=float(train.get("clip_norm", 5.0)),
    )
    save_core(core, args.out)
    print(f"fingerprint {core.fingerprint}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    if not Path(args.spec).is_file():
        raise UsageError(f"spec file not found: {args.spec}")
    spec = _seed_override(harness.load_spec(args.spec, args.set or ()))
    if args.out_dir:
        spec = replace(spec, output_dir=args.out_dir)
    out_dir = Path(spec.output_dir) / spec.kind
    logger.info("running %s (spec %s) into %s", spec.kind, spec.spec_hash[:12], out_dir)
    record = harness.run_experiment(spec)
    path = write_outputs(record, out_dir)
    if args.dump_distributions:
        for tag, base in sorted(record["baselines"].items()):
            dists = [OutputDistribution(probs=p, prompt_id=pid) for pid, p in sorted(base["distributions"].items())]
            save_distributions(dists, out_dir / f"baseline_{tag}.json")
    print(render_report(record), end="")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.record)
    if not path.is_file():
        raise UsageError(f"record not found: {path}")
    try:
        stored = read_json(path)
        spec = harness.ExperimentSpec.from_dict(stored["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path} is not a valid record: {exc}") from exc
    if os.environ.get(SEED_ENV):
        logger.warning("%s is ignored by replay; the stored spec seeds are used", SEED_ENV)
    fresh = dumps(harness.run_experiment(spec))
    original = path.read_text(encoding="utf-8")
    if fresh != original:
        print(f"replay MISMATCH: {path} is not reproduced byte-for-byte", file=sys.stderr)
        return EXIT_FAILURE
    print(f"replay ok: {path} reproduced byte-identically (spec {spec.spec_hash[:12]})")
    return EXIT_OK


def cmd_metrics(args) -> int:
    for p in (args.ref, args.cand):
        if not Path(p).is_file():
            raise UsageError(f"distribution dump not found: {p}")
    report = divergence_report(load_distributions(args.ref), load_distributions(args.cand), ("ref", "cand"))
    print(f"prompts {len(report.per_prompt)}")
    print(f"mean_kl {report.mean_kl!r}")
    print(f"mean_js {report.mean_js!r}")
    if args.per_prompt:
        for pid, (k, j) in sorted(report.per_prompt.items()):
            print(f"{pid} kl={k:.6g} js={j:.6g}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.record)
    if not path.is_file():
        raise UsageError(f"record not found: {path}")
    try:
        record = read_json(path)
    except ValueError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    print(render_report(record), end="")
    if args.emit_plots:
        emit_plot_data(record, args.emit_plots)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revlearn", description="Reversible behavioral learning lab.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain a base core from a model config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one experiment spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field (dotted keys nest)")
    p.add_argument("--out-dir", help="override the spec's output_dir")
    p.add_argument("--dump-distributions", action="store_true", help="also write baseline distribution dumps")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run a record's spec and check byte-identical output")
    p.add_argument("--record", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("metrics", help="divergence between two distribution dumps")
    p.add_argument("--ref", required=True)
    p.add_argument("--cand", required=True)
    p.add_argument("--per-prompt", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", help="human-readable summary of a record")
    p.add_argument("--record", required=True)
    p.add_argument("--emit-plots", metavar="DIR", help="also write plot series into DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, LifecycleError, NumericalDivergenceError) as exc:
        print(f"protocol failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
