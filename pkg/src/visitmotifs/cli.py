"""Command-line entry point: ``visitmotifs <stage> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .pipeline import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_STAGE,
    Bundle,
    PipelineConfig,
    PipelineError,
    export_report,
    load_bundle,
    run_pipeline,
    stage_census,
    stage_clusters,
    stage_ingest,
    stage_metrics,
    stage_props,
    write_networks,
)
from .synth import ScenarioConfig, ScenarioError, generate_scenario

log = logging.getLogger("visitmotifs")

STAGES = ("synth", "ingest", "census", "props", "metrics", "clusters", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visitmotifs", description="Motif analysis of daily networks of places.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic scenario (stops.csv, pois.csv, ground_truth.json)",
        "ingest": "parse stops and POIs, write daily networks and mobility.csv",
        "census": "count motifs on the daily networks in --out",
        "props": "global network properties of the daily networks in --out",
        "metrics": "baselines, change series and recovery for the tables in --out",
        "clusters": "rank attributed motifs and build lifestyle-cluster series",
        "run": "all stages from stops/POIs to the report bundle",
    }
    for name in STAGES:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="random seed (scenario draw, Louvain partition)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name != "synth":
            p.add_argument("--jobs", type=int, help="worker processes for per-day stages")
            p.add_argument("--m4-convention", choices=("k4-first", "diamond-first"),
                           help="which dense 4-node class is called M4-1")
            p.add_argument("--stops", help="stops file (overrides config)")
            p.add_argument("--pois", help="POI file (overrides config)")
            p.add_argument("--rules", help="cluster rule file (overrides config)")
            p.add_argument("--max-gap", type=float, help="drop transitions whose stops are more than this many seconds apart")
        if name == "run":
            p.add_argument("--format", choices=("csv", "json"), default="csv",
                           help="extra report format; csv tables are always written")
    return parser


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        "out": args.out,
        "seed": args.seed,
        "jobs": args.jobs,
        "m4_convention": args.m4_convention,
        "stops": args.stops,
        "pois": args.pois,
        "rules": args.rules,
        "max_gap": args.max_gap,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


def _cmd_synth(args) -> None:
    payload = {}
    if args.config:
        try:
            payload = json.loads(Path(args.config).read_text("utf-8"))
        except OSError as exc:
            raise PipelineError("synth", f"cannot read config {args.config}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise PipelineError("synth", f"config is not valid JSON: {exc}", EXIT_CONFIG) from exc
    if args.seed is not None:
        payload["seed"] = args.seed
    try:
        cfg = ScenarioConfig.from_dict(payload)
        cfg.validate()
    except (ScenarioError, TypeError, ValueError) as exc:
        raise PipelineError("synth", str(exc), EXIT_CONFIG) from exc
    out = Path(args.out or "scenario")
    try:
        generate_scenario(cfg, out)
    except OSError as exc:
        raise PipelineError("synth", f"cannot write scenario to {out}: {exc}", EXIT_IO) from exc
    log.info("wrote scenario to %s", out)


def _cmd_stage(name: str, cfg: PipelineConfig) -> None:
    out = Path(cfg.out)
    if name == "ingest":
        bundle = Bundle(cfg)
        stage_ingest(cfg, bundle)
        write_networks(bundle, out)
    elif name == "census":
        bundle = load_bundle(cfg, ("networks",))
        stage_census(cfg, bundle)
        export_report(bundle, out, "csv", ("census",))
    elif name == "props":
        bundle = load_bundle(cfg, ("networks",))
        stage_props(cfg, bundle)
        export_report(bundle, out, "csv", ("props",))
    elif name == "metrics":
        bundle = load_bundle(cfg, ("mobility", "census", "props"))
        stage_metrics(cfg, bundle)
        export_report(bundle, out, "csv", ("metrics",))
    elif name == "clusters":
        # class recoveries feed recovery.json alongside the clusters
        bundle = load_bundle(cfg, ("mobility", "census", "props"))
        stage_metrics(cfg, bundle)
        stage_clusters(cfg, bundle)
        export_report(bundle, out, "csv", ("clusters",))
    else:
        raise AssertionError(name)
    for w in bundle.warnings:
        log.warning(w)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            _cmd_synth(args)
        else:
            cfg = _pipeline_config(args)
            if args.command == "run":
                bundle = run_pipeline(cfg)
                if args.format == "json":
                    export_report(bundle, cfg.out, "json")
            else:
                _cmd_stage(args.command, cfg)
    except PipelineError as exc:
        print(f"visitmotifs: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(f"visitmotifs: [config] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"visitmotifs: [io] {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"visitmotifs: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
