"""Command-line front end: single runs, multi-run batches, genome validation.

Exit codes: 0 success, 2 configuration/parse error, 3 runtime failure (with
partial logs preserved).  ``validate`` exits 0 when the genome needed no
repair and 1 when it did.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__, data as data_mod, engine, nn
from .genome import GenomeConfig, ParseError, TensorShape, decode, from_text, to_text
from .repair import RepairConfig, repair
from .surrogate import SurrogateConfig
from .variation import VariationConfig

_SECTION_TYPES = {
    "genome": GenomeConfig,
    "repair": RepairConfig,
    "variation": VariationConfig,
    "data": data_mod.DataConfig,
    "surrogate": SurrogateConfig,
    "train": nn.TrainConfig,
}


def _build_section(cls, values: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise engine.ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    if "class_weights" in values:
        values = {**values, "class_weights": tuple(values["class_weights"])}
    return cls(**values)


def load_config(path: str | None, overrides: dict) -> engine.RunConfig:
    """Build a RunConfig from an optional JSON document plus CLI overrides.
    Unknown keys are rejected."""
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise engine.ConfigError("config document must be a JSON object")
    top_fields = {f.name for f in dataclasses.fields(engine.RunConfig)}
    unknown = set(doc) - top_fields
    if unknown:
        raise engine.ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise engine.ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    cfg = engine.RunConfig(**kwargs)
    cfg.validate()
    return cfg


def config_as_dict(cfg: engine.RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTION_TYPES:
            section = dataclasses.asdict(value)
            section.pop("catalogue", None)  # layer catalogue is code, not config
            out[f.name] = section
        else:
            out[f.name] = value
    return out


def write_manifest(cfg: engine.RunConfig, out_dir: Path) -> None:
    doc = config_as_dict(cfg)
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
    manifest = {
        "config": doc,
        "config_sha256": digest,
        "seed": cfg.seed,
        "versions": {
            "neurolgp": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    try:
        cfg = load_config(
            args.config,
            {"mode": args.mode, "seed": args.seed, "backend": args.backend},
        )
    except (engine.ConfigError, data_mod.ConfigError, json.JSONDecodeError, OSError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out) if args.out else None
    try:
        if out_dir:
            write_manifest(cfg, out_dir)
        result = engine.run(cfg, out_dir)
    except Exception as exc:  # noqa: BLE001 - partial logs are already on disk
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(
        f"{cfg.mode} run (seed {cfg.seed}): best fitness {result.best.fitness:.4f}, "
        f"{result.total_cost_units} epoch-units"
    )
    return 0


def _batch_seeds(args) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    base = args.seed if args.seed is not None else 0
    return [base + i for i in range(args.runs)]


def _one_batch_run(cfg_base, mode, seed, out_root):
    cfg = dataclasses.replace(cfg_base, mode=mode, seed=seed)
    run_dir = out_root / f"{mode}_seed{seed}"
    try:
        write_manifest(cfg, run_dir)
        result = engine.run(cfg, run_dir)
        return {
            "mode": mode,
            "seed": seed,
            "status": "ok",
            "best_fitness": result.best.fitness,
            "total_cost_units": result.total_cost_units,
            "run_dir": run_dir.name,
        }
    except Exception as exc:  # noqa: BLE001 - recorded, batch continues
        return {
            "mode": mode,
            "seed": seed,
            "status": f"failed: {type(exc).__name__}",
            "best_fitness": "",
            "total_cost_units": "",
            "run_dir": run_dir.name,
        }


def cmd_batch(args) -> int:
    try:
        cfg_base = load_config(args.config, {"backend": args.backend})
        seeds = _batch_seeds(args)
        modes = [m.strip() for m in args.modes.split(",")]
        for mode in modes:
            if mode not in engine.MODES:
                raise engine.ConfigError(f"unknown mode {mode!r}")
        if not seeds:
            raise engine.ConfigError("need at least one seed")
    except (engine.ConfigError, data_mod.ConfigError, json.JSONDecodeError, OSError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = [(mode, seed) for mode in modes for seed in seeds]
    workers = max(1, int(os.environ.get("NEUROLGP_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda ms: _one_batch_run(cfg_base, *ms, out_root), jobs))
    else:
        rows = [_one_batch_run(cfg_base, mode, seed, out_root) for mode, seed in jobs]
    rows.sort(key=lambda r: (r["mode"], r["seed"]))
    lines = ["mode,seed,status,best_fitness,total_cost_units,run_dir"]
    for r in rows:
        best = repr(r["best_fitness"]) if isinstance(r["best_fitness"], float) else r["best_fitness"]
        lines.append(
            f'{r["mode"]},{r["seed"]},{r["status"]},{best},{r["total_cost_units"]},{r["run_dir"]}'
        )
    (out_root / "batch_summary.csv").write_text("\n".join(lines) + "\n")
    n_failed = sum(r["status"] != "ok" for r in rows)
    print(f"batch complete: {len(rows)} runs, {n_failed} failed -> {out_root / 'batch_summary.csv'}")
    return 0


def _parse_shape(text: str) -> TensorShape:
    parts = [int(p) for p in text.lower().split("x")]
    if len(parts) != 3:
        raise ValueError("expected HxWxC")
    return TensorShape(*parts)


def cmd_validate(args) -> int:
    try:
        genome = from_text(Path(args.genome_file).read_text())
    except (ParseError, OSError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    try:
        shape = _parse_shape(args.input_shape)
    except ValueError as exc:
        print(f"bad --input-shape: {exc}", file=sys.stderr)
        return 2
    repaired, report = repair(genome, shape, RepairConfig(), GenomeConfig(), args.classes)
    arch = decode(repaired, shape, args.classes)
    shapes = nn.propagate_shape(arch)
    print(f"input: {shape.height}x{shape.width}x{shape.channels}")
    print(f"effective chain ({len(arch.layers)} layers):")
    for op, s in zip(arch.layers, shapes):
        print(f"  {op.name:<12} -> {s.height}x{s.width}x{s.channels}")
    print(f"parameters (incl. {args.classes}-way head): {nn.param_count(arch)}")
    if report.is_empty:
        print("repair: not needed")
        return 0
    print(f"repair: {', '.join(report.rules_applied)} "
          f"(+{report.instructions_inserted}/-{report.instructions_removed} instructions)")
    print("repaired genome:")
    print(to_text(repaired, annotated=True))
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurolgp",
        description="Evolve sequential CNN architectures, optionally surrogate-assisted.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experimental arm")
    p_run.add_argument("--mode", choices=engine.MODES, help="experimental arm")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--seed", type=int, help="run seed")
    p_run.add_argument("--out", help="output directory (runlog.jsonl, CSVs, manifest)")
    p_run.add_argument("--backend", choices=["trainer", "proxy"], help="evaluation backend")
    p_run.set_defaults(func=cmd_run)

    p_batch = sub.add_parser("batch", help="run a seed batch per mode")
    p_batch.add_argument("--config", help="JSON config file")
    p_batch.add_argument("--modes", default="baseline,expensive,surrogate")
    p_batch.add_argument("--seeds", help="comma-separated seed list")
    p_batch.add_argument("--runs", type=int, default=1, help="number of seeds from --seed upward")
    p_batch.add_argument("--seed", type=int, help="base seed when --seeds is not given")
    p_batch.add_argument("--backend", choices=["trainer", "proxy"])
    p_batch.add_argument("--out", required=True, help="batch output root")
    p_batch.set_defaults(func=cmd_batch)

    p_val = sub.add_parser("validate", help="analyse a genome listing")
    p_val.add_argument("genome_file")
    p_val.add_argument("--input-shape", default="16x16x1", help="HxWxC (default 16x16x1)")
    p_val.add_argument("--classes", type=int, default=3)
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
