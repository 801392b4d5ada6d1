"""Command-line entry point: ``voxelforge {gen-data,train,generate,evaluate,export-mesh}``.

Artifacts go to files, progress to stderr. Every command is deterministic in its
arguments; ``--seed`` falls back to the VOXELFORGE_SEED environment variable,
then to 0.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import CATEGORIES, Dataset, embed_text, load_dataset, make_dataset, save_dataset, split_dataset
from .losses import TrainingConfig
from .networks import CheckpointError, load_checkpoint

log = logging.getLogger("voxelforge")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    """A user-facing failure; reported on stderr with exit code 1."""


def _seed(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("VOXELFORGE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"VOXELFORGE_SEED must be an integer, got {env!r}") from None


# -- config ------------------------------------------------------------------------

def _coerce(name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(TrainingConfig)}
    if name not in fields:
        raise CliError(f"unknown config key {name!r}; valid keys: {', '.join(sorted(fields))}")
    default = getattr(TrainingConfig(), name)
    raw = raw.strip()
    if name == "clip_value":
        return None if raw.lower() in ("", "none") else float(raw)
    try:
        return int(raw) if isinstance(default, int) else float(raw)
    except ValueError:
        raise CliError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config_text(text: str, source: str = "config") -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def build_config(args) -> TrainingConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    if args.iterations is not None:
        values["iterations"] = args.iterations
    if args.seed is not None or "seed" not in values:
        values["seed"] = _seed(args.seed)
    cfg = TrainingConfig(**values)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from None


# -- data helpers ----------------------------------------------------------------

def _manifest_path(data_path) -> Path:
    return Path(str(data_path) + ".split.json")


def _load_data(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise CliError(f"dataset {path} not found")
    try:
        return load_dataset(path)
    except ValueError as exc:
        raise CliError(f"cannot read dataset {path}: {exc}") from None


def _split(data_path, dataset: Dataset, which: str) -> Dataset:
    manifest = _manifest_path(data_path)
    if manifest.exists():
        ids = json.loads(manifest.read_text())[which]
    else:
        log.info("no split manifest at %s, using seed-0 split", manifest)
        ids = getattr(split_dataset(dataset.ids, 0), which)
    return dataset.subset(ids)


def _checkpoint(path, kind):
    path = Path(path)
    if not path.exists():
        raise CliError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path, expect_kind=kind)
    except (CheckpointError, T.TensorFormatError) as exc:
        raise CliError(str(exc)) from None


def embedding_hash(embedding: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(embedding, dtype="<f4").tobytes()).hexdigest()[:16]


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 10:
        raise CliError(f"--count must be at least 10, got {args.count}")
    if args.high_res < 8 or args.high_res % 8:
        raise CliError(f"--high-res must be a positive multiple of 8, got {args.high_res}")
    seed = _seed(args.seed)
    ds = make_dataset(args.count, args.high_res, seed)
    split = split_dataset(ds.ids, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    manifest = {"seed": seed, "train": split.train, "validation": split.validation, "test": split.test}
    _manifest_path(out).write_text(json.dumps(manifest, indent=1) + "\n")
    counts = Counter(s.category for s in ds.samples)
    print(f"wrote {len(ds)} samples ({', '.join(f'{c}={counts[c]}' for c in CATEGORIES)}) to {out}")
    print(f"split train={len(split.train)} validation={len(split.validation)} test={len(split.test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train  # heavy import kept out of the other commands

    cfg = build_config(args)
    if args.stage == 2 and args.variant is None:
        raise CliError("--stage 2 requires --variant {v0,v1}")
    if args.stage == 2 and args.stage1_ckpt is None:
        raise CliError("--stage 2 requires --stage1-ckpt")
    dataset = _load_data(args.data)
    train_set = _split(args.data, dataset, "train")
    stage = "1" if args.stage == 1 else f"2{args.variant}"
    try:
        report = train(stage, train_set, cfg, args.ckpt_dir, stage1_checkpoint=args.stage1_ckpt,
                       resume=args.resume, timing=args.timing)
    except (FileNotFoundError, ValueError, CheckpointError) as exc:
        raise CliError(str(exc)) from None
    print(f"stage {stage}: {len(report.iterations)} iterations, checkpoints in {args.ckpt_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if (args.stage2_ckpt is None) != (args.variant is None):
        raise CliError("--stage2-ckpt and --variant must be given together")
    g1 = _checkpoint(args.stage1_ckpt, "stage1_gen")
    emb = embed_text(args.text)
    t = T.Tensor(emb[None].astype(np.float32))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        low = g1(t)
        T.save_tensor(str(out) + ".low.vft", low.data[0])
        print(f"low {str(out)}.low.vft shape {'x'.join(map(str, low.shape[1:]))}")
        if args.stage2_ckpt is not None:
            g2 = _checkpoint(args.stage2_ckpt, f"stage2_gen_{args.variant}")
            if g2.low_res != g1.low_res:
                raise CliError(f"resolution mismatch: StageI makes {g1.low_res}^3, StageII expects {g2.low_res}^3")
            high = g2(low) if args.variant == "v0" else g2(low, t)
            T.save_tensor(str(out) + ".high.vft", high.data[0])
            print(f"high {str(out)}.high.vft shape {'x'.join(map(str, high.shape[1:]))}")
    print(f"embedding sha256/16 {embedding_hash(emb)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import EvalConfig, Evaluator, evaluate_dataset, evaluate_model, format_kv, format_table

    stage2 = args.stage2_ckpt or []
    variants = args.variant or []
    if len(stage2) != len(variants):
        raise CliError("give one --variant per --stage2-ckpt")
    if stage2 and args.stage1_ckpt is None:
        raise CliError("--stage2-ckpt requires --stage1-ckpt")
    dataset = _load_data(args.data)
    train_set = _split(args.data, dataset, "train")
    test_set = _split(args.data, dataset, "test")
    g1 = _checkpoint(args.stage1_ckpt, "stage1_gen") if stage2 else None
    nets = [(v, _checkpoint(p, f"stage2_gen_{v}")) for p, v in zip(stage2, variants)]
    evaluator = Evaluator.fit(train_set, EvalConfig(epochs=args.epochs, seed=_seed(args.seed)))
    reports = [evaluate_dataset(test_set, evaluator)]
    for v, g2 in nets:
        try:
            reports.append(evaluate_model(g1, g2, v, test_set, evaluator))
        except ValueError as exc:
            raise CliError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(reports)
    (out / "metrics.txt").write_text(table)
    (out / "metrics.kv").write_text(format_kv(reports))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_export_mesh(args) -> int:
    from .mesh import marching_cubes, write_obj

    path = Path(args.voxel)
    if not path.exists():
        raise CliError(f"voxel file {path} not found")
    try:
        grid = T.load_tensor(path)
    except T.TensorFormatError as exc:
        raise CliError(f"cannot read voxel file {path}: {exc}") from None
    if grid.ndim == 5 and grid.shape[0] == 1:
        grid = grid[0]
    if grid.ndim != 4 or grid.shape[0] != 4:
        raise CliError(f"voxel file {path} holds shape {grid.shape}, expected [4, D, H, W]")
    if not 0.0 < args.iso < 1.0:
        raise CliError(f"--iso must lie in (0, 1), got {args.iso}")
    mesh = marching_cubes(grid, args.iso)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(mesh, out)
    print(f"{len(mesh.triangles)} triangles, {len(mesh.vertices)} vertices -> {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxelforge", description="Two-stage text-to-voxel GAN toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic table/chair dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--high-res", type=int, default=16)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="dataset file; the split manifest goes to OUT.split.json")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train StageI or a StageII variant")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--variant", choices=("v0", "v1"))
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat key=value file of TrainingConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ckpt-dir", required=True)
    t.add_argument("--stage1-ckpt")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--timing", action="store_true", help="record wall-clock ms in the loss log")
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="generate voxels from a text description")
    gen.add_argument("--text", required=True)
    gen.add_argument("--stage1-ckpt", required=True)
    gen.add_argument("--stage2-ckpt")
    gen.add_argument("--variant", choices=("v0", "v1"))
    gen.add_argument("--out", required=True, help="output prefix; writes OUT.low.vft (and OUT.high.vft)")
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="class accuracy and embedding mse on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--stage1-ckpt")
    e.add_argument("--stage2-ckpt", action="append")
    e.add_argument("--variant", action="append", choices=("v0", "v1"))
    e.add_argument("--epochs", type=int, default=40)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True, help="directory for metrics.txt and metrics.kv")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("export-mesh", help="marching cubes on a voxel file, written as OBJ")
    m.add_argument("--voxel", required=True)
    m.add_argument("--iso", type=float, default=0.5)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_mesh)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"voxelforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"voxelforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
