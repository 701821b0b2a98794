"""Command-line entry point: ``mkgc {generate,train,eval,beliefs}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import subprocess
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .data import DatasetLayout, SyntheticSpec, generate_synthetic, load_dataset, write_keyvalue
from .embedding import load_checkpoint, save_checkpoint
from .evaluation import RA_FREQUENCY_THRESHOLD, EvalReport, eval_ea, eval_kgc, eval_ra
from .kg import ConfigError, KGError, LoadError
from .signatures import VARIANTS, SignatureIndex, refresh_beliefs
from .training import TRAIN_VARIANTS, NumericalError, TrainConfig, train

logger = logging.getLogger("mkgc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("kgc", "ea", "ra")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_generate(args) -> int:
    spec = SyntheticSpec.from_file(args.spec)
    try:
        spec.validate()
    except KGError as exc:
        raise ConfigError(str(exc)) from None
    try:
        layout = generate_synthetic(spec, args.out)
    except OSError as exc:
        raise LoadError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(layout.files())} files under {layout.root}")
    return EXIT_OK


def _check_alignment_files(layout: DatasetLayout, variant: str) -> None:
    if variant == "one" or len(layout.languages) < 2:
        return
    if not layout.entity_alignments:
        la, lb = layout.languages[:2]
        raise LoadError(f"variant {variant} needs entity alignments; missing file {layout.root / 'align' / f'entity_{la}-{lb}.tsv'}")


def _report(kg, table, tasks, fold="test", directions=("tail", "head"), include_dev=True,
            global_candidates=False, ra_threshold=RA_FREQUENCY_THRESHOLD, dump=None) -> EvalReport:
    report = EvalReport()
    if "kgc" in tasks:
        report.merge(eval_kgc(kg, table, fold, directions, include_dev, global_candidates, dump))
    if "ea" in tasks:
        report.merge(eval_ea(kg, table))
    if "ra" in tasks:
        report.merge(eval_ra(kg, table, ra_threshold))
    return report


def cmd_train(args) -> int:
    overrides = parse_pairs(args.set)
    if args.variant:
        overrides["variant"] = args.variant
    config = TrainConfig.from_file(args.config, overrides)
    layout = DatasetLayout.discover(args.data)
    _check_alignment_files(layout, config.variant)
    kg = load_dataset(layout, args.reveal_fraction, args.split_seed)
    split = _split_params(layout, args.reveal_fraction, args.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = train(kg, config)
    meta = {
        "entity_vocab_sha256": kg.entities.digest(),
        "relation_vocab_sha256": kg.relations.digest(),
        "variant": config.variant,
        "dim": config.dim,
        "seed": config.seed,
        **split,
    }
    checkpoints = []
    if config.variant == "one":
        for run in result.runs:
            path = out / f"checkpoint.{run.language}.bin"
            save_checkpoint(path, run.table, {**meta, "language": run.language})
            checkpoints.append(path)
    else:
        save_checkpoint(out / "checkpoint.bin", result.table, meta)
        checkpoints.append(out / "checkpoint.bin")

    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lKGC", "lReg", "lRA", "total"])
        for row in result.history():
            writer.writerow([row.epoch, repr(row.kgc), repr(row.reg), repr(row.ra), repr(row.total)])
    if result.beliefs is not None:
        result.beliefs.to_tsv(out / "beliefs.tsv", kg)

    report = _report(kg, result.table, TASKS, fold="dev")
    report.to_tsv(out / "report.tsv")
    (out / "report.txt").write_text(report.format_table() + "\n", encoding="utf-8")

    manifest = {
        "command": "train",
        "version": version_string(),
        **{f"config.{k}": v for k, v in config.to_dict().items()},
        **split,
        "report_fold": "dev",
        **{f"input.{p.relative_to(layout.root).as_posix()}": file_digest(p) for p in layout.files()},
        **{f"output.{p.name}": file_digest(p) for p in checkpoints},
    }
    write_keyvalue(out / "manifest.txt", manifest)
    print(report.format_table())
    return EXIT_OK


def _split_params(layout: DatasetLayout, fraction, seed) -> dict[str, str]:
    manifest = layout.manifest
    return {
        "seed_align_fraction": fraction if fraction is not None else manifest.get("seed_align_fraction", 0.5),
        "split_seed": seed if seed is not None else manifest.get("split_seed", 0),
    }


def _load_checkpoints(path: Path):
    from .embedding import merge_tables

    if path.is_dir():
        files = sorted(path.glob("checkpoint*.bin"))
        if not files:
            raise LoadError(f"no checkpoint*.bin under {path}")
    else:
        files = [path]
    loaded = [load_checkpoint(f) for f in files]
    tables = [t for t, _ in loaded]
    metas = [m for _, m in loaded]
    table = tables[0] if len(tables) == 1 else merge_tables(tables)
    return table, metas


def _check_hashes(kg, metas, where) -> None:
    for meta in metas:
        for key, value in (("entity_vocab_sha256", kg.entities.digest()), ("relation_vocab_sha256", kg.relations.digest())):
            if meta.get(key) and meta[key] != value:
                raise LoadError(f"{where}: {key} does not match the dataset; refusing to evaluate a stale checkpoint")


def cmd_eval(args) -> int:
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise UsageError(f"--tasks must be a comma list drawn from {TASKS}")
    ckpt = Path(args.checkpoint)
    table, metas = _load_checkpoints(ckpt)
    layout = DatasetLayout.discover(args.data)
    fraction = args.reveal_fraction if args.reveal_fraction is not None else _meta_float(metas, "seed_align_fraction")
    seed = args.split_seed if args.split_seed is not None else _meta_int(metas, "split_seed")
    kg = load_dataset(layout, fraction, seed)
    _check_hashes(kg, metas, ckpt)
    out = Path(args.out) if args.out else (ckpt if ckpt.is_dir() else ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    directions = ("tail",) if args.tail_only else ("tail", "head")
    dump = out / "ranks.tsv" if args.dump_ranks else None
    report = _report(kg, table, tasks, args.fold, directions, not args.no_dev_filter,
                     args.global_candidates, args.ra_threshold, dump)
    report.to_tsv(out / f"eval_{args.fold}.tsv")
    (out / f"eval_{args.fold}.txt").write_text(report.format_table() + "\n", encoding="utf-8")
    print(report.format_table())
    return EXIT_OK


def _meta_float(metas, key):
    return float(metas[0][key]) if metas and key in metas[0] else None


def _meta_int(metas, key):
    return int(metas[0][key]) if metas and key in metas[0] else None


def cmd_beliefs(args) -> int:
    table, metas = _load_checkpoints(Path(args.checkpoint))
    layout = DatasetLayout.discover(args.data)
    kg = load_dataset(layout, _meta_float(metas, "seed_align_fraction"), _meta_int(metas, "split_seed"))
    _check_hashes(kg, metas, args.checkpoint)
    index = SignatureIndex(kg, kg.revealed_classes().representatives())
    import numpy as np

    beliefs = refresh_beliefs(index, args.variant, table, threshold=args.tau, max_pairs=args.max_pairs,
                              rng=np.random.default_rng(args.seed))
    beliefs.to_tsv(args.out, kg)
    print(f"wrote {len(beliefs)} relation pairs ({int(beliefs.selected.sum())} passing the relation test) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mkgc", description="Multilingual KG completion with entity and relation alignment.")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"mkgc {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic multilingual dataset")
    g.add_argument("--spec", required=True, help="key=value synthetic spec file")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant and report on the dev folds")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key=value training config file")
    t.add_argument("--variant", choices=TRAIN_VARIANTS)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--reveal-fraction", type=float)
    t.add_argument("--split-seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or a train output directory")
    e.add_argument("--tasks", default="kgc,ea,ra")
    e.add_argument("--out")
    e.add_argument("--fold", default="test", choices=("train", "dev", "test"))
    e.add_argument("--tail-only", action="store_true", help="rank objects only")
    e.add_argument("--no-dev-filter", action="store_true", help="filter with train and test facts only")
    e.add_argument("--global-candidates", action="store_true", help="rank against every entity")
    e.add_argument("--ra-threshold", type=int, default=RA_FREQUENCY_THRESHOLD)
    e.add_argument("--dump-ranks", action="store_true")
    e.add_argument("--reveal-fraction", type=float)
    e.add_argument("--split-seed", type=int)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("beliefs", help="dump the relation belief table")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--variant", choices=VARIANTS, default="softAsymmetric")
    b.add_argument("--out", required=True)
    b.add_argument("--tau", type=float, default=TrainConfig.tau)
    b.add_argument("--max-pairs", type=int, default=TrainConfig.max_pairs)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_beliefs)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except NumericalError as exc:
        print(f"mkgc: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError) as exc:
        print(f"mkgc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KGError, OSError) as exc:
        print(f"mkgc: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
