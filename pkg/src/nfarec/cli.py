"""Command-line entry point: prepare, train, evaluate, ablate, predict, export.

Settings resolve as flags > ``--config`` file > ``--preset`` > defaults.
Exit codes: 0 ok, 1 usage or input error, 2 training diverged,
3 checkpoint/dataset mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import data, evaluation, model
from .config import PRESETS, Config, ConfigError, from_preset
from .metrics import rank_items

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_PROVENANCE = 0, 1, 2, 3

log = logging.getLogger("nfarec")

# flag name -> Config field for boolean switches
SWITCHES = {
    "no_unlabelled_loss": "no_unlabelled_loss",
    "attention_only": "attention_only",
    "no_seq": "no_seq",
    "no_gra1": "no_gra1",
    "no_gra2": "no_gra2",
    "no_masking": "no_masking",
    "no_self_loops": "self_loops",
    "include_seen": "include_seen",
    "positive_only": "positive_only",
    "lenient": "lenient",
}
VALUES = ("seed", "order", "threads", "epochs", "lr", "d_model", "delimiter", "columns",
          "threshold", "min_interactions", "split", "batch_users")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("settings")
    g.add_argument("--config", help="key = value settings file")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int)
    g.add_argument("--order", type=int, help="feedback correlation order L")
    g.add_argument("--threads", type=int, help="BLAS thread cap (0 = library default)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--batch-users", dest="batch_users", type=int)
    g.add_argument("--delimiter", help="field separator; 'tab', 'comma' and 'double-colon' are accepted")
    g.add_argument("--columns", help="comma-separated column order, e.g. user,item,rating,timestamp")
    g.add_argument("--threshold", type=float, help="ratings at or above this are positive")
    g.add_argument("--min-interactions", dest="min_interactions", type=int)
    g.add_argument("--split", help="train:validation:test ratios")
    for flag in SWITCHES:
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nfarec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build a dataset bundle from an interaction log")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="bundle directory")
    _common(p)

    p = sub.add_parser("train", help="fit a model on a bundle")
    p.add_argument("bundle")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch log path (default: <out>.log)")
    _common(p)

    p = sub.add_parser("evaluate", help="ranking and polarity metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--split-name", dest="split_name", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--out", help="report prefix; writes <out>.txt and <out>.tsv")
    _common(p)

    p = sub.add_parser("ablate", help="ablation and correlation-order tables")
    p.add_argument("bundle")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--orders", default="1,2,3,4")
    p.add_argument("--out", help="report prefix; writes <out>.txt and <out>.tsv")
    _common(p)

    p = sub.add_parser("predict", help="top-K items for named users")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--users", required=True, help="comma-separated user ids")
    p.add_argument("-k", type=int, default=10)
    _common(p)

    p = sub.add_parser("export", help="write user and item representations")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace, base: Config | None = None) -> Config:
    """Apply preset, then file, then explicit flags on top of ``base``."""
    cfg = base or Config()
    if args.preset:
        cfg = from_preset(args.preset, cfg)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = Config.load(path, cfg)
    changes = {}
    for name in VALUES:
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = data.DELIMITERS.get(v, v) if name == "delimiter" else v
    for flag, key in SWITCHES.items():
        if getattr(args, flag, None):
            changes[key] = flag != "no_self_loops"
    if args.preset:
        changes["preset"] = args.preset
    return cfg.replace(**changes) if changes else cfg


def _threads(cfg: Config):
    return threadpool_limits(limits=cfg.threads) if cfg.threads > 0 else nullcontext()


def _write_report(prefix, text: str, kv: str) -> None:
    if prefix:
        Path(f"{prefix}.txt").write_text(text, encoding="utf-8")
        Path(f"{prefix}.tsv").write_text(kv, encoding="utf-8")


def cmd_prepare(args, cfg: Config) -> int:
    schema = data.Schema(cfg.column_tuple, cfg.delimiter, cfg.rating_min, cfg.rating_max)
    logged = data.load_interactions(args.input, schema, cfg.lenient)
    bundle = data.prepare_bundle(logged.records, cfg.threshold, cfg.min_interactions,
                                 cfg.split_ratios, cfg.order, cfg.self_loops)
    out = data.save_bundle(bundle, args.out)
    (out / "config.txt").write_text(cfg.serialize(), encoding="utf-8")
    print(data.format_statistics(data.dataset_statistics(bundle.split.train.with_sequences(
        bundle.split.full_sequences))), end="")
    if logged.skipped:
        print(f"skipped_rows\t{len(logged.skipped)}")
    print(f"train_only_users\t{len(bundle.split.flagged_users)}")
    print(f"bundle\t{out}")
    return EXIT_OK


def _bundle_config(bundle_dir) -> Config:
    """Settings stored with the bundle, used as the base layer for later commands."""
    path = Path(bundle_dir) / "config.txt"
    return Config.load(path) if path.exists() else Config()


def cmd_train(args, cfg: Config) -> int:
    bundle = data.load_bundle(args.bundle)
    log_path = args.log or f"{args.out}.log"
    result = model.fit(bundle, cfg, log_path=log_path)
    model.save_checkpoint(result.best, args.out)
    last = result.history[-1] if result.history else None
    print(f"checkpoint\t{args.out}\nbest_epoch\t{result.best.epoch}\nlog\t{log_path}")
    if last is not None:
        print(f"final_loss_main\t{last.loss_main:.6g}\nfinal_val_ndcg@20\t{last.val_ndcg:.4f}")
    if result.diverged:
        print("training diverged; saved the last finite checkpoint", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(args, cfg: Config) -> int:
    bundle = data.load_bundle(args.bundle)
    ckpt = model.load_checkpoint(args.checkpoint)
    report = evaluation.evaluate(ckpt, bundle, args.split_name,
                                 include_seen=cfg.include_seen or None,
                                 positive_only=cfg.positive_only or None)
    print(report.to_table(), end="")
    _write_report(args.out, report.to_table(), report.to_kv())
    return EXIT_OK


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_ablate(args, cfg: Config) -> int:
    bundle = data.load_bundle(args.bundle)
    seeds, orders = _int_list(args.seeds), _int_list(args.orders)

    def progress(name, seed, rep):
        log.info("%s seed %d: ndcg@20 %.4f", name, seed, rep.ndcg[20])

    table = evaluation.ablation_suite(bundle, cfg, seeds, orders, progress=progress)
    print(table.to_text(), end="")
    _write_report(args.out, table.to_text(), table.to_kv())
    return EXIT_OK


def cmd_predict(args, cfg: Config) -> int:
    bundle = data.load_bundle(args.bundle)
    ckpt = model.load_checkpoint(args.checkpoint)
    model.check_provenance(ckpt, bundle)
    m = ckpt.model(bundle.split.train.n_users)
    scores = m.scores(model.TrainingView.from_bundle(bundle, ckpt.config))
    index = bundle.split.train.user_index
    items = bundle.split.train.item_ids
    unknown = []
    for user in (u.strip() for u in args.users.split(",") if u.strip()):
        if user not in index:
            unknown.append(user)
            continue
        u = index[user]
        seen = None if cfg.include_seen else {e[0] for e in bundle.split.train.sequences[u]}
        for rank, i in enumerate(rank_items(scores[u], seen, args.k), start=1):
            print(f"{user}\t{rank}\t{items[i]}\t{scores[u, i]:.6f}")
    if unknown:
        print(f"unknown_users\t{','.join(unknown)}")
    return EXIT_OK


def cmd_export(args, cfg: Config) -> int:
    bundle = data.load_bundle(args.bundle)
    ckpt = model.load_checkpoint(args.checkpoint)
    for path in evaluation.export_representations(ckpt, bundle, args.out):
        print(path)
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "predict": cmd_predict, "export": cmd_export}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"nfarec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = None
        if args.command in ("train", "ablate"):
            base = _bundle_config(args.bundle)
        cfg = resolve_config(args, base)
        with _threads(cfg):
            return COMMANDS[args.command](args, cfg)
    except model.ProvenanceError as exc:
        print(f"nfarec: provenance mismatch: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except (UsageError, ConfigError, FileNotFoundError, data.SchemaError, data.RowError,
            data.EmptyDatasetError, ValueError, OSError) as exc:
        print(f"nfarec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
