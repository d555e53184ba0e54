"""Config-driven experiment runner.

Subcommands::

    fedssl generate --config cfg.ini --out DIR [--seed N]
    fedssl pretrain --config cfg.ini --data DIR --mode MODE --out DIR [--seed N]
    fedssl finetune --config cfg.ini --data DIR --init {random,snapshot}
                    [--snapshot PATH] [--method NAME] --site {a,b} --out DIR [--seed N]
    fedssl report   --results DIR [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss). Every command writes the fully resolved
configuration it ran under next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import (ImageStore, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VALID, by_split,
                   generate_synthetic_sites, group_split, labeled_only,
                   read_manifest, write_groups, write_manifest)
from .errors import (AggregationError, ConfigurationError, ContractError,
                     DataIOError, FedsslError, FormatError, NumericError,
                     ValidationError)
from .federation import (ClientState, cssl_run, csfssl_run, derive_client_seed,
                         ppfssl_run)
from .finetune import finetune, predict
from .metrics import evaluate
from .model import build_encoder
from .runconfig import ExperimentConfig, load_config, phase_seed
from .snapshot import ROLE_SSL, load_snapshot, save_snapshot
from .ssl_train import ssl_train

logger = logging.getLogger(__name__)

PRETRAIN_MODES = ("ssl_a", "ssl_b", "cssl", "csfssl", "ppfssl_a", "ppfssl_b")
METHOD_ORDER = ("random",) + PRETRAIN_MODES

# Phase tags feeding derived seeds, so distinct phases never share streams.
TAG_MODEL = 101
TAG_SSL = 102
TAG_SPLIT_A = 103
TAG_SPLIT_B = 104
TAG_FINETUNE = 105

MISSING_CELL = "—"  # rendered for absent report cells

REPORT_COLUMNS = ["acc", "recall", "precision", "f1", "auc"]


def _write_run_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    cfg.write_resolved(out_dir / "resolved_config.ini")


def cmd_generate(cfg: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    syn = cfg.synthetic_config()
    manifest_a, manifest_b, groups = generate_synthetic_sites(syn, out_dir, cfg.seed)
    if cfg.preset == "custom":
        ratios = cfg.split_ratios()
        manifest_a = group_split(manifest_a, ratios, phase_seed(cfg.seed, TAG_SPLIT_A))
        manifest_b = group_split(manifest_b, ratios, phase_seed(cfg.seed, TAG_SPLIT_B))
    write_manifest(manifest_a, out_dir / "manifest_a.csv")
    write_manifest(manifest_b, out_dir / "manifest_b.csv")
    write_groups(groups, out_dir / "groups.csv")
    _write_run_config(cfg, out_dir)
    logger.info("generated %d site-A and %d site-B images under %s",
                len(manifest_a), len(manifest_b), out_dir)
    return 0


def _load_dataset(data_dir: Path):
    manifest_a = read_manifest(data_dir / "manifest_a.csv")
    manifest_b = read_manifest(data_dir / "manifest_b.csv")
    return manifest_a, manifest_b


def cmd_pretrain(cfg: ExperimentConfig, data_dir: Path, mode: str, out_dir: Path) -> int:
    if mode not in PRETRAIN_MODES:
        raise ConfigurationError(f"mode must be one of {PRETRAIN_MODES}, got {mode!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_a, manifest_b = _load_dataset(data_dir)
    initial = build_encoder(cfg.backbone_config(seed=phase_seed(cfg.seed, TAG_MODEL)))
    ssl_cfg = cfg.ssl_config(seed=phase_seed(cfg.seed, TAG_SSL))
    aug_cfg = cfg.augment_config()

    splits = {
        "a": (by_split(manifest_a, SPLIT_TRAIN), by_split(manifest_a, SPLIT_VALID)),
        "b": (by_split(manifest_b, SPLIT_TRAIN), by_split(manifest_b, SPLIT_VALID)),
    }
    rounds_log = None
    if mode in ("ssl_a", "ssl_b"):
        train, valid = splits[mode[-1]]
        logger.info("pretrain %s on %d images", mode, len(train))
        store = ImageStore(data_dir)
        model, history = ssl_train(initial, train, valid, ssl_cfg, aug_cfg, store)
    elif mode == "cssl":
        pooled = len(splits["a"][0]) + len(splits["b"][0])
        logger.info("pretrain cssl on %d pooled images", pooled)
        store = ImageStore(data_dir)
        model, history = cssl_run(initial, [splits["a"][0], splits["b"][0]],
                                  [splits["a"][1], splits["b"][1]],
                                  ssl_cfg, aug_cfg, store)
    else:
        clients = [
            ClientState(0, splits["a"][0], splits["a"][1], ImageStore(data_dir),
                        derive_client_seed(ssl_cfg.seed, 0)),
            ClientState(1, splits["b"][0], splits["b"][1], ImageStore(data_dir),
                        derive_client_seed(ssl_cfg.seed, 1)),
        ]
        if mode == "csfssl":
            fed = cfg.federation_config("client_server", start_client=0)
            model, history, rounds_log = csfssl_run(initial, clients, fed,
                                                    ssl_cfg, aug_cfg)
        else:
            start = 0 if mode == "ppfssl_a" else 1
            fed = cfg.federation_config("peer_to_peer", start_client=start)
            model, history, rounds_log = ppfssl_run(initial, clients, fed,
                                                    ssl_cfg, aug_cfg)

    save_snapshot(model, out_dir / f"{mode}.fssl")
    history.write_csv(out_dir / f"{mode}_history.csv")
    if rounds_log is not None:
        rounds_log.write_csv(out_dir / f"{mode}_rounds.csv")
    _write_run_config(cfg, out_dir)
    logger.info("pretrain %s done: best epoch %d of %d",
                mode, history.best_epoch, history.epochs_ran)
    return 0


def cmd_finetune_eval(cfg: ExperimentConfig, data_dir: Path, init: str,
                      snapshot_path: Path | None, site: str, out_dir: Path,
                      method: str | None) -> int:
    site = site.lower()
    if site not in ("a", "b"):
        raise ConfigurationError(f"site must be a or b, got {site!r}")
    if init not in ("random", "snapshot"):
        raise ConfigurationError(f"init must be random or snapshot, got {init!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_a, manifest_b = _load_dataset(data_dir)
    manifest = manifest_a if site == "a" else manifest_b
    store = ImageStore(data_dir)

    if init == "random":
        model_init = build_encoder(
            cfg.backbone_config(seed=phase_seed(cfg.seed, TAG_MODEL)))
        method = method or "random"
    else:
        if snapshot_path is None:
            raise ConfigurationError("--snapshot is required when --init snapshot")
        model_init = load_snapshot(snapshot_path)
        if model_init.role != ROLE_SSL:
            raise ContractError(
                f"snapshot {snapshot_path} has role {model_init.role!r}, need ssl")
        method = method or Path(snapshot_path).stem

    site_idx = 0 if site == "a" else 1
    ft_cfg = cfg.finetune_config(seed=phase_seed(cfg.seed, TAG_FINETUNE + site_idx))
    classifier, history = finetune(model_init, by_split(manifest, SPLIT_TRAIN),
                                   by_split(manifest, SPLIT_VALID), ft_cfg, store)

    test = by_split(manifest, SPLIT_TEST)
    preds = predict(classifier, test, store)
    logger.info("evaluated %d labeled test samples for %s/%s",
                len(preds), method, site)
    report = evaluate([p for _, _, p in preds], [y for _, y, _ in preds],
                      threshold=cfg.eval_threshold)

    stem = f"{method}_{site}"
    payload = {
        "method": method,
        "site": site.upper(),
        "seed": cfg.seed,
        "tp": report.counts.tp, "fp": report.counts.fp,
        "tn": report.counts.tn, "fn": report.counts.fn,
        "acc": report.values.acc, "recall": report.values.recall,
        "precision": report.values.precision, "f1": report.values.f1,
        "auc": report.auc,
        "epochs_ran": history.epochs_ran,
    }
    with open(out_dir / f"report_{stem}.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    report.write_roc_csv(out_dir / f"roc_{stem}.csv")
    with open(out_dir / f"predictions_{stem}.csv", "w") as fh:
        fh.write("sample_id,label,probability\n")
        for sid, y, p in preds:
            fh.write(f"{sid},{y},{p!r}\n")
    history.write_csv(out_dir / f"finetune_{stem}_history.csv")
    _write_run_config(cfg, out_dir)
    return 0


def _method_sort_key(method: str):
    try:
        return (0, METHOD_ORDER.index(method))
    except ValueError:
        return (1, method)


def cmd_report(results_dir: Path, out_dir: Path | None) -> int:
    reports = sorted(results_dir.glob("report_*.json"))
    if not reports:
        raise DataIOError(
            "no report_*.json files found; run the finetune subcommand first",
            path=results_dir)
    cells: dict[tuple[str, str], dict] = {}
    for path in reports:
        with open(path) as fh:
            payload = json.load(fh)
        cells[(payload["method"], payload["site"])] = payload
    methods = sorted({m for m, _ in cells}, key=_method_sort_key)

    header = ["method"]
    for site in ("A", "B"):
        header.extend(f"{site.lower()}_{col}" for col in REPORT_COLUMNS)
    rows = []
    for method in methods:
        row = [method]
        for site in ("A", "B"):
            payload = cells.get((method, site))
            for col in REPORT_COLUMNS:
                row.append(repr(payload[col]) if payload else MISSING_CELL)
        rows.append(row)

    out_dir = out_dir or results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")

    display = [[cell if cell == MISSING_CELL or i == 0 else f"{float(cell):.4f}"
                for i, cell in enumerate(row)] for row in rows]
    widths = [max(len(header[i]), max((len(r[i]) for r in display), default=0))
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in display:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    (out_dir / "comparison.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedssl",
        description="Deterministic two-site pretraining and evaluation runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config INI")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", required=True, help="output directory")

    p_gen = sub.add_parser("generate", help="render the synthetic dataset")
    add_common(p_gen)

    p_pre = sub.add_parser("pretrain", help="train an encoder snapshot")
    add_common(p_pre)
    p_pre.add_argument("--data", required=True, help="dataset directory")
    p_pre.add_argument("--mode", required=True, choices=PRETRAIN_MODES)

    p_ft = sub.add_parser("finetune", help="fine-tune and evaluate a classifier")
    add_common(p_ft)
    p_ft.add_argument("--data", required=True)
    p_ft.add_argument("--init", required=True, choices=("random", "snapshot"))
    p_ft.add_argument("--snapshot", default=None, help="ssl snapshot path")
    p_ft.add_argument("--method", default=None, help="method label for reports")
    p_ft.add_argument("--site", required=True, choices=("a", "b", "A", "B"))

    p_rep = sub.add_parser("report", help="aggregate reports into one table")
    p_rep.add_argument("--results", required=True, help="directory of report JSONs")
    p_rep.add_argument("--out", default=None)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(Path(args.results), Path(args.out) if args.out else None)
    cfg = load_config(args.config, seed_override=args.seed)
    out_dir = Path(args.out)
    if args.command == "generate":
        return cmd_generate(cfg, out_dir)
    if args.command == "pretrain":
        return cmd_pretrain(cfg, Path(args.data), args.mode, out_dir)
    return cmd_finetune_eval(cfg, Path(args.data), args.init,
                             Path(args.snapshot) if args.snapshot else None,
                             args.site, out_dir, args.method)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return run(argv)
    except (ConfigurationError, ValidationError, ContractError, AggregationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataIOError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except FedsslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
