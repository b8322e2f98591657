"""Experiment command line: gen, pretrain-decoder, train, ablate, eval, analyze.

Every command writes a manifest (resolved config, seed, input hashes, tool
version) into its output directory before computing anything, so re-running
with the same manifest reproduces outputs byte for byte.

Exit codes: 0 success, 2 config/usage error, 3 missing artifact,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .dataset import build_dataset, read_benchmark, read_dataset, write_benchmark, write_dataset
from .evalharness import dump_ranking_results, score_items, summarize_results
from .models import ModelConfig, load_decoder, pretrain_decoder, save_decoder, load_bundle
from .trainer import (
    NumericError,
    TrainConfig,
    config_hash,
    load_config_file,
    make_config,
    run_training,
)
from .world import Vocabulary, build_benchmark as make_benchmark, canonical_form, generate_scenes

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what) -> str:
    if path is None or not os.path.exists(path):
        raise CliError(f"missing {what}: {path}", EXIT_MISSING)
    return path


def _prepare_out(out, force: bool) -> str:
    if out is None:
        raise CliError("--out is required", EXIT_CONFIG)
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise CliError(f"output dir {out} exists and is not empty (use --force)", EXIT_CONFIG)
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, command, config, seed, inputs, extras=None):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {p: _sha256_file(p) for p in inputs},
        "out": os.path.abspath(out),
    }
    if extras:
        manifest.update(extras)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _resolve_config(args) -> TrainConfig:
    file_values = load_config_file(args.config) if args.config else None
    overrides = {
        "seed": args.seed,
        "alpha": getattr(args, "alpha", None),
        "beta": getattr(args, "beta", None),
        "m_negatives": getattr(args, "m_negatives", None),
        "k_targets": getattr(args, "k_targets", None),
        "recon_target": getattr(args, "recon_target", None),
        "noise_fraction": getattr(args, "noise_fraction", None),
        "num_paraphrases": getattr(args, "num_paraphrases", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "n_scenes": getattr(args, "n_scenes", None),
        "eval_items": getattr(args, "eval_items", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    try:
        return make_config(file_values, **overrides)
    except (ValueError, KeyError) as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc


SUITE_NAMES = ("swap", "replace", "paraphrase")


def _dataset_paths(data_dir):
    return {
        "train": os.path.join(data_dir, "train.jsonl"),
        **{s: os.path.join(data_dir, f"{s}_suite.jsonl") for s in SUITE_NAMES},
    }


def cmd_gen(args) -> int:
    config = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    _write_manifest(out, "gen", dataclasses.asdict(config), config.seed, [])
    vocab = Vocabulary()
    scenes = generate_scenes(config.n_scenes, config.seed, vocab)
    dataset = build_dataset(
        scenes, vocab, num_p=config.num_paraphrases, seed=config.seed,
        noise_fraction=config.noise_fraction,
    )
    paths = _dataset_paths(out)
    write_dataset(paths["train"], dataset)

    train_canon = dataset.canonical_set()
    rng_seed = config.seed + 1
    pool = generate_scenes(max(4 * 3 * config.eval_items, 2000), rng_seed, vocab)
    held, seen = [], set()
    for s in pool:
        c = canonical_form(s.literal(), vocab)
        if c in train_canon or c in seen:
            continue
        seen.add(c)
        held.append(s)
    need = 3 * config.eval_items
    if len(held) < need:
        raise CliError(
            f"only {len(held)} held-out scenes available for {need} eval items; "
            f"shrink n_scenes or eval_items", EXIT_CONFIG,
        )
    suites = {}
    for i, name in enumerate(SUITE_NAMES):
        chunk = held[i * config.eval_items:(i + 1) * config.eval_items]
        kind = f"{name}-suite"
        suites[name] = make_benchmark(kind, chunk, vocab, seed=config.seed + 2 + i,
                                      m_negatives=config.m_negatives)
        write_benchmark(paths[name], suites[name], vocab)
    print(f"gen: {len(scenes)} train scenes, suites "
          f"{[f'{name}:{len(suites[name])}' for name in SUITE_NAMES]} -> {out}")
    return EXIT_OK


def _load_suites(data_dir, vocab, names=SUITE_NAMES):
    paths = _dataset_paths(data_dir)
    suites = {}
    for name in names:
        p = _require(paths[name], f"{name} suite")
        suites[name] = read_benchmark(p, vocab)
    return suites


def cmd_pretrain_decoder(args) -> int:
    config = _resolve_config(args)
    data_dir = _require(args.data, "dataset dir")
    train_path = _require(_dataset_paths(data_dir)["train"], "train dataset")
    out = _prepare_out(args.out, args.force)
    _write_manifest(out, "pretrain-decoder", dataclasses.asdict(config), config.seed,
                    [train_path])
    vocab = Vocabulary()
    dataset = read_dataset(train_path, vocab)
    corpus = [c.token_ids for caps in dataset.captions for c in caps]
    model_cfg = ModelConfig.from_vocab(vocab)
    try:
        decoder, report = pretrain_decoder(
            corpus, vocab, model_cfg, seed=config.seed, epochs=args.pretrain_epochs,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except RuntimeError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    ckpt_path = os.path.join(out, "decoder.ckpt")
    save_decoder(ckpt_path, decoder, report)
    report_path = os.path.join(out, "pretrain_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump({
            "epochs": report.epochs,
            "heldout_perplexity": report.heldout_perplexity,
            "branching_bar": report.branching_bar,
            "n_train": report.n_train,
            "n_heldout": report.n_heldout,
            "passed": report.passed,
        }, fh, indent=2)
        fh.write("\n")
    print(f"pretrain-decoder: heldout perplexity "
          f"{report.heldout_perplexity[-1]:.3f} (bar {report.branching_bar:.3f}) -> {ckpt_path}")
    return EXIT_OK


def _train_once(config, data_dir, decoder_path, out):
    vocab = Vocabulary()
    dataset = read_dataset(_require(_dataset_paths(data_dir)["train"], "train dataset"), vocab)
    decoder, _ = load_decoder(_require(decoder_path, "decoder checkpoint"))
    suites = _load_suites(data_dir, vocab)
    try:
        metrics, ckpt = run_training(config, dataset, decoder, suites, out)
    except NumericError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    return metrics, ckpt


def cmd_train(args) -> int:
    config = _resolve_config(args)
    data_dir = _require(args.data, "dataset dir")
    decoder_path = _require(args.decoder, "decoder checkpoint")
    out = _prepare_out(args.out, args.force)
    _write_manifest(out, "train", dataclasses.asdict(config), config.seed,
                    [os.path.join(data_dir, "train.jsonl"), decoder_path])
    metrics, ckpt = _train_once(config, data_dir, decoder_path, out)
    last = metrics[-1]
    print(f"train: {config.epochs} epochs, final "
          f"swap={last['acc_swap']} replace={last['acc_replace']} "
          f"itt={last['acc_itt']} tot={last['acc_tot']} -> {out}")
    return EXIT_OK


ABLATION_ROWS = (
    ("row1", 0.0, 0.0),
    ("row2", None, 0.0),   # None keeps the configured weight
    ("row3", 0.0, None),
    ("row4", None, None),
)


def _ablate_run(job):
    config, data_dir, decoder_path, out = job
    metrics, _ = _train_once(config, data_dir, decoder_path, out)
    return metrics[-1]


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    data_dir = _require(args.data, "dataset dir")
    decoder_path = _require(args.decoder, "decoder checkpoint")
    out = _prepare_out(args.out, args.force)
    seeds = [base.seed + i for i in range(args.seeds)]
    _write_manifest(out, "ablate", dataclasses.asdict(base), base.seed,
                    [os.path.join(data_dir, "train.jsonl"), decoder_path],
                    extras={"rows": [r[0] for r in ABLATION_ROWS], "seeds": seeds})
    jobs = []
    for row_name, alpha, beta in ABLATION_ROWS:
        for seed in seeds:
            config = dataclasses.replace(
                base,
                alpha=base.alpha if alpha is None else alpha,
                beta=base.beta if beta is None else beta,
                seed=seed,
            )
            run_dir = os.path.join(out, f"{row_name}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            jobs.append(((config, data_dir, decoder_path, run_dir), row_name, seed))

    results = []
    if args.jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(args.jobs) as pool:
            finals = pool.map(_ablate_run, [j[0] for j in jobs])
        for (job, row_name, seed), final in zip(jobs, finals):
            results.append((row_name, seed, final))
    else:
        for job, row_name, seed in jobs:
            final = _ablate_run(job)
            results.append((row_name, seed, final))
            print(f"ablate {row_name} seed={seed}: swap={final['acc_swap']} "
                  f"itt={final['acc_itt']} tot={final['acc_tot']}")

    summary_path = os.path.join(out, "ablation_summary.csv")
    cols = ["row", "seed", "acc_swap", "acc_replace", "acc_itt", "acc_tot",
            "sim_pos_pos", "sim_pos_neg", "loss_total", "tau"]
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row_name, seed, final in results:
            writer.writerow([row_name, seed] + [final[c] for c in cols[2:]])
    print(f"ablate: {len(results)} runs -> {summary_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    data_dir = _require(args.data, "dataset dir")
    out = _prepare_out(args.out, args.force)
    names = SUITE_NAMES if args.suite == "all" else (args.suite,)
    _write_manifest(out, "eval", {"suite": args.suite}, args.seed or 0,
                    [ckpt_path] + [_dataset_paths(data_dir)[n] for n in names])
    vocab = Vocabulary()
    try:
        bundle, header, _ = load_bundle(ckpt_path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    epoch = header.get("meta", {}).get("epoch", 0)
    suites = _load_suites(data_dir, vocab, names)
    summary_rows = []
    for name in names:
        results = score_items(bundle, suites[name])
        dump_ranking_results(os.path.join(out, f"rankings_{name}.jsonl"), results)
        for row in summarize_results(results):
            summary_rows.append({"epoch": epoch, "suite": name, **row})
    summary_path = os.path.join(out, "summary.csv")
    cols = ["epoch", "suite", "category", "n", "acc_single", "acc_itt", "acc_tot"]
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in summary_rows:
            writer.writerow(row)
    print(f"eval: {len(summary_rows)} summary rows -> {summary_path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    out = _prepare_out(args.out, args.force)
    runs = []
    for d in args.metrics_dirs:
        path = os.path.join(d, "metrics.jsonl")
        _require(path, "metrics file")
        runs.append((os.path.basename(os.path.normpath(d)), path))
    _write_manifest(out, "analyze", {"metrics_dirs": [p for _, p in runs]}, 0,
                    [p for _, p in runs])
    rows = []
    for run_name, path in runs:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    m = json.loads(line)
                    rows.append({"run": run_name, **m})
    out_path = os.path.join(out, "analysis.csv")
    cols = ["run", "epoch", "sim_pos_pos", "sim_pos_neg", "acc_swap", "acc_replace",
            "acc_itt", "acc_tot", "loss_total", "loss_contrastive", "loss_recon",
            "loss_align", "tau"]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c) for c in cols})
    print(f"analyze: {len(rows)} rows -> {out_path}")
    return EXIT_OK


def _add_config_flags(p, train=False):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--m-negatives", dest="m_negatives", type=int, default=None)
    p.add_argument("--k-targets", dest="k_targets", type=int, default=None)
    p.add_argument("--recon-target", dest="recon_target",
                   choices=("alternative", "original"), default=None)
    p.add_argument("--noise-fraction", dest="noise_fraction", type=float, default=None)
    p.add_argument("--num-paraphrases", dest="num_paraphrases", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    if train:
        p.add_argument("--data", required=True, help="directory produced by gen")
        p.add_argument("--decoder", required=True, help="frozen decoder checkpoint")
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compolab",
        description="synthetic compositional image-caption training laboratory",
    )
    parser.add_argument("--version", action="version", version=f"compolab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate dataset and benchmark suites")
    _add_config_flags(p)
    p.add_argument("--n-scenes", dest="n_scenes", type=int, default=None)
    p.add_argument("--eval-items", dest="eval_items", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain-decoder", help="stage-0 decoder training, then freeze")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int, default=6)
    p.set_defaults(func=cmd_pretrain_decoder)

    p = sub.add_parser("train", help="stage-1 fine-tuning run")
    _add_config_flags(p, train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="the 4-row objective grid x seeds")
    _add_config_flags(p, train=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per row")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on benchmark suites")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", choices=("swap", "replace", "paraphrase", "all"), default="all")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="join per-epoch metrics across runs")
    p.add_argument("metrics_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"compolab {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"compolab {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
