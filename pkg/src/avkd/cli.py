"""``avkd`` command line: data generation, teacher extraction, codebooks,
pretraining, finetuning, probing and evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error (one-line message on
stderr). Every command that writes a directory echoes the effective run
config into it as ``run.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container
from .codebook import fit_kmeans, save_codebook
from .distill import ALL, LOSS_VARIANTS, MASKED_ONLY, MetricsWriter, finetune, frame_accuracy, init_classifier, pretrain
from .pipeline import RunConfig, build_tasks, heldout_corpus, make_student, tasks_from_files
from .probe import (collect_unit_representations, cross_modal_gap, distance_matrix, export_embeddings,
                    write_distance_csv)
from .student import AUDIO_ONLY, MODES, VIDEO_ONLY, load_checkpoint, save_checkpoint
from .synthdata import generate_corpus, load_corpus, load_corpus_config, save_corpus
from .teacher import build_bank, load_bank, save_bank

RUN_JSON = "run.json"
CLASSIFIER = "classifier.avkd"

USAGE_ERROR, RUNTIME_ERROR = 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _run_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _echo(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / RUN_JSON)


def _csv_list(text, cast=str):
    return [cast(x) for x in text.split(",") if x.strip()]


def _snr(text):
    return math.inf if text.strip().lower() in ("inf", "clean") else float(text)


# --- commands --------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _run_config(args)
    out = Path(args.out)
    save_corpus(generate_corpus(cfg.corpus), out / "train", cfg.corpus)
    save_corpus(heldout_corpus(cfg.corpus, cfg.heldout_utterances), out / "heldout", cfg.corpus)
    _echo(cfg, out)
    print(f"wrote {cfg.corpus.num_utterances} training and {cfg.heldout_utterances} held-out utterances to {out}")


def _teacher(cfg: RunConfig, name):
    for t in cfg.teachers:
        if t.name == name:
            return t
    raise ValueError(f"no teacher named {name!r} in config (have {[t.name for t in cfg.teachers]})")


def cmd_extract_teacher(args):
    cfg = _run_config(args)
    tcfg = _teacher(cfg, args.teacher)
    if args.last_k is not None:
        tcfg = replace(tcfg, last_k=args.last_k)
        cfg.teachers = [tcfg if t.name == tcfg.name else t for t in cfg.teachers]
    bank = build_bank(load_corpus(args.corpus), tcfg, store_layers=args.store_layers)
    save_bank(bank, args.out)
    _echo(cfg, args.out)
    print(f"teacher {tcfg.name}: {len(bank.reps)} utterances, last_k={tcfg.last_k} -> {args.out}")


def cmd_kmeans(args):
    cfg = _run_config(args)
    n = args.num_clusters if args.num_clusters is not None else cfg.num_clusters
    seed = args.seed if args.seed is not None else cfg.kmeans_seed
    restarts = args.restarts if args.restarts is not None else cfg.kmeans_restarts
    cb = fit_kmeans(load_bank(args.bank).frames(), n, seed=seed, n_init=restarts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(cb, out)
    _echo(cfg, out.parent)
    print(f"inertia {cb.inertia!r} ({cb.num_samples} frames, N={n}) -> {out}")


def _tasks(cfg: RunConfig, corpus, args):
    banks, codebooks = args.banks or [], args.codebooks or []
    if banks or codebooks:
        return tasks_from_files(banks, codebooks, cfg.train.tau_prime)
    return build_tasks(corpus, cfg.teachers, cfg.train.tau_prime, cfg.num_clusters,
                       cfg.kmeans_seed, cfg.kmeans_restarts)


def _train_overrides(cfg: RunConfig, args):
    kw = {}
    for flag, field in (("kd_region", "kd_region"), ("loss", "losses"), ("steps", "steps"), ("lr", "lr"),
                        ("tau_prime", "tau_prime"), ("lam", "lam"), ("n_freeze", "n_freeze"),
                        ("finetune_steps", "finetune_steps"), ("clip_norm", "clip_norm")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[field] = v
    if kw:
        cfg.train = replace(cfg.train, **kw)
    return cfg


def cmd_pretrain(args):
    cfg = _train_overrides(_run_config(args), args)
    corpus = load_corpus(args.corpus)
    tasks = _tasks(cfg, corpus, args)
    model = make_student(cfg.student, tasks)
    out = Path(args.out)
    _echo(cfg, out)
    metrics = MetricsWriter(out / "metrics.csv")
    every = args.checkpoint_every

    def snapshot(m, rep):
        if every and (rep.step + 1) % every == 0 and rep.step + 1 < cfg.train.steps:
            save_checkpoint(m, out / f"checkpoint_{rep.step + 1:06d}", {"stage": "pretrain", "steps": rep.step + 1})

    try:
        reports = pretrain(model, corpus, tasks, cfg.train, metrics, on_step=snapshot)
    finally:
        metrics.close()
    save_checkpoint(model, out / "checkpoint", {"stage": "pretrain", "steps": cfg.train.steps})
    totals = np.array([r.total for r in reports])
    if totals.size:
        k = min(100, totals.size)
        print(f"loss first-{k} mean {totals[:k].mean():.4f}, last-{k} mean {totals[-k:].mean():.4f}")
    print(f"checkpoint -> {out / 'checkpoint'}")


def save_classifier(cls, path):
    container.write_tensors(path, [cls["cls.w"], cls["cls.b"]])


def load_classifier(path):
    w, b = container.read_tensors(path)
    return {"cls.w": w, "cls.b": b.reshape(-1)}


def cmd_finetune(args):
    cfg = _train_overrides(_run_config(args), args)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    corpus = load_corpus(args.corpus)
    n = args.utterances if args.utterances is not None else cfg.finetune_utterances
    labelled = corpus[:n]
    tasks = _tasks(cfg, corpus, args) if cfg.train.lam > 0 else None
    if model is None:
        model = make_student(cfg.student, tasks or _tasks(cfg, corpus, args))
    units = cfg.corpus.num_units
    ccfg = load_corpus_config(args.corpus)
    if ccfg is not None:
        units = ccfg.num_units
    cls = init_classifier(model.config.encoder_dim, units, cfg.train.seed)
    out = Path(args.out)
    _echo(cfg, out)
    metrics = MetricsWriter(out / "metrics.csv")
    try:
        finetune(model, cls, labelled, cfg.train, tasks, metrics)
    finally:
        metrics.close()
    save_checkpoint(model, out / "checkpoint", {"stage": "finetune", "steps": cfg.train.finetune_steps})
    save_classifier(cls, out / "checkpoint" / CLASSIFIER)
    print(f"finetuned on {len(labelled)} utterances -> {out / 'checkpoint'}")


def cmd_probe(args):
    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    layers = _csv_list(args.layers, int) if args.layers else list(range(model.config.num_blocks + 1))
    modes = _csv_list(args.modes)
    out = Path(args.out)
    _echo(cfg, out)
    ccfg = load_corpus_config(args.corpus)
    units = ccfg.num_units if ccfg else 1 + max(int(u.unit_labels.max()) for u in corpus)
    tables = {m: collect_unit_representations(model, corpus, m, layers, units) for m in modes}
    for m, table in tables.items():
        for l in table.layers:
            write_distance_csv(distance_matrix(table, l), out / f"distance_{m}_layer{l}.csv")
    rows = export_embeddings(list(tables.values()), out / "embeddings.avkd")
    if AUDIO_ONLY in tables and VIDEO_ONLY in tables:
        with open(out / "gap.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["layer", "gap"])
            for l in layers:
                gap = cross_modal_gap(tables[AUDIO_ONLY], tables[VIDEO_ONLY], l)
                w.writerow([l, repr(gap)])
                print(f"layer {l}: audio/video gap {gap:.4f}")
    print(f"{rows} embedding rows -> {out / 'embeddings.avkd'}")


def cmd_eval(args):
    cfg = _run_config(args)
    ckpt = Path(args.checkpoint)
    model = load_checkpoint(ckpt)
    cls = load_classifier(ckpt / CLASSIFIER)
    corpus = load_corpus(args.corpus)
    snrs = _csv_list(args.snr, _snr)
    modes = _csv_list(args.modes)
    seed = cfg.train.seed
    out = Path(args.out)
    _echo(cfg, out)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["snr_db", "mode", "accuracy"])
        for snr in snrs:
            for m in modes:
                acc = frame_accuracy(model, cls, corpus, m, snr, seed)
                w.writerow([repr(snr), m, repr(acc)])
                print(f"snr {snr:>6} dB  {m:<5}  accuracy {acc:.4f}")


# --- parser ----------------------------------------------------------------

def _modes(text):
    modes = _csv_list(text)
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {list(MODES)}, got {text!r}")
    return text


def build_parser():
    p = _Parser(prog="avkd", description="Distil frozen speech teachers into an audio-visual student.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override every run-level seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("gen-data", cmd_gen_data, "generate a synthetic corpus (train + held-out)")
    sp.add_argument("--out", required=True)

    sp = command("extract-teacher", cmd_extract_teacher, "build a teacher bank from a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--teacher", required=True, help="teacher name from the config")
    sp.add_argument("--store-layers", action="store_true", help="keep every layer output")
    sp.add_argument("--last-k", type=int, help="override the number of aggregated layers")
    sp.add_argument("--out", required=True)

    sp = command("kmeans", cmd_kmeans, "fit a codebook on a teacher bank")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--num-clusters", type=int)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--out", required=True, help="codebook file")

    def train_flags(sp):
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--banks", nargs="*", help="teacher bank dirs (built in-process when omitted)")
        sp.add_argument("--codebooks", nargs="*", help="codebook files, one per bank")
        sp.add_argument("--loss", choices=sorted(LOSS_VARIANTS))
        sp.add_argument("--kd-region", choices=[ALL, MASKED_ONLY])
        sp.add_argument("--tau-prime", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--clip-norm", type=float)
        sp.add_argument("--out", required=True)

    sp = command("pretrain", cmd_pretrain, "distillation pretraining")
    train_flags(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--checkpoint-every", type=int, help="also save checkpoint_<step>/ every N steps")

    sp = command("finetune", cmd_finetune, "supervised finetuning with auxiliary distillation")
    train_flags(sp)
    sp.add_argument("--checkpoint", help="pretrained checkpoint dir (random init when omitted)")
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--n-freeze", type=int)
    sp.add_argument("--finetune-steps", type=int)
    sp.add_argument("--utterances", type=int, help="number of labelled utterances")

    sp = command("probe", cmd_probe, "unit distance matrices, audio/video gaps, embedding export")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--layers", help="comma-separated layer indices (default: all)")
    sp.add_argument("--modes", type=_modes, default=f"{AUDIO_ONLY},{VIDEO_ONLY}")
    sp.add_argument("--out", required=True)

    sp = command("eval", cmd_eval, "frame accuracy over SNRs and input modes")
    sp.add_argument("--checkpoint", required=True, help="finetuned checkpoint dir")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--snr", default="inf,10,5,0,-5,-10", help="comma-separated dB values; inf = clean")
    sp.add_argument("--modes", type=_modes, default=",".join(MODES))
    sp.add_argument("--out", required=True)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return USAGE_ERROR
    try:
        args.fn(args)
    except (ValueError, OSError, FloatingPointError, KeyError, json.JSONDecodeError, TypeError) as e:
        print(f"avkd {args.command}: error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
