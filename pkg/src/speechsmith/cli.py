"""Command-line surface. One subcommand per stage of the pipeline.

Configuration is layered: built-in defaults, then a JSON ``--config`` file,
then explicit flags. Unknown config keys are rejected, and the effective
configuration is echoed into the output location so every run is
self-describing. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import am, ctc, ngram, pipeline, sst, unsup, wfst
from .corpus import (
    SynthSpec,
    load_lexicon,
    load_manifest,
    load_text,
    load_utterance,
    synthesize_corpus,
)
from .score import corpus_wer

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


DEFAULTS = {
    "synth": {
        "seed": 7, "vocab-size": 20, "inventory-size": 6, "dim": 8,
        "n-supervised": 80, "n-untranscribed": 160, "n-test": 40,
        "n-text-sentences": 2000, "offset-b": 1.2, "noise-a": 0.3, "noise-b": 0.45,
        "oov-test-words": 0,
    },
    "lm-train": {"order": 3, "chars": False},
    "graph": {},
    "decode": {
        "mode": "greedy", "alpha": 0.3, "beta": 0.0, "beam-size": 8,
        "beam": 16.0, "acoustic-scale": 1.0, "max-active": 2000,
    },
    "cluster": {"k": 32, "max-iters": 50, "seed": 17},
    "pretrain": {
        "context": 2, "hidden": 32, "seed": 11, "mask-prob": 0.08, "mask-span": 4,
        "lr": 0.3, "batch-size": 8, "epochs": 10, "train-seed": 13,
    },
    "finetune": {
        "context": 2, "hidden": 32, "head-seed": 19, "lr": 0.3, "batch-size": 8,
        "epochs": 15, "train-seed": 13, "seed": 11,
    },
    "sst": {
        "mode": "greedy", "iterations": 1, "alpha": 0.3, "beta": 0.0, "beam-size": 8,
        "beam": 16.0, "acoustic-scale": 1.0, "max-active": 2000, "lr": 0.3,
        "batch-size": 8, "epochs": 15, "train-seed": 13, "head-seed": 119,
    },
    "run": {},
    "score": {},
}


def build_parser() -> _Parser:
    parser = _Parser(prog="speechsmith", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, add_help=True)
        p.error = parser.error  # route subparser usage errors through exit 1
        p.add_argument("--config", help="JSON file with defaults for this command")
        return p

    p = add("synth", "generate a synthetic two-domain corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    for flag in ("seed", "vocab-size", "inventory-size", "dim", "n-supervised",
                 "n-untranscribed", "n-test", "n-text-sentences", "oov-test-words"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("offset-b", "noise-a", "noise-b"):
        p.add_argument(f"--{flag}", type=float)

    p = add("lm-train", "train a backoff n-gram model and write ARPA")
    p.add_argument("--text", required=True, help="training text, one sentence per line")
    p.add_argument("--order", type=int)
    p.add_argument("--out", required=True, help="output .arpa path")
    p.add_argument("--chars", action=argparse.BooleanOptionalAction,
                   help="model characters (spaces removed) instead of words")

    p = add("graph", "build token/lexicon/grammar transducers and compose them")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--arpa", required=True, help="word-level ARPA model")
    p.add_argument("--out", required=True, help="output directory")

    p = add("decode", "decode a manifest with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--mode", choices=sorted(sst.MODES))
    p.add_argument("--graph", help="graph base path (required for ctc-wfst)")
    p.add_argument("--char-arpa", help="character ARPA model (required for fusion)")
    p.add_argument("--out", required=True, help="output hypotheses .jsonl")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--beam", type=float)
    p.add_argument("--acoustic-scale", type=float)
    p.add_argument("--max-active", type=int)

    p = add("cluster", "embed a manifest and fit k-means pseudo-label targets")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--seed", type=int)

    p = add("pretrain", "train a fresh model on cluster targets with input masking")
    p.add_argument("--manifest", required=True)
    p.add_argument("--targets", required=True, help="targets .jsonl from cluster")
    p.add_argument("--out", required=True, help="output model checkpoint")
    for flag in ("context", "hidden", "seed", "mask-span", "batch-size", "epochs", "train-seed"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("mask-prob", "lr"):
        p.add_argument(f"--{flag}", type=float)

    p = add("finetune", "CTC-train a model on a transcribed manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--init", help="starting checkpoint; fresh init when omitted")
    p.add_argument("--out", required=True, help="output model checkpoint")
    for flag in ("context", "hidden", "head-seed", "batch-size", "epochs", "train-seed", "seed"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--lr", type=float)

    p = add("sst", "self-train on pseudotranscripts of untranscribed data")
    p.add_argument("--model", required=True, help="initial transcription model")
    p.add_argument("--supervised", required=True)
    p.add_argument("--untranscribed", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=sorted(sst.MODES))
    p.add_argument("--graph", help="graph base path (ctc-wfst mode)")
    p.add_argument("--char-arpa", help="character ARPA model (fusion mode)")
    p.add_argument("--test", action="append", default=None,
                   help="test manifest for per-iteration scoring (repeatable)")
    p.add_argument("--tau", type=float, help="score threshold; keep-all when omitted")
    for flag in ("iterations", "beam-size", "max-active", "batch-size", "epochs",
                 "train-seed", "head-seed"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("alpha", "beta", "beam", "acoustic-scale", "lr"):
        p.add_argument(f"--{flag}", type=float)

    p = add("run", "execute an experiment plan")
    p.add_argument("--plan", required=True, help="plan JSON file")
    p.add_argument("--out", help="override the plan's output directory")

    p = add("score", "word error rate of hypotheses against a reference manifest")
    p.add_argument("--ref", required=True, help="reference manifest .jsonl")
    p.add_argument("--hyp", required=True, help="hypotheses .jsonl (id, words)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--dump-alignment", action=argparse.BooleanOptionalAction,
                   help="also print human-readable alignments to stderr")

    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; unknown config keys rejected."""
    cfg = dict(DEFAULTS.get(command, {}))
    ns = {k.replace("_", "-"): v for k, v in vars(args).items() if k not in ("command", "config")}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"--config {args.config}: {e}") from e
        unknown = set(file_cfg) - set(ns)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in ns.items():
        if value is not None:
            cfg[key] = value
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise UsageError(f"missing required settings: {sorted(missing)}")
    return cfg


def _echo_config(command: str, cfg: dict, out: str | Path) -> None:
    out = Path(out)
    target = out / "config.json" if out.is_dir() else out.parent / (out.name + ".config.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump({"command": command, "config": cfg}, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_config(cfg: dict) -> am.TrainConfig:
    return am.TrainConfig(
        lr=cfg["lr"], batch_size=cfg["batch-size"], epochs=cfg["epochs"], seed=cfg["train-seed"]
    )


def _decode_params(cfg: dict, lexicon) -> sst.DecodeParams:
    params = sst.DecodeParams(
        lexicon=lexicon, alpha=cfg["alpha"], beta=cfg["beta"], beam_size=cfg["beam-size"],
        beam=cfg["beam"], acoustic_scale=cfg["acoustic-scale"], max_active=cfg["max-active"],
    )
    mode = cfg["mode"]
    if mode == "ctc-wfst":
        if not cfg.get("graph"):
            raise UsageError("--graph is required when --mode ctc-wfst")
        params.graph = wfst.load_fst(cfg["graph"])
    if mode == "fusion":
        if not cfg.get("char-arpa"):
            raise UsageError("--char-arpa is required when --mode fusion")
        params.scorer = ngram.char_lm_scorer(ngram.read_arpa(cfg["char-arpa"]), lexicon.inventory)
    return params


def cmd_synth(cfg: dict) -> int:
    spec = SynthSpec(
        vocab_size=cfg["vocab-size"], inventory_size=cfg["inventory-size"], dim=cfg["dim"],
        offset_b=cfg["offset-b"], noise_a=cfg["noise-a"], noise_b=cfg["noise-b"],
        n_supervised=cfg["n-supervised"], n_untranscribed=cfg["n-untranscribed"],
        n_test=cfg["n-test"], n_text_sentences=cfg["n-text-sentences"],
        oov_test_words=cfg["oov-test-words"], seed=cfg["seed"],
    )
    out = Path(cfg["out"])
    bundle = synthesize_corpus(spec, out)
    _echo_config("synth", cfg, out)
    print(json.dumps({
        "out": str(out), "supervised": len(bundle.supervised),
        "untranscribed": len(bundle.untranscribed),
        "test": {d: len(m) for d, m in sorted(bundle.tests.items())},
        "lexicon_words": len(bundle.lexicon.words),
    }))
    return 0


def cmd_lm_train(cfg: dict) -> int:
    sentences = load_text(cfg["text"])
    if cfg["chars"]:
        sentences = [tuple("".join(s)) for s in sentences]
    lm = ngram.train_lm(sentences, cfg["order"])
    ngram.write_arpa(lm, cfg["out"])
    _echo_config("lm-train", cfg, cfg["out"])
    print(json.dumps({"out": cfg["out"], "order": lm.order, "vocab": len(lm.vocab)}))
    return 0


def cmd_graph(cfg: dict) -> int:
    lexicon = load_lexicon(cfg["lexicon"])
    lm = ngram.read_arpa(cfg["arpa"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t_fst = wfst.build_token_fst(lexicon.inventory)
    l_fst = wfst.build_lexicon_fst(lexicon)
    g_fst = wfst.build_grammar_fst(lm, lexicon.words)
    tlg = wfst.build_tlg(t_fst, l_fst, g_fst)
    for name, fst in (("tokens", t_fst), ("lexicon", l_fst), ("grammar", g_fst), ("tlg", tlg)):
        wfst.save_fst(fst, out / name)
    _echo_config("graph", cfg, out)
    print(json.dumps({"out": str(out), "tlg_states": tlg.num_states, "tlg_arcs": tlg.num_arcs}))
    return 0


def cmd_decode(cfg: dict) -> int:
    lexicon = load_lexicon(cfg["lexicon"])
    params = _decode_params(cfg, lexicon)
    tokens = ctc.grid_tokens(lexicon.inventory)
    model = am.load_model(cfg["model"], tokens)
    manifest = load_manifest(cfg["manifest"])
    result = sst.transcribe(model, manifest, cfg["mode"], params)
    sst.save_pseudo(result.transcripts, cfg["out"])
    _echo_config("decode", cfg, cfg["out"])
    print(json.dumps({
        "out": cfg["out"], "decoded": len(result.transcripts), "failed": len(result.failed),
    }))
    return 0


def cmd_cluster(cfg: dict) -> int:
    model = am.load_model(cfg["model"])
    manifest = load_manifest(cfg["manifest"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    embeddings = unsup.embed_manifest(model, manifest)
    points = np.concatenate([embeddings[e.id] for e in manifest], axis=0)
    km = unsup.kmeans_fit(points, cfg["k"], max_iters=cfg["max-iters"], seed=cfg["seed"])
    targets = {e.id: unsup.assign(km, embeddings[e.id]) for e in manifest}
    unsup.save_centroids(km, out / "centroids.bin")
    unsup.save_targets(targets, out / "targets.jsonl")
    _echo_config("cluster", cfg, out)
    print(json.dumps({"out": str(out), "k": km.k, "distortion": km.distortion}))
    return 0


def cmd_pretrain(cfg: dict) -> int:
    manifest = load_manifest(cfg["manifest"])
    targets = unsup.load_targets(cfg["targets"])
    arch = unsup.ArchConfig(context=cfg["context"], dim_hidden=cfg["hidden"], seed=cfg["seed"])
    mask = am.InputMaskConfig(mask_prob=cfg["mask-prob"], span=cfg["mask-span"])
    model = unsup.pretrain(arch, targets, manifest, mask, _train_config(cfg))
    am.save_model(model, cfg["out"])
    _echo_config("pretrain", cfg, cfg["out"])
    print(json.dumps({"out": cfg["out"], "clusters": model.n_out}))
    return 0


def cmd_finetune(cfg: dict) -> int:
    lexicon = load_lexicon(cfg["lexicon"])
    manifest = load_manifest(cfg["manifest"])
    tokens = ctc.grid_tokens(lexicon.inventory)
    dataset = sst.ctc_dataset(manifest, lexicon)
    if cfg.get("init"):
        base = am.load_model(cfg["init"])
        model = am.swap_head(base, len(tokens), cfg["head-seed"], tokens)
    else:
        dim_in = dataset[0][0].shape[1]
        model = am.RefModel.create(
            cfg["context"], dim_in, cfg["hidden"], len(tokens), cfg["seed"], tokens
        )
    result = am.train_ctc(model, dataset, _train_config(cfg))
    am.save_model(model, cfg["out"])
    _echo_config("finetune", cfg, cfg["out"])
    print(json.dumps({
        "out": cfg["out"], "epochs": len(result.losses),
        "final_loss": result.losses[-1], "skipped": result.skipped,
    }))
    return 0


def cmd_sst(cfg: dict) -> int:
    lexicon = load_lexicon(cfg["lexicon"])
    params = _decode_params(cfg, lexicon)
    tokens = ctc.grid_tokens(lexicon.inventory)
    model = am.load_model(cfg["model"], tokens)
    supervised = load_manifest(cfg["supervised"])
    untranscribed = load_manifest(cfg["untranscribed"])
    tests = None
    if cfg.get("test"):
        tests = {}
        for i, path in enumerate(cfg["test"]):
            m = load_manifest(path)
            domains = {e.domain for e in m}
            tag = domains.pop() if len(domains) == 1 else f"test{i}"
            tests[tag] = m
    config = sst.SstConfig(
        mode=cfg["mode"], iterations=cfg["iterations"], tau=cfg.get("tau"),
        train=_train_config(cfg), head_seed=cfg["head-seed"],
    )
    run = sst.run_sst(model, supervised, untranscribed, config, params, tests=tests)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(run.models, 1):
        am.save_model(m, out / f"sst_iter{i}.am")
    for i, kept in enumerate(run.pseudo, 1):
        sst.save_pseudo(kept, out / f"pseudo_iter{i}.jsonl")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(run.report, f, indent=2, sort_keys=True)
        f.write("\n")
    _echo_config("sst", cfg, out)
    print(json.dumps(run.report))
    return 0


def cmd_run(cfg: dict) -> int:
    with open(cfg["plan"], encoding="utf-8") as f:
        plan = pipeline.ExperimentPlan.from_json(json.load(f))
    if cfg.get("out"):
        plan.out_dir = cfg["out"]
    grid = pipeline.run_plan(plan)
    _echo_config("run", cfg, Path(plan.out_dir))
    print(json.dumps({"out": plan.out_dir, "cells": grid.cells}))
    return 0


def cmd_score(cfg: dict) -> int:
    ref = load_manifest(cfg["ref"])
    hyps = {p.id: p.words for p in sst.load_pseudo(cfg["hyp"])}
    pairs = []
    domains = []
    for entry in ref:
        if entry.transcript is None:
            raise ValueError(f"reference utterance {entry.id!r} has no transcript")
        pairs.append((entry.transcript, hyps.get(entry.id, ())))
        domains.append(entry.domain)
    result = corpus_wer(pairs, domains)
    report = {
        "per_domain": result.per_domain, "pooled": result.pooled, "average": result.average,
    }
    if cfg.get("dump-alignment"):
        from .score import align

        for (r, h) in pairs:
            rep = align(r, h)
            print(" | ".join(f"{a or '*'}/{b or '*'}" for a, b in rep.pairs), file=sys.stderr)
    if cfg.get("out"):
        with open(cfg["out"], "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        _echo_config("score", cfg, cfg["out"])
    print(json.dumps(report))
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "lm-train": cmd_lm_train,
    "graph": cmd_graph,
    "decode": cmd_decode,
    "cluster": cmd_cluster,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sst": cmd_sst,
    "run": cmd_run,
    "score": cmd_score,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = effective_config(args.command, args)
        return HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
