"""Command-line front end for the pruning pipeline.

Every subcommand reads JSON/JSONL/tensor-archive inputs, writes its outputs
plus a manifest listing sha256 digests of everything consumed and produced,
and exits 0 on success, 1 on operational failure, 2 on bad usage.  Defaults
can live in a JSON file passed as --config; explicit flags win over the file,
the file wins over built-ins.  Outputs carry no timestamps, so rerunning a
command on identical inputs reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import archive
from .calibration import CalibrationCorpus, extract_features, load_corpus, save_corpus
from .compensation import DEFAULT_RANK, naive_prune, scp_prune
from .errors import LayerslimError, ParameterError
from .harness import (
    evaluate,
    gap_report,
    relative_accuracy,
    seed_study,
    similarity_heatmap,
)
from .localizer import enumerate_oracle, make_plan, score_layers
from .model import (
    ModelConfig,
    PrunedModel,
    forward,
    init_model,
    load_model,
    save_model,
)
from .tasks import MajorityTask
from .token_importance import DEFAULT_KEEP_RATIO, score_records, score_tokens
from .training import train_toy

PACKAGE_VERSION = "0.1.0"

MODEL_DEFAULTS = {
    "vocab_size": 32,
    "dim": 64,
    "layers": 12,
    "heads": 4,
    "mlp_hidden": 128,
    "max_seq": 16,
    "model_seed": 1234,
    "visual_len": 9,
    "margin": 2,
    "calib_samples": 256,
    "calib_seed": 4242,
    "eval_samples": 512,
    "eval_seed": 9999,
}

TRAIN_DEFAULTS = {
    **MODEL_DEFAULTS,
    "steps": 400,
    "lr": 2e-3,
    "batch_size": 32,
    "train_samples": 4096,
    "train_seed": 0,
}

DEFAULTS = {
    "init": dict(MODEL_DEFAULTS),
    "train": dict(TRAIN_DEFAULTS),
    "extract": {"limit": 256, "corpus_seed": 0, "pool": "none"},
    "score-tokens": {"p": DEFAULT_KEEP_RATIO, "limit": 256, "corpus_seed": 0},
    "localize": {
        "policy": "tis", "ratio": 0.25, "window": None, "p": DEFAULT_KEEP_RATIO,
        "limit": 256, "corpus_seed": 0, "table": False,
    },
    "prune": {
        "policy": "tis", "ratio": 0.25, "rank": DEFAULT_RANK, "window": None,
        "p": DEFAULT_KEEP_RATIO, "limit": 256, "corpus_seed": 0,
        "no_compensate": False,
    },
    "eval": {"reps": 3, "batch_size": 64, "limit": None, "corpus_seed": 0,
             "baseline": None},
    "heatmap": {"limit": 256, "corpus_seed": 0},
    "seed-study": {
        "ratios": "0,0.05,0.1,0.2", "seeds": 10, "window": None,
        "limit": None, "corpus_seed": 0, "reps": 1,
    },
    "enum-oracle": {
        "count": 2, "window": None, "budget": 2000, "limit": 256,
        "corpus_seed": 0, "eval_limit": None,
    },
    "gap-report": {"limit": 256, "corpus_seed": 0},
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def _write_manifest(path: Path, command: str, params: dict,
                    inputs: dict, outputs: list) -> None:
    manifest = {
        "package": f"layerslim {PACKAGE_VERSION}",
        "command": command,
        "parameters": {k: v for k, v in sorted(params.items())},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
    }
    _write_json(path, manifest)


def _parse_window(text):
    if text is None:
        return None
    try:
        lo, hi = text.split(":")
        return (int(lo), int(hi))
    except ValueError as exc:
        raise ParameterError(f"window must look like LO:HI, got {text!r}") from exc


def _parse_ratios(text):
    try:
        return tuple(float(x) for x in str(text).split(",") if x != "")
    except ValueError as exc:
        raise ParameterError(f"bad ratio list {text!r}") from exc


def _parse_layers(text):
    try:
        return tuple(int(x) for x in str(text).split(",") if x != "")
    except ValueError as exc:
        raise ParameterError(f"bad layer list {text!r}") from exc


def _merge_params(command: str, args: argparse.Namespace) -> dict:
    """Built-in defaults, then the --config file, then explicit flags."""
    merged = dict(DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{config_path}: not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ParameterError(f"{config_path}: config must be a JSON object")
        for key, value in loaded.items():
            if key not in merged:
                raise ParameterError(
                    f"{config_path}: unknown option {key!r} for {command}"
                )
            merged[key] = value
    for key in merged:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            merged[key] = value
    merged["threads"] = getattr(args, "threads", None) or 1
    return merged


def _model_config(p: dict) -> ModelConfig:
    return ModelConfig(
        vocab_size=int(p["vocab_size"]),
        dim=int(p["dim"]),
        n_layers=int(p["layers"]),
        n_heads=int(p["heads"]),
        mlp_hidden=int(p["mlp_hidden"]),
        max_seq=int(p["max_seq"]),
        seed=int(p["model_seed"]),
    )


def _task(p: dict) -> MajorityTask:
    return MajorityTask(
        vocab_size=int(p["vocab_size"]),
        visual_len=int(p["visual_len"]),
        margin=int(p["margin"]),
    )


def _emit_world(outdir: Path, model, p: dict, command: str) -> None:
    task = _task(p)
    outdir.mkdir(parents=True, exist_ok=True)
    model_path = outdir / "model.starch"
    calib_path = outdir / "calib.jsonl"
    eval_path = outdir / "eval.jsonl"
    save_model(model, model_path)
    save_corpus(task.generate(int(p["calib_samples"]), seed=int(p["calib_seed"])),
                calib_path)
    save_corpus(task.generate(int(p["eval_samples"]), seed=int(p["eval_seed"])),
                eval_path)
    _write_manifest(outdir / "manifest.json", command, p, inputs={},
                    outputs=[model_path, calib_path, eval_path])


def cmd_init(args) -> int:
    p = _merge_params("init", args)
    model = init_model(_model_config(p))
    _emit_world(Path(args.out), model, p, "init")
    return 0


def cmd_train(args) -> int:
    p = _merge_params("train", args)
    model = init_model(_model_config(p))
    trained = train_toy(
        model, _task(p),
        steps=int(p["steps"]), lr=float(p["lr"]),
        batch_size=int(p["batch_size"]), n_train=int(p["train_samples"]),
        seed=int(p["train_seed"]),
    )
    _emit_world(Path(args.out), trained, p, "train")
    return 0


def _load_calib(path, p) -> CalibrationCorpus:
    limit = p["limit"]
    return load_corpus(path, limit=None if limit is None else int(limit),
                       seed=int(p["corpus_seed"]))


def cmd_extract(args) -> int:
    p = _merge_params("extract", args)
    model = load_model(args.model)
    corpus = _load_calib(args.corpus, p)
    layers = _parse_layers(args.layers)
    feats = extract_features(model, corpus, layers, pool=p["pool"])
    tensors = {f"layer_{l:02d}": feats[l].values for l in feats}
    any_prov = next(iter(feats.values())).provenance
    meta = {
        "format": "layerslim-features",
        "layers": sorted(int(l) for l in feats),
        "pool": p["pool"],
        "corpus": corpus.digest(),
        "provenance": [[sid, pos, mod] for sid, pos, mod in any_prov],
    }
    out = Path(args.out)
    archive.save_tensors(out, meta, tensors)
    _write_manifest(Path(str(out) + ".manifest.json"), "extract", p,
                    inputs=[Path(args.model), Path(args.corpus)], outputs=[out])
    return 0


def cmd_score_tokens(args) -> int:
    p = _merge_params("score-tokens", args)
    model = load_model(args.model)
    corpus = _load_calib(args.corpus, p)
    layer = int(args.layer)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        for stream in corpus.samples:
            trace = forward(model, stream, capture=True)
            sheet = score_tokens(trace, stream, layer, p=float(p["p"]))
            for rec in score_records(sheet, stream):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_manifest(Path(str(out) + ".manifest.json"), "score-tokens", p,
                    inputs=[Path(args.model), Path(args.corpus)], outputs=[out])
    return 0


def _report_json(report, plan) -> dict:
    return {
        "scores": {str(l): report.scores[l] for l in sorted(report.scores)},
        "ranking": list(report.ranking),
        "policy": report.policy,
        "p": report.p,
        "window": list(report.window),
        "n_layers": report.n_layers,
        "corpus": report.corpus_id,
        "skipped_samples": report.skipped_samples,
        "plan": {
            "pruned": list(plan.pruned),
            "retained": list(plan.retained),
            "ratio": plan.ratio,
            "count": plan.count,
        },
    }


def cmd_localize(args) -> int:
    p = _merge_params("localize", args)
    model = load_model(args.model)
    corpus = _load_calib(args.corpus, p)
    report = score_layers(model, corpus, policy=p["policy"],
                          window=_parse_window(p["window"]), p=float(p["p"]))
    plan = make_plan(report, float(p["ratio"]))
    out = Path(args.out)
    _write_json(out, _report_json(report, plan))
    if p["table"]:
        sys.stdout.write(report.to_table())
    _write_manifest(Path(str(out) + ".manifest.json"), "localize", p,
                    inputs=[Path(args.model), Path(args.corpus)], outputs=[out])
    return 0


def cmd_prune(args) -> int:
    p = _merge_params("prune", args)
    model = load_model(args.model)
    corpus = _load_calib(args.corpus, p)
    report = score_layers(model, corpus, policy=p["policy"],
                          window=_parse_window(p["window"]), p=float(p["p"]))
    plan = make_plan(report, float(p["ratio"]))
    if p["no_compensate"]:
        pruned = naive_prune(model, plan)
    else:
        pruned = scp_prune(model, corpus, plan, rank=int(p["rank"]))
    out = Path(args.out)
    save_model(pruned, out)
    _write_manifest(Path(str(out) + ".manifest.json"), "prune", p,
                    inputs=[Path(args.model), Path(args.corpus)], outputs=[out])
    return 0


def cmd_eval(args) -> int:
    p = _merge_params("eval", args)
    model = load_model(args.model)
    corpus = _load_calib(args.eval_set, p)
    result = evaluate(model, corpus.samples, reps=int(p["reps"]),
                      batch_size=int(p["batch_size"]))
    obj = result.to_json()
    inputs = [Path(args.model), Path(args.eval_set)]
    if p["baseline"]:
        base = load_model(p["baseline"])
        base_res = evaluate(base, corpus.samples, reps=1)
        obj["baseline_accuracy"] = base_res.accuracy
        obj["relative_accuracy"] = relative_accuracy(
            result.accuracy, base_res.accuracy
        )
        inputs.append(Path(p["baseline"]))
    out = Path(args.out)
    _write_json(out, obj)
    _write_manifest(Path(str(out) + ".manifest.json"), "eval", p,
                    inputs=inputs, outputs=[out])
    return 0


def cmd_heatmap(args) -> int:
    p = _merge_params("heatmap", args)
    model = load_model(args.model)
    corpus = _load_calib(args.corpus, p)
    grid = similarity_heatmap(model, corpus)
    obj = {
        "n_layers": grid.shape[0],
        "grid": [[float(v) for v in row] for row in grid],
        "corpus": corpus.digest(),
    }
    out = Path(args.out)
    _write_json(out, obj)
    _write_manifest(Path(str(out) + ".manifest.json"), "heatmap", p,
                    inputs=[Path(args.model), Path(args.corpus)], outputs=[out])
    return 0


def cmd_seed_study(args) -> int:
    p = _merge_params("seed-study", args)
    model = load_model(args.model)
    corpus = _load_calib(args.eval_set, p)
    study = seed_study(
        model, corpus.samples, ratios=_parse_ratios(p["ratios"]),
        n_seeds=int(p["seeds"]), window=_parse_window(p["window"]),
        reps=int(p["reps"]),
    )
    out = Path(args.out)
    _write_json(out, study.to_json())
    _write_manifest(Path(str(out) + ".manifest.json"), "seed-study", p,
                    inputs=[Path(args.model), Path(args.eval_set)], outputs=[out])
    return 0


def cmd_enum_oracle(args) -> int:
    p = _merge_params("enum-oracle", args)
    model = load_model(args.model)
    corpus = _load_calib(args.corpus, p)
    limit = p["eval_limit"]
    eval_corpus = load_corpus(args.eval_set,
                              limit=None if limit is None else int(limit),
                              seed=int(p["corpus_seed"]))

    def eval_fn(m, plan, _corpus):
        return evaluate(naive_prune(m, plan), eval_corpus.samples, reps=1).accuracy

    best, table = enumerate_oracle(
        model, corpus, eval_fn, count=int(p["count"]),
        window=_parse_window(p["window"]), budget=int(p["budget"]),
    )
    obj = {
        "count": int(p["count"]),
        "window": list(best.window),
        "best": {"pruned": list(best.pruned), "accuracy": max(m for _, m in table)},
        "table": [
            {"pruned": list(combo), "accuracy": metric} for combo, metric in table
        ],
    }
    out = Path(args.out)
    _write_json(out, obj)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "enum-oracle", p,
        inputs=[Path(args.model), Path(args.corpus), Path(args.eval_set)],
        outputs=[out],
    )
    return 0


def cmd_gap_report(args) -> int:
    p = _merge_params("gap-report", args)
    original = load_model(args.model)
    pruned = load_model(args.pruned)
    if not isinstance(pruned, PrunedModel):
        raise ParameterError(f"{args.pruned}: archive carries no pruning provenance")
    corpus = _load_calib(args.corpus, p)
    report = gap_report(original, pruned, corpus)
    out = Path(args.out)
    _write_json(out, report.to_json())
    _write_manifest(
        Path(str(out) + ".manifest.json"), "gap-report", p,
        inputs=[Path(args.model), Path(args.pruned), Path(args.corpus)],
        outputs=[out],
    )
    return 0


def _add_common(sub, with_corpus=True):
    sub.add_argument("--model", required=True, help="model archive path")
    if with_corpus:
        sub.add_argument("--corpus", required=True, help="calibration corpus JSONL")
    sub.add_argument("--out", required=True, help="output path")
    sub.add_argument("--config", help="JSON file with default parameters")
    sub.add_argument("--threads", type=int, help="worker count (recorded; the "
                     "batched forward is already deterministic)")
    sub.add_argument("--limit", type=int, help="corpus sample cap")
    sub.add_argument("--corpus-seed", type=int, dest="corpus_seed",
                     help="corpus shuffle seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="layerslim",
        description="Attention-guided layer pruning with subspace repair "
                    "for toy residual transformers.",
    )
    sp = ap.add_subparsers(dest="command", required=True)

    for name, fn in (("init", cmd_init), ("train", cmd_train)):
        sub = sp.add_parser(name, help=f"{name} a toy model and emit its corpora")
        sub.add_argument("--out", required=True, help="output directory")
        sub.add_argument("--config", help="JSON file with default parameters")
        sub.add_argument("--threads", type=int)
        for key in ("vocab_size", "dim", "layers", "heads", "mlp_hidden",
                    "max_seq", "model_seed", "visual_len", "margin",
                    "calib_samples", "calib_seed", "eval_samples", "eval_seed"):
            sub.add_argument(f"--{key.replace('_', '-')}", type=int, dest=key)
        if name == "train":
            sub.add_argument("--steps", type=int)
            sub.add_argument("--lr", type=float)
            sub.add_argument("--batch-size", type=int, dest="batch_size")
            sub.add_argument("--train-samples", type=int, dest="train_samples")
            sub.add_argument("--train-seed", type=int, dest="train_seed")
        sub.set_defaults(fn=fn)

    sub = sp.add_parser("extract", help="dump residual-stream features")
    _add_common(sub)
    sub.add_argument("--layers", required=True,
                     help="comma list of stream states, e.g. 0,6,12")
    sub.add_argument("--pool", choices=("none", "mean"))
    sub.set_defaults(fn=cmd_extract)

    sub = sp.add_parser("score-tokens", help="per-token attention importance")
    _add_common(sub)
    sub.add_argument("--layer", required=True, type=int)
    sub.add_argument("--p", type=float, help="keep ratio")
    sub.set_defaults(fn=cmd_score_tokens)

    sub = sp.add_parser("localize", help="score layer redundancy and plan a cut")
    _add_common(sub)
    sub.add_argument("--policy", choices=("all", "visual", "text", "tis"))
    sub.add_argument("--ratio", type=float)
    sub.add_argument("--window", help="layer range LO:HI")
    sub.add_argument("--p", type=float)
    sub.add_argument("--table", action="store_true",
                     help="also print the score table")
    sub.set_defaults(fn=cmd_localize)

    sub = sp.add_parser("prune", help="prune and optionally repair a model")
    _add_common(sub)
    sub.add_argument("--policy", choices=("all", "visual", "text", "tis"))
    sub.add_argument("--ratio", type=float)
    sub.add_argument("--rank", type=int)
    sub.add_argument("--window", help="layer range LO:HI")
    sub.add_argument("--p", type=float)
    sub.add_argument("--no-compensate", action="store_true", dest="no_compensate")
    sub.set_defaults(fn=cmd_prune)

    sub = sp.add_parser("eval", help="accuracy and throughput on a labeled set")
    sub.add_argument("--model", required=True)
    sub.add_argument("--eval-set", required=True, dest="eval_set")
    sub.add_argument("--out", required=True)
    sub.add_argument("--config", help="JSON file with default parameters")
    sub.add_argument("--threads", type=int)
    sub.add_argument("--limit", type=int)
    sub.add_argument("--corpus-seed", type=int, dest="corpus_seed")
    sub.add_argument("--reps", type=int)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--baseline", help="unpruned model for relative accuracy")
    sub.set_defaults(fn=cmd_eval)

    sub = sp.add_parser("heatmap", help="layer-output similarity grid")
    _add_common(sub)
    sub.set_defaults(fn=cmd_heatmap)

    sub = sp.add_parser("seed-study", help="random-pruning accuracy by ratio")
    sub.add_argument("--model", required=True)
    sub.add_argument("--eval-set", required=True, dest="eval_set")
    sub.add_argument("--out", required=True)
    sub.add_argument("--config", help="JSON file with default parameters")
    sub.add_argument("--threads", type=int)
    sub.add_argument("--limit", type=int)
    sub.add_argument("--corpus-seed", type=int, dest="corpus_seed")
    sub.add_argument("--ratios", help="comma list, e.g. 0,0.05,0.1,0.2")
    sub.add_argument("--seeds", type=int)
    sub.add_argument("--window", help="layer range LO:HI")
    sub.add_argument("--reps", type=int)
    sub.set_defaults(fn=cmd_seed_study)

    sub = sp.add_parser("enum-oracle", help="exhaustive best prune set")
    _add_common(sub)
    sub.add_argument("--eval-set", required=True, dest="eval_set")
    sub.add_argument("--count", type=int)
    sub.add_argument("--window", help="layer range LO:HI")
    sub.add_argument("--budget", type=int)
    sub.add_argument("--eval-limit", type=int, dest="eval_limit")
    sub.set_defaults(fn=cmd_enum_oracle)

    sub = sp.add_parser("gap-report", help="stream fidelity of a pruned model")
    _add_common(sub)
    sub.add_argument("--pruned", required=True, help="pruned model archive")
    sub.set_defaults(fn=cmd_gap_report)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except LayerslimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
