"""Command-line entry point: ``dinospeech <subcommand> [flags]``.

Exit status: 0 on success, 2 on configuration or input errors, 3 on
numerical divergence.  Every subcommand writes its resolved config as
``config.ini`` in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import formats, nn
from .augment import Utterance, synth_corpus
from .backend import PLDABackend, cosine_scores
from .clustering import iterate_pipeline, pseudo_label
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import embed_features, prepare_utterances, utterance_features
from .dino import train_dino
from .metrics import TrialScores, accuracy, det_sweep, eer, make_trials, min_dcf
from .supervised import finetune, predict, train_supervised

HISTORY_COLUMNS = ["epoch", "loss", "entropy", "max_prob", "center_norm", "lambda", "lr"]


class CliError(Exception):
    pass


# --- helpers -----------------------------------------------------------------------


def load_corpus(manifest) -> list:
    try:
        records = formats.read_manifest(manifest)
    except OSError as exc:
        raise CliError(f"cannot read manifest {manifest}: {exc}") from exc
    return [Utterance(utt, spk, attr, formats.read_wav(wav)) for utt, spk, attr, wav in records]


def dense_labels(values) -> tuple:
    keys = sorted(set(values))
    index = {k: i for i, k in enumerate(keys)}
    return [index[v] for v in values], keys


def write_rows(path, rows, columns=None) -> None:
    rows = list(rows)
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: formats.fmt(v) if isinstance(v, float) else v for k, v in r.items()})


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(path) -> dict:
    try:
        params, _ = formats.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc
    return params


def _save(out: Path, name: str, params: dict, cfg_text: str) -> None:
    formats.save_checkpoint(out / name, params, formats.config_hash(cfg_text))


# --- subcommands -------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    corpus = synth_corpus(cfg.synth)
    wav_dir = out / "wav"
    wav_dir.mkdir(exist_ok=True)
    records = []
    for u in corpus:
        formats.write_wav(wav_dir / f"{u.utt_id}.wav", u.wave)
        records.append((u.utt_id, u.speaker_id, u.attr_class, f"wav/{u.utt_id}.wav"))
    formats.write_manifest(out / "manifest.txt", records)


def cmd_train_dino(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    corpus = load_corpus(args.corpus)
    state, history = train_dino(corpus, cfg.dino, cfg.seed, cfg.features, cfg.augment)
    _save(out, "student.ckpt", state.student, cfg_text)
    _save(out, "teacher.ckpt", state.teacher, cfg_text)
    write_rows(out / "history.csv", history, HISTORY_COLUMNS)


def cmd_train_xvector(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    corpus = load_corpus(args.corpus)
    if args.labels:
        raw = formats.read_labels(args.labels)
    else:
        raw = {u.utt_id: u.speaker_id for u in corpus}
    ids = list(raw)
    dense, _ = dense_labels([raw[i] for i in ids])
    model = train_supervised(corpus, dict(zip(ids, dense)), cfg.encoder, cfg.aam, cfg.supervised, cfg.seed,
                             cfg.features, cfg.augment)
    _save(out, "model.ckpt", model.params, cfg_text)
    write_rows(out / "history.csv", model.history)


def cmd_finetune(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    corpus = load_corpus(args.corpus)
    labels = {u.utt_id: u.attr_class for u in corpus}
    n_classes = len(set(labels.values()))
    model = finetune(_checkpoint(args.init), corpus, labels, n_classes, cfg.finetune, cfg.seed,
                     feat_cfg=cfg.features, policy=cfg.augment)
    _save(out, "model.ckpt", model.params, cfg_text)
    write_rows(out / "history.csv", model.history)
    if args.test_corpus:
        test = prepare_utterances(load_corpus(args.test_corpus), cfg.features)
        preds = predict(model.params, [utterance_features(u, cfg.features) for u in test])
        acc = accuracy(preds, [u.attr_class for u in test])
        write_json(out / "metrics.json", {"accuracy": acc, "chunk_len_s": cfg.finetune.chunk_len_s,
                                          "pad_mode": cfg.finetune.pad_mode, "strategy": cfg.finetune.strategy,
                                          "loss": cfg.finetune.loss, "n_test": len(test)})


def cmd_extract(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    params = _checkpoint(args.model)
    utts = prepare_utterances(load_corpus(args.corpus), cfg.features)
    emb = embed_features(params, [utterance_features(u, cfg.features) for u in utts])
    ids = [u.utt_id for u in utts]
    formats.write_embeddings(out / "embeddings.txt", ids, emb)
    formats.write_labels(out / "speakers.txt", {u.utt_id: u.speaker_id for u in utts})
    trials = make_trials(ids, [u.speaker_id for u in utts], cfg.eval.n_target_per_utt,
                         cfg.eval.n_nontarget_per_utt, cfg.seed)
    formats.write_trials(out / "trials.txt", trials)


def cmd_score(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    ids, emb = formats.read_embeddings(args.embeddings)
    by_id = dict(zip(ids, emb))
    trials = formats.read_trials(args.trials)
    missing = {t[i] for t in trials for i in (0, 1)} - set(by_id)
    if missing:
        raise CliError(f"trial ids without embeddings: {sorted(missing)[:5]}")
    if args.backend == "cosine":
        scorer = cosine_scores
    else:
        if args.train_embeddings:
            t_ids, t_emb = formats.read_embeddings(args.train_embeddings)
            spk = formats.read_labels(args.train_labels)
            backend = PLDABackend.fit(t_emb, [spk[i] for i in t_ids], cfg.backend.plda_dim,
                                      cfg.backend.plda_iters, cfg.backend.plda_init)
            backend.save(args.model)
        else:
            backend = PLDABackend.load(args.model)
        scorer = backend.score
    enroll = np.array([by_id[t[0]] for t in trials])
    test = np.array([by_id[t[1]] for t in trials])
    scores = scorer(enroll, test)
    formats.write_scores(out / "scores.txt", [(t[0], t[1], s) for t, s in zip(trials, scores)])


def cmd_cluster_iterate(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    corpus = load_corpus(args.corpus)
    heldout = load_corpus(args.heldout) if args.heldout else None
    try:
        params, metrics = iterate_pipeline(corpus, _checkpoint(args.model), cfg.cluster, cfg.seed, heldout,
                                           cfg.features)
    except nn.DivergenceError as exc:
        _save(out, "last_good.ckpt", exc.params, cfg_text)
        write_rows(out / "cycles.csv", exc.metrics)
        raise
    _save(out, "model.ckpt", params, cfg_text)
    write_rows(out / "cycles.csv", metrics)
    final = pseudo_label(corpus, params, cfg.cluster.kmeans_k, cfg.cluster.ahc_clusters, cfg.seed, cfg.features)
    formats.write_labels(out / "pseudo_labels.txt", final.labels)


def cmd_eval(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    scores = {(e, t): s for e, t, s in formats.read_scores(args.scores)}
    trials = formats.read_trials(args.trials)
    try:
        values = [scores[(t[0], t[1])] for t in trials]
    except KeyError as exc:
        raise CliError(f"no score for trial {exc}") from exc
    ts = TrialScores(values, [t[2] == "target" for t in trials])
    try:
        ts.check_both_classes()
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    result = {"eer": eer(ts), "min_dcf": min_dcf(ts, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa),
              "n_target": ts.n_target, "n_nontarget": ts.n_nontarget}
    write_json(out / "eval.json", result)
    sweep = det_sweep(ts)
    write_rows(out / "det.csv", [{"threshold": float(a), "p_fa": float(b), "p_miss": float(c)} for a, b, c in sweep])
    print(json.dumps(result, sort_keys=True))


def cmd_report(args, cfg: RunConfig, out: Path, cfg_text: str) -> None:
    """Collect every ``*.json`` result below the given run directories into one CSV."""
    rows = []
    for run in args.runs:
        for path in sorted(Path(run).rglob("*.json")):
            with open(path) as fh:
                data = json.load(fh)
            rows.append({"run": str(path.parent), "file": path.name, **data})
    if not rows:
        raise CliError("no result files found")
    keys = [k for k in ("strategy", "loss", "pad_mode", "chunk_len_s") if any(k in r for r in rows)]
    write_rows(out / "report.csv", rows)
    if "accuracy" in rows[0] and keys:
        groups = {}
        for r in rows:
            groups.setdefault(tuple(r.get(k) for k in keys), []).append(r["accuracy"])
        summary = [{**dict(zip(keys, g)), "mean_accuracy": float(np.mean(v)), "n_runs": len(v)}
                   for g, v in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0])))]
        write_rows(out / "summary.csv", summary)


COMMANDS = {
    "synth": cmd_synth,
    "train-dino": cmd_train_dino,
    "train-xvector": cmd_train_xvector,
    "finetune": cmd_finetune,
    "extract": cmd_extract,
    "score": cmd_score,
    "cluster-iterate": cmd_cluster_iterate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dinospeech", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p = sub.add_parser("train-dino", parents=[common], help="self-supervised training")
    p.add_argument("--corpus", required=True)
    p = sub.add_parser("train-xvector", parents=[common], help="supervised AAM training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", help="pseudo-label file; defaults to manifest speakers")
    p = sub.add_parser("finetune", parents=[common], help="attribute fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.add_argument("--test-corpus")
    p.add_argument("--strategy", choices=["ft1", "ft2"])
    p.add_argument("--loss", choices=["ce", "aam"])
    p.add_argument("--chunk-len", type=float)
    p.add_argument("--pad", choices=["zero", "repeat"])
    p.add_argument("--augment", choices=["on", "off"])
    p = sub.add_parser("extract", parents=[common], help="utterance embeddings")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p = sub.add_parser("score", parents=[common], help="score a trial list")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--backend", choices=["cosine", "plda"], default="cosine")
    p.add_argument("--model", help="PLDA backend file (written when --train-embeddings is given)")
    p.add_argument("--train-embeddings")
    p.add_argument("--train-labels")
    p = sub.add_parser("cluster-iterate", parents=[common], help="pseudo-label retraining loop")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="initial encoder checkpoint")
    p.add_argument("--heldout", help="manifest for per-cycle EER")
    p = sub.add_parser("eval", parents=[common], help="EER / minDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p = sub.add_parser("report", parents=[common], help="aggregate run results")
    p.add_argument("runs", nargs="+")
    return ap


def _apply_flags(args, cfg: RunConfig) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
    if args.command == "finetune":
        ft = cfg.finetune
        overrides = {"strategy": args.strategy, "loss": args.loss, "chunk_len_s": args.chunk_len,
                     "pad_mode": args.pad, "augment": None if args.augment is None else args.augment == "on"}
        cfg.finetune = dataclasses.replace(ft, **{k: v for k, v in overrides.items() if v is not None})
    if args.command == "score" and args.backend == "plda":
        if not args.model:
            raise ConfigError("--backend plda needs --model")
        if args.train_embeddings and not args.train_labels:
            raise ConfigError("--train-embeddings needs --train-labels")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    where = args.config or "<defaults>"
    try:
        cfg = _apply_flags(args, load_config(args.config))
        out = _out(args)
        cfg_text = dump_config(cfg)
        (out / "config.ini").write_text(cfg_text)
        COMMANDS[args.command](args, cfg, out, cfg_text)
    except (ConfigError, CliError) as exc:
        print(f"dinospeech {args.command}: config {where}: {exc}", file=sys.stderr)
        return 2
    except (nn.DivergenceError, FloatingPointError) as exc:
        print(f"dinospeech {args.command}: config {where}: numerical divergence: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"dinospeech {args.command}: config {where}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
