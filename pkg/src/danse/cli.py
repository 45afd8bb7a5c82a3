"""Batch command-line surface for the adaptation pipeline.

Subcommands: gen-data, pretrain, train-dat, extract, score, eval-eer,
self-test. Exit codes: 0 success, 2 divergence abort, 3 missing
artifact, 4 malformed file or configuration. The output directory
resolves from --out, then the DANSE_WORKDIR environment variable, then
the `workdir` config key.

All randomness flows from the config seed, and no command reads the
clock, so rerunning a command with the same inputs reproduces its
artifacts byte for byte. Stage conventions: `pretrain` leaves
pretrain.ckpt and pretrain.log in its output directory; `train-dat`
looks for that checkpoint (override with --pretrain), then writes
epoch_<n>.ckpt, best.ckpt, and training.log; `extract` scores best.ckpt
(override with --ckpt) into embeddings.emb.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from danse import formats, training
from danse.config import RunConfig, load_run_config, resolved_lines
from danse.datagen import FeatureSequence, generate_corpus
from danse.formats import FormatError
from danse.model import SpeakerNet
from danse.optim import DivergenceError
from danse.verification import Trial, compute_eer, extract_embedding, \
    make_trials, score_trials


def _resolve_out(args, cfg: RunConfig) -> Path:
    out = getattr(args, "out", None) or os.environ.get("DANSE_WORKDIR") \
        or cfg.workdir
    if not out:
        raise FormatError(
            "no output directory: pass --out or set DANSE_WORKDIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_log(out: Path, command: str, cfg: RunConfig) -> None:
    lines = [f"command = {command}"] + resolved_lines(cfg)
    (out / "run.log").write_text("\n".join(lines) + "\n")


def _load_recordings(data_dir: Path, cfg: RunConfig) -> list[FeatureSequence]:
    manifest = data_dir / cfg.manifest
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    recordings = []
    for rec_id, speaker_id, domain, rel in formats.read_manifest(manifest):
        feature_path = manifest.parent / rel
        if not feature_path.exists():
            raise FileNotFoundError(
                f"feature file not found: {feature_path} (listed in {manifest})")
        frames = formats.read_feature_file(feature_path)
        recordings.append(FeatureSequence(rec_id, speaker_id, domain, frames))
    return recordings


def _num_speakers(source: list[FeatureSequence]) -> int:
    return len(training.speaker_label_map(training.filter_speakers(source)))


def _build_net(cfg: RunConfig, source: list[FeatureSequence]) -> SpeakerNet:
    return SpeakerNet(
        num_speakers=_num_speakers(source),
        config=cfg.model,
        classifier_hidden=cfg.classifier_hidden,
        discriminator_hidden=cfg.discriminator_hidden,
        seed=cfg.train.seed,
    )


def _read_trials(path: Path) -> list[Trial]:
    if not path.exists():
        raise FileNotFoundError(f"trial list not found: {path}")
    return [Trial(e, t, label) for e, t, label in formats.read_trial_list(path)]


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out(args, cfg)
    (out / "features").mkdir(exist_ok=True)
    corpus = generate_corpus(cfg.corpus)

    rows = []
    for rec in corpus.all_recordings():
        rel = f"features/{rec.recording_id}.fea"
        formats.write_feature_file(out / rel, rec.frames)
        rows.append((rec.recording_id, rec.speaker_id, rec.domain, rel))
    formats.write_manifest(out / cfg.manifest, rows)

    trials = make_trials(
        [r.recording_id for r in corpus.target_trial], corpus.trial_speaker_of)
    formats.write_trial_list(
        out / cfg.trials, [(t.enroll_id, t.test_id, t.label) for t in trials])

    _write_run_log(out, "gen-data", cfg)
    print(f"wrote {len(rows)} recordings and {len(trials)} trials under {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out(args, cfg)
    recordings = _load_recordings(Path(args.data), cfg)
    source = [r for r in recordings if r.domain == "source"]

    net = _build_net(cfg, source)
    result = training.pretrain(net, source, cfg.train)
    formats.write_checkpoint(out / "pretrain.ckpt", net.state_dict())

    lines = [
        formats.format_log_line(epoch, loss, 0.0, 0.0, lr, lr, 0.0)
        for epoch, (loss, lr) in enumerate(
            zip(result.epoch_losses, result.lrs), 1)
    ]
    (out / "pretrain.log").write_text("\n".join(lines) + "\n")
    _write_run_log(out, "pretrain", cfg)
    print(f"pretrained {len(result.epoch_losses)} epochs, "
          f"final loss {result.epoch_losses[-1]:.6f}, "
          f"final accuracy {result.epoch_accuracies[-1]:.4f}")
    return 0


def cmd_train_dat(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out(args, cfg)
    ckpt = Path(args.pretrain) if args.pretrain else out / "pretrain.ckpt"
    if not ckpt.exists():
        print(f"error: pretrain checkpoint not found: {ckpt}", file=sys.stderr)
        return 3

    data_dir = Path(args.data)
    recordings = _load_recordings(data_dir, cfg)
    source = [r for r in recordings if r.domain == "source"]
    trials = _read_trials(data_dir / cfg.trials)
    trial_ids = {t.enroll_id for t in trials} | {t.test_id for t in trials}
    target = [r for r in recordings if r.domain == "target"]
    trial_recordings = [r for r in target if r.recording_id in trial_ids]
    adapt = [r for r in target if r.recording_id not in trial_ids]

    net = _build_net(cfg, source)
    net.load_state_dict(formats.read_checkpoint(ckpt))
    result = training.train_dat(net, source, adapt, trial_recordings,
                                None, cfg.train, out_dir=out, trials=trials)
    _write_run_log(out, "train-dat", cfg)
    print(f"trained {len(result.history)} epochs, "
          f"best epoch {result.best_epoch} "
          f"with validation EER {result.best_eer:.4f}")
    return 0


def cmd_extract(args) -> int:
    cfg = load_run_config(args.config)
    out = _resolve_out(args, cfg)
    ckpt = Path(args.ckpt) if args.ckpt else out / "best.ckpt"
    if not ckpt.exists():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 3

    recordings = _load_recordings(Path(args.data), cfg)
    net = _build_net(cfg, [r for r in recordings if r.domain == "source"])
    net.load_state_dict(formats.read_checkpoint(ckpt))
    records = [(r.recording_id, extract_embedding(net, r))
               for r in recordings]
    formats.write_embedding_file(out / "embeddings.emb", records)
    _write_run_log(out, "extract", cfg)
    print(f"extracted {len(records)} embeddings to {out / 'embeddings.emb'}")
    return 0


def cmd_score(args) -> int:
    embeddings = formats.read_embedding_file(args.embeddings)
    trials = _read_trials(Path(args.trials))
    scored = score_trials(embeddings, trials)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    formats.write_score_file(
        out_path, [(t.enroll_id, t.test_id, t.score) for t in scored])
    print(f"scored {len(scored)} trials to {out_path}")
    return 0


def cmd_eval_eer(args) -> int:
    trials = formats.read_trial_list(args.trials)
    scores = formats.read_score_file(args.scores)
    if len(scores) != len(trials):
        raise FormatError(
            f"{args.scores}: {len(scores)} scores for {len(trials)} trials")
    merged = []
    for lineno, ((e1, t1, label), (e2, t2, score)) in enumerate(
            zip(trials, scores), 1):
        if (e1, t1) != (e2, t2):
            raise FormatError(
                f"{args.scores}:{lineno}: trial ({e2}, {t2}) does not match "
                f"({e1}, {t1}) in {args.trials}")
        merged.append(Trial(e1, t1, label, score=score))
    eer, _ = compute_eer(merged)
    print(f"EER {eer * 100.0:.2f}%")
    return 0


def cmd_self_test(args) -> int:
    from danse import selftest

    failures = 0
    for name, ok, detail in selftest.run_all():
        print(f"{'ok  ' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        failures += 0 if ok else 1
    if failures:
        print(f"{failures} check(s) failed", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="danse",
        description="domain-adversarial speaker embedding pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic corpus")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", help="output directory (default: DANSE_WORKDIR)")

    p = add("pretrain", cmd_pretrain, "pretrain the extractor on source data")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--out")

    p = add("train-dat", cmd_train_dat, "adversarial adaptation training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--pretrain",
                   help="pretrain checkpoint (default: <out>/pretrain.ckpt)")

    p = add("extract", cmd_extract, "extract embeddings for a manifest")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--ckpt", help="model checkpoint (default: <out>/best.ckpt)")

    p = add("score", cmd_score, "cosine-score a trial list")
    p.add_argument("--embeddings", required=True, help="EMB1 embedding file")
    p.add_argument("--trials", required=True, help="trial list file")
    p.add_argument("--out", required=True, help="score file to write")

    p = add("eval-eer", cmd_eval_eer, "report EER for a scored trial list")
    p.add_argument("--scores", required=True, help="score file")
    p.add_argument("--trials", required=True, help="trial list with labels")

    add("self-test", cmd_self_test, "run the built-in verification battery")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
