"""Built-in verification battery behind `danse self-test`.

Each check is a named, independent function covering one corner of the
library: gradients against finite differences, worked examples pinned
as stored constants, the EER oracle, file-format round-trips, and a
miniature end-to-end pipeline in a temporary directory. Every stored
constant in EXPECTED feeds exactly one check, so corrupting one value
fails exactly one named check.
"""

from __future__ import annotations

import contextlib
import io
import tempfile
from pathlib import Path

import numpy as np

from danse import autodiff as ad
from danse import formats, nn
from danse.autodiff import Tape, Tensor, grad_check
from danse.datagen import CorpusConfig, generate_corpus
from danse.model import ExtractorConfig, SpeakerNet, am_softmax_loss, \
    cross_entropy
from danse.optim import RMSprop
from danse.training import TrainConfig, pretrain_lr_schedule
from danse.verification import Trial, compute_eer

EXPECTED = {
    # softmax of (tanh 0, tanh 1): the two-frame attention example
    "attention_weights": (0.31830026, 0.68169974),
    # first rmsprop step at lr=0.001 on a unit gradient
    "rmsprop_first_step": -0.00316228,
    # pretrain lr at epochs 1, 5, 9
    "lr_schedule": (0.001, 0.0001, 0.00001),
    # EER and threshold of the 3+3 worked example
    "eer_one_third": 1.0 / 3.0,
    "eer_tau": 0.5,
}


def check_autodiff_grad_check() -> None:
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="w")
    b = Tensor(rng.normal(size=(1, 2)), requires_grad=True, name="b")

    def fn():
        z = ad.add(ad.matmul(x, w), b)
        return ad.tsum(ad.mul(ad.softmax(z, axis=-1), ad.tanh(z)))

    err = grad_check(fn, [w, b])
    assert err < 1e-4, f"gradient check error {err:.2e}"


def check_model_attention_example() -> None:
    pool = nn.AttentionPool(1, 1, rng=np.random.default_rng(0))
    pool.w.data[:] = 1.0
    pool.b.data[:] = 0.0
    pool.v.data[:] = 1.0
    pool.k.data[...] = 0.0
    with Tape():
        alpha = pool.weights(Tensor(np.array([[0.0, 1.0]]))).data
    want = EXPECTED["attention_weights"]
    assert np.allclose(alpha, want, atol=1e-6), f"weights {alpha} != {want}"


def check_model_margin_reduction() -> None:
    rng = np.random.default_rng(1)
    emb = Tensor(rng.normal(size=(6, 8)))
    w = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
    labels = np.array([0, 1, 2, 3, 0, 1])
    with Tape():
        reduced = am_softmax_loss(emb, labels, w, margin=0.0, scale=1.0)
        cosines = ad.matmul(ad.l2_normalize(emb, axis=1),
                            ad.l2_normalize(w, axis=0))
        plain = cross_entropy(cosines, labels)
    diff = abs(float(reduced.data) - float(plain.data))
    assert diff <= 1e-12, f"m=0 s=1 reduction off by {diff:.2e}"


def check_datagen_corpus() -> None:
    cfg = CorpusConfig(num_speakers_source=3, num_speakers_target=3,
                       recordings_per_speaker=2, frames_min=30,
                       frames_max=40, feature_dim=4, seed=5)
    a = generate_corpus(cfg)
    b = generate_corpus(cfg)
    assert len(a.source) == 6 and len(a.target_adapt) == 4 \
        and len(a.target_trial) == 2, "corpus split sizes"
    assert all(r.speaker_id == "-" for r in a.target_adapt + a.target_trial), \
        "target labels must be withheld"
    pairs = zip(a.all_recordings(), b.all_recordings())
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in pairs), \
        "same seed must reproduce frames bit for bit"


def check_training_rmsprop_step() -> None:
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([1.0])
    RMSprop({"w": w}, lr=0.001).step()
    delta = float(w.data[0]) - 1.0
    want = EXPECTED["rmsprop_first_step"]
    assert abs(delta - want) < 1e-8, f"first step {delta:.8f} != {want}"


def check_training_lr_schedule() -> None:
    lrs = pretrain_lr_schedule(TrainConfig(pretrain_epochs=12))
    got = (lrs[0], lrs[4], lrs[8])
    assert got == EXPECTED["lr_schedule"], f"schedule {got}"


def check_verification_eer_fixture() -> None:
    trials = [Trial("e", "t", "target", s) for s in (0.9, 0.8, 0.3)]
    trials += [Trial("e", "t", "nontarget", s) for s in (0.5, 0.2, 0.1)]
    eer, tau = compute_eer(trials)
    assert eer == EXPECTED["eer_one_third"], f"eer {eer}"
    assert tau == EXPECTED["eer_tau"], f"tau {tau}"


def _oracle_eer(scores: np.ndarray, labels: np.ndarray) -> float:
    # brute force over every midpoint between consecutive sorted scores
    uniq = np.unique(scores)
    cands = np.concatenate([[uniq[0] - 1.0],
                            (uniq[:-1] + uniq[1:]) / 2.0,
                            [uniq[-1] + 1.0]])
    pos = labels == 1
    fars, frrs = [], []
    for c in cands:  # ascending, so FAR-FRR walks from +1 toward -1
        accept = scores > c
        fars.append(np.mean(accept[~pos]))
        frrs.append(np.mean(~accept[pos]))
    fars, frrs = np.array(fars), np.array(frrs)
    diff = fars - frrs
    idx = int(np.argmax(diff <= 0.0))
    if diff[idx] == 0.0:
        return float(fars[idx])
    d1, d2 = diff[idx - 1], diff[idx]
    t = d1 / (d1 - d2)
    return float((1 - t) * fars[idx - 1] + t * fars[idx])


def check_verification_eer_oracle() -> None:
    rng = np.random.default_rng(7)
    for case in range(20):
        n = int(rng.integers(4, 50))
        scores = np.round(rng.normal(size=n), 2)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        trials = [Trial("e", "t", "target" if l else "nontarget", s)
                  for s, l in zip(scores, labels)]
        eer, _ = compute_eer(trials)
        want = _oracle_eer(scores, labels)
        assert eer == want, f"case {case}: {eer} != oracle {want}"


def check_formats_roundtrip() -> None:
    rng = np.random.default_rng(9)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        frames = rng.normal(size=(4, 11)).astype(np.float32).astype(np.float64)
        formats.write_feature_file(root / "x.fea", frames)
        assert formats.read_feature_file(root / "x.fea").tobytes() \
            == frames.tobytes(), "feature round trip"

        emb = [("a", rng.normal(size=64).astype(np.float32).astype(np.float64)),
               ("b", rng.normal(size=64).astype(np.float32).astype(np.float64))]
        formats.write_embedding_file(root / "x.emb", emb)
        table = formats.read_embedding_file(root / "x.emb")
        assert list(table) == ["a", "b"] and all(
            table[k].tobytes() == v.tobytes() for k, v in emb), \
            "embedding round trip"

        state = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=3)}
        formats.write_checkpoint(root / "x.ckpt", state)
        back = formats.read_checkpoint(root / "x.ckpt")
        assert all(back[k].tobytes() == v.tobytes() for k, v in state.items()), \
            "checkpoint round trip"


def check_cli_pipeline() -> None:
    from danse.cli import main

    config = "\n".join([
        "num_speakers_source = 3",
        "num_speakers_target = 4",
        "recordings_per_speaker = 5",
        "frames_min = 60",
        "frames_max = 80",
        "feature_dim = 5",
        "seed = 0",
        "block_counts = 1,1,1,1",
        "channel_widths = 4,4,8,8",
        "fc_hidden_dim = 8",
        "attention_dim = 4",
        "classifier_hidden = 8",
        "discriminator_hidden = 8",
        "pretrain_epochs = 1",
        "batch_size = 8",
        "max_epochs = 1",
        "patience = 99",
        "chunks_per_recording = 2",
    ]) + "\n"
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = root / "run.cfg"
        cfg.write_text(config)
        quiet = io.StringIO()

        def run(*argv):
            with contextlib.redirect_stdout(quiet):
                return main(list(argv))

        c, d, w = str(cfg), str(root / "data"), str(root / "work")
        assert run("gen-data", "--config", c, "--out", d) == 0, "gen-data"
        assert run("pretrain", "--config", c, "--data", d, "--out", w) == 0, \
            "pretrain"
        assert run("train-dat", "--config", c, "--data", d, "--out", w) == 0, \
            "train-dat"
        assert run("extract", "--config", c, "--data", d, "--out", w) == 0, \
            "extract"
        assert run("score", "--embeddings", str(root / "work/embeddings.emb"),
                   "--trials", str(root / "data/trials.txt"),
                   "--out", str(root / "work/scores.txt")) == 0, "score"
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            code = main(["eval-eer", "--scores", str(root / "work/scores.txt"),
                         "--trials", str(root / "data/trials.txt")])
        assert code == 0, "eval-eer"
        assert out.getvalue().startswith("EER ") \
            and out.getvalue().strip().endswith("%"), "eval-eer report"


CHECKS = [
    ("autodiff.grad_check", check_autodiff_grad_check),
    ("model.attention_example", check_model_attention_example),
    ("model.margin_reduction", check_model_margin_reduction),
    ("datagen.corpus", check_datagen_corpus),
    ("training.rmsprop_step", check_training_rmsprop_step),
    ("training.lr_schedule", check_training_lr_schedule),
    ("verification.eer_fixture", check_verification_eer_fixture),
    ("verification.eer_oracle", check_verification_eer_oracle),
    ("formats.roundtrip", check_formats_roundtrip),
    ("cli.pipeline", check_cli_pipeline),
]


def run_all() -> list[tuple[str, bool, str]]:
    """Run every named check; never raises. Returns (name, ok, detail)."""
    results = []
    for name, fn in CHECKS:
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # a failed check must not stop the rest
            results.append((name, False, str(exc) or type(exc).__name__))
    return results
