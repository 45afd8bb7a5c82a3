"""Paired adaptation experiment: margin-only baseline vs adversarial model.

One run per seed: generate a shifted corpus, pretrain the extractor,
snapshot it, then fine-tune twice from the identical snapshot, once
with the margin loss alone and once adversarially. Both models are
judged by target-trial EER and by how well a fresh linear probe can
still read the domain off their frozen embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from danse.datagen import CorpusConfig, FeatureSequence, generate_corpus
from danse.model import ExtractorConfig, SpeakerNet
from danse.training import TrainConfig, pretrain, train_dat, train_margin
from danse.verification import extract_embedding

# compact extractor for experiment turnaround; the architecture shape
# (stem + 4 bottleneck stages + attentive pooling) is unchanged
EXPERIMENT_MODEL = ExtractorConfig(
    feature_dim=23,
    block_counts=(1, 1, 1, 1),
    channel_widths=(4, 4, 8, 8),
    embedding_dim=64,
    fc_hidden_dim=32,
    attention_dim=16,
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Five-seed comparison preset.

    Schedule notes: a light pretrain (3 epochs) leaves both fine-tunes
    room to move; 16 epochs with patience off lets the adversarial run
    develop domain confusion, which shows up late. The discriminator is
    deliberately wide (256) so the extractor faces a strong critic."""

    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ExtractorConfig = field(default_factory=lambda: EXPERIMENT_MODEL)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        pretrain_epochs=3, batch_size=32, max_epochs=16, patience=16))
    classifier_hidden: int = 32
    discriminator_hidden: int = 256


@dataclass
class SeedResult:
    seed: int
    eer_margin: float
    eer_dat: float
    probe_margin: float
    probe_dat: float


# probe protocol constants: independent of the experiment seed, so the
# measurement is identical across seeds and runs
PROBE_SPLITS = 20
PROBE_SEED = 97


def linear_probe_accuracy(x0: np.ndarray, x1: np.ndarray,
                          splits: int = PROBE_SPLITS) -> float:
    """Held-out accuracy of a least-squares linear classifier separating
    two embedding sets.

    The larger set is thinned by an even stride so classes are balanced,
    then accuracy is averaged over `splits` stratified half/half
    partitions. A single split on a few hundred vectors is noisy enough
    (several points) to swamp real model differences; averaging brings
    the spread down to about one point."""
    n = min(len(x0), len(x1))

    def thin(x: np.ndarray) -> np.ndarray:
        idx = np.round(np.linspace(0, len(x) - 1, n)).astype(int)
        return np.asarray(x)[idx]

    x = np.vstack([thin(x0), thin(x1)])
    y = np.concatenate([-np.ones(n), np.ones(n)])
    xb = np.hstack([x, np.ones((len(x), 1))])
    rng = np.random.default_rng(PROBE_SEED)
    half = n // 2
    accs = []
    for _ in range(splits):
        p0, p1 = rng.permutation(n), n + rng.permutation(n)
        train = np.concatenate([p0[:half], p1[:half]])
        test = np.concatenate([p0[half:], p1[half:]])
        w, *_ = np.linalg.lstsq(xb[train], y[train], rcond=None)
        accs.append(np.mean(np.sign(xb[test] @ w) == y[test]))
    return float(np.mean(accs))


def domain_probe_accuracy(net: SpeakerNet, source: list[FeatureSequence],
                          target: list[FeatureSequence]) -> float:
    """Train a fresh probe on frozen embeddings to predict the domain."""
    n = min(len(source), len(target))
    src = np.array([extract_embedding(net, r) for r in source[:n]])
    tgt = np.array([extract_embedding(net, r) for r in target[:n]])
    return linear_probe_accuracy(src, tgt)


def _restored(snapshot: dict, cfg: ExperimentConfig, num_speakers: int,
              seed: int) -> SpeakerNet:
    net = SpeakerNet(num_speakers=num_speakers, config=cfg.model,
                     classifier_hidden=cfg.classifier_hidden,
                     discriminator_hidden=cfg.discriminator_hidden, seed=seed)
    net.load_state_dict(snapshot)
    return net


def run_seed(seed: int, cfg: ExperimentConfig) -> SeedResult:
    corpus = generate_corpus(replace(cfg.corpus, seed=seed))
    train_cfg = replace(cfg.train, seed=seed)
    num_speakers = len({r.speaker_id for r in corpus.source})

    net = SpeakerNet(num_speakers=num_speakers, config=cfg.model,
                     classifier_hidden=cfg.classifier_hidden,
                     discriminator_hidden=cfg.discriminator_hidden, seed=seed)
    pretrain(net, corpus.source, train_cfg)
    snapshot = net.state_dict()

    margin_net = _restored(snapshot, cfg, num_speakers, seed)
    margin_run = train_margin(margin_net, corpus.source, corpus.target_trial,
                              corpus.trial_speaker_of, train_cfg)
    margin_net.load_state_dict(margin_run.best_state)

    dat_net = _restored(snapshot, cfg, num_speakers, seed)
    dat_run = train_dat(dat_net, corpus.source, corpus.target_adapt,
                        corpus.target_trial, corpus.trial_speaker_of, train_cfg)
    dat_net.load_state_dict(dat_run.best_state)

    # the probe answers "which domain is this recording from", so it sees
    # every recording of both domains: all source vs all target (adapt and
    # trial splits together), a balanced 160 vs 160 pool with no thinning
    target_all = corpus.target_adapt + corpus.target_trial
    return SeedResult(
        seed=seed,
        eer_margin=margin_run.best_eer,
        eer_dat=dat_run.best_eer,
        probe_margin=domain_probe_accuracy(margin_net, corpus.source, target_all),
        probe_dat=domain_probe_accuracy(dat_net, corpus.source, target_all),
    )


def run_adaptation_experiment(seeds=(0, 1, 2, 3, 4),
                              cfg: ExperimentConfig | None = None) -> list[SeedResult]:
    cfg = cfg or ExperimentConfig()
    return [run_seed(s, cfg) for s in seeds]
