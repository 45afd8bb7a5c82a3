"""Two-phase optimization: cross-entropy pretraining, then adversarial
adaptation that drives the extractor toward the saddle point of

    E = L_classification(source) - lambda * L_domain(source + target),

realized with a gradient-reversal layer so a single backward pass hands
every parameter group its correct update direction.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from danse import autodiff as ad
from danse import formats, seeds
from danse.autodiff import Tape
from danse.datagen import FeatureSequence, sample_epoch, sample_target_batch
from danse.model import SpeakerNet, cross_entropy
from danse.nn import Linear
from danse.optim import SGD, DivergenceError, RMSprop
from danse.verification import compute_eer, extract_embedding, make_trials, score_trials

MIN_RECORDINGS_PER_SPEAKER = 5
ANNEAL_FACTOR = 0.1


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 3.0
    pretrain_lr: float = 0.001
    pretrain_anneal_after: tuple = (4, 8)
    pretrain_epochs: int = 12
    dat_lr_classifier: float = 0.003
    dat_lr_extractor: float = 0.001
    dat_lr_discriminator: float = 0.001
    batch_size: int = 16
    max_epochs: int = 20
    patience: int = 5
    margin: float = 0.6
    scale: float = 30.0
    chunks_per_recording: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("pretrain_lr", "dat_lr_classifier", "dat_lr_extractor",
                     "dat_lr_discriminator"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name in ("pretrain_epochs", "batch_size", "max_epochs", "patience",
                     "chunks_per_recording"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss_y: float
    loss_d: float
    val_eer: float
    lr_f: float
    lr_y: float
    lr_d: float

    def log_line(self) -> str:
        return formats.format_log_line(
            self.epoch, self.loss_y, self.loss_d, self.val_eer,
            self.lr_f, self.lr_y, self.lr_d,
        )


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_eer: float
    history: list[EpochRecord] = field(default_factory=list)


def filter_speakers(recordings: list[FeatureSequence],
                    min_recordings: int = MIN_RECORDINGS_PER_SPEAKER) -> list[FeatureSequence]:
    """Drop speakers with too few recordings, preserving order."""
    counts = {}
    for r in recordings:
        counts[r.speaker_id] = counts.get(r.speaker_id, 0) + 1
    return [r for r in recordings if counts[r.speaker_id] >= min_recordings]


def speaker_label_map(recordings: list[FeatureSequence]) -> dict[str, int]:
    return {s: i for i, s in enumerate(sorted({r.speaker_id for r in recordings}))}


def pretrain_lr_schedule(config: TrainConfig) -> list[float]:
    """Learning rate per epoch (1-based), annealing by repeated
    multiplication so e.g. 0.001 becomes exactly 0.0001 and 0.00001."""
    lr = config.pretrain_lr
    out = []
    for epoch in range(1, config.pretrain_epochs + 1):
        if epoch - 1 in config.pretrain_anneal_after:
            lr = lr * ANNEAL_FACTOR
        out.append(lr)
    return out


def _batches(chunks, batch_size):
    for i in range(0, len(chunks), batch_size):
        yield chunks[i : i + batch_size]


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite {what} ({value}) at epoch {epoch}, step {step}"
        )


@dataclass
class PretrainResult:
    step_losses: list[float]
    epoch_losses: list[float]
    epoch_accuracies: list[float]
    lrs: list[float]


def pretrain(net: SpeakerNet, source: list[FeatureSequence],
             config: TrainConfig) -> PretrainResult:
    """Train the extractor with a throwaway linear softmax head.

    The head is a plain Linear(embedding_dim -> speakers) layer trained
    jointly with the extractor under RMSprop; it never leaves this
    function. The margin classifier and discriminator are untouched.
    """
    source = filter_speakers(source)
    if not source:
        raise ValueError("no source speakers with enough recordings to pretrain on")
    labels_of = speaker_label_map(source)
    head = Linear(net.config.embedding_dim, len(labels_of),
                  rng=seeds.seeded_rng(config.seed, seeds.INIT_PRETRAIN_HEAD))
    params = dict(net.params_f())
    params.update(head.named_params("pretrain_head"))
    opt = RMSprop(params, lr=config.pretrain_lr)

    schedule = pretrain_lr_schedule(config)
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    epoch_accuracies: list[float] = []
    step = 0
    for epoch in range(1, config.pretrain_epochs + 1):
        opt.lr = schedule[epoch - 1]
        chunks = sample_epoch(source, config.chunks_per_recording,
                              seed=config.seed, stream=epoch)
        epoch_sum = 0.0
        correct = 0
        for batch in _batches(chunks, config.batch_size):
            labels = np.array([labels_of[c.speaker_id] for c in batch])
            opt.zero_grad()
            with Tape() as tape:
                emb = net.embed_sequences([c.frames for c in batch], mode="train")
                logits = head(emb)
                loss = cross_entropy(logits, labels)
                value = float(loss.data)
                _check_finite(value, "pretrain loss", epoch, step)
                tape.backward(loss)
            opt.step()
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            step_losses.append(value)
            epoch_sum += value * len(batch)
            step += 1
        epoch_losses.append(epoch_sum / len(chunks))
        epoch_accuracies.append(correct / len(chunks))
    return PretrainResult(step_losses, epoch_losses, epoch_accuracies, schedule)


def dat_step(net, src_frames: list, src_labels: np.ndarray, tgt_frames: list,
             opt_f, opt_y, opt_d, lam: float,
             margin: float = 0.6, scale: float = 30.0,
             epoch: int = 0, step: int = 0) -> tuple[float, float]:
    """One saddle-point update on a paired source/target batch.

    A single tape carries both losses. The margin loss runs on a
    source-only forward pass, so its batch-norm statistics match a
    plain classification step; the domain BCE runs on a second,
    concatenated source+target forward whose train-mode statistics are
    computed over the mixed batch, so a domain shift survives
    normalization and the discriminator sees it. One backward pass,
    then exactly one step of each optimizer on its parameter group.

    With ``lam == 0`` the reversal layer zeroes the domain branch on
    the way down and the theta_f and theta_y updates match
    ``margin_step`` bit for bit, target batch or not.
    """
    if not len(src_frames) or not len(tgt_frames):
        raise ValueError("dat_step requires non-empty source and target batches")
    opt_f.zero_grad()
    opt_y.zero_grad()
    opt_d.zero_grad()
    with Tape() as tape:
        src_emb = net.embed_sequences(src_frames, mode="train")
        l_y = net.classification_loss(src_emb, src_labels, mode="train",
                                      margin=margin, scale=scale)
        both = net.embed_sequences(list(src_frames) + list(tgt_frames),
                                   mode="train")
        logits = net.domain_logits(both, lam, mode="train")
        domains = np.concatenate([
            np.zeros(len(src_frames)), np.ones(len(tgt_frames)),
        ])
        l_d = ad.bce_with_logits(logits, domains)
        loss_y = float(l_y.data)
        loss_d = float(l_d.data)
        _check_finite(loss_y, "classification loss", epoch, step)
        _check_finite(loss_d, "domain loss", epoch, step)
        total = l_y + l_d
        tape.backward(total)
    opt_y.step()
    opt_f.step()
    opt_d.step()
    return loss_y, loss_d


def margin_step(net, src_frames: list, src_labels: np.ndarray,
                opt_f, opt_y, margin: float = 0.6, scale: float = 30.0,
                epoch: int = 0, step: int = 0) -> float:
    """One margin-loss-only update: the lambda=0, no-target reduction."""
    opt_f.zero_grad()
    opt_y.zero_grad()
    with Tape() as tape:
        src_emb = net.embed_sequences(src_frames, mode="train")
        l_y = net.classification_loss(src_emb, src_labels, mode="train",
                                      margin=margin, scale=scale)
        loss_y = float(l_y.data)
        _check_finite(loss_y, "classification loss", epoch, step)
        tape.backward(l_y)
    opt_y.step()
    opt_f.step()
    return loss_y


def _eer_on_trials(net, recordings, trials) -> float:
    embeddings = {
        r.recording_id: extract_embedding(net, r) for r in recordings
    }
    eer, _ = compute_eer(score_trials(embeddings, trials))
    return eer


def validation_eer(net: SpeakerNet, trial_recordings: list[FeatureSequence],
                   speaker_of: dict[str, str]) -> float:
    """EER over all pairs of the held-out trial recordings, eval mode."""
    trials = make_trials([r.recording_id for r in trial_recordings], speaker_of)
    return _eer_on_trials(net, trial_recordings, trials)


def _train_loop(net, source, target, trial_recordings, speaker_of, config,
                out_dir=None, adversarial=True, trials=None) -> TrainResult:
    source = filter_speakers(source)
    if not source:
        raise ValueError("no source speakers with enough recordings to train on")
    if adversarial and not target:
        raise ValueError("adversarial training requires a non-empty target set")
    if not trial_recordings:
        raise ValueError("validation requires a non-empty trial set")
    labels_of = speaker_label_map(source)

    opt_f = SGD(net.params_f(), lr=config.dat_lr_extractor)
    opt_y = RMSprop(net.params_y(), lr=config.dat_lr_classifier)
    opt_d = SGD(net.params_d(), lr=config.dat_lr_discriminator)
    rng_t = seeds.seeded_rng(config.seed, seeds.TARGET_BATCH) if adversarial else None

    lr_d = config.dat_lr_discriminator if adversarial else 0.0
    history: list[EpochRecord] = []
    best_state = None
    best_eer = np.inf
    best_epoch = 0
    since_improve = 0
    log_lines: list[str] = []
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        chunks = sample_epoch(source, config.chunks_per_recording,
                              seed=config.seed, stream=epoch)
        sums = np.zeros(2)
        n_batches = 0
        for batch in _batches(chunks, config.batch_size):
            labels = np.array([labels_of[c.speaker_id] for c in batch])
            frames = [c.frames for c in batch]
            if adversarial:
                tgt = sample_target_batch(target, len(batch), rng_t)
                l_y, l_d = dat_step(
                    net, frames, labels, [c.frames for c in tgt],
                    opt_f, opt_y, opt_d, config.lam,
                    margin=config.margin, scale=config.scale,
                    epoch=epoch, step=step,
                )
            else:
                l_y = margin_step(
                    net, frames, labels, opt_f, opt_y,
                    margin=config.margin, scale=config.scale,
                    epoch=epoch, step=step,
                )
                l_d = 0.0
            sums += (l_y, l_d)
            n_batches += 1
            step += 1

        if trials is None:
            eer = validation_eer(net, trial_recordings, speaker_of)
        else:
            eer = _eer_on_trials(net, trial_recordings, trials)
        record = EpochRecord(
            epoch, sums[0] / n_batches, sums[1] / n_batches, eer,
            config.dat_lr_extractor, config.dat_lr_classifier, lr_d,
        )
        history.append(record)
        log_lines.append(record.log_line())
        if out_dir is not None:
            formats.write_checkpoint(out_dir / f"epoch_{epoch}.ckpt", net.state_dict())

        if eer < best_eer:
            best_eer = eer
            best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break

    if out_dir is not None:
        formats.write_checkpoint(out_dir / "best.ckpt", best_state)
        (out_dir / "training.log").write_text("\n".join(log_lines) + "\n")
    return TrainResult(best_state, best_epoch, best_eer, history)


def train_dat(net: SpeakerNet, source: list[FeatureSequence],
              target: list[FeatureSequence],
              trial_recordings: list[FeatureSequence],
              speaker_of: dict[str, str], config: TrainConfig,
              out_dir=None, trials=None) -> TrainResult:
    """Adversarial adaptation; returns the checkpoint with lowest
    validation EER plus the per-epoch history.

    An empty target set is a configuration error. Pass explicit
    ``trials`` when speaker labels for the trial recordings are
    withheld.
    """
    return _train_loop(net, source, target, trial_recordings, speaker_of,
                       config, out_dir, adversarial=True, trials=trials)


def train_margin(net: SpeakerNet, source: list[FeatureSequence],
                 trial_recordings: list[FeatureSequence],
                 speaker_of: dict[str, str], config: TrainConfig,
                 out_dir=None, trials=None) -> TrainResult:
    """Margin-loss fine-tune without the adversarial branch: the
    unadapted baseline. Identical batch stream to train_dat."""
    return _train_loop(net, source, None, trial_recordings, speaker_of,
                       config, out_dir, adversarial=False, trials=trials)
