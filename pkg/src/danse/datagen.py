"""Synthetic multi-domain feature corpora with known speaker structure.

Every frame of a recording is speaker vector + channel offset + smoothed
noise, all Gaussian, so speaker identity is recoverable from recording
statistics by construction. Target-domain recordings additionally pass
through a fixed affine map a * x + b per coordinate, which is the
covariate shift the adversarial branch is meant to absorb.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from danse import seeds

CHUNK_MIN_FRAMES = 300
CHUNK_MAX_FRAMES = 800
SMOOTHER_COEFF = 0.7


@dataclass(frozen=True)
class CorpusConfig:
    num_speakers_source: int = 20
    num_speakers_target: int = 20
    recordings_per_speaker: int = 8
    frames_min: int = 500
    frames_max: int = 1000
    feature_dim: int = 23
    speaker_scale: float = 1.0
    channel_scale: float = 0.3
    noise_scale: float = 0.5
    shift_scale: float = 1.5
    shift_offset: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_speakers_source", "num_speakers_target", "recordings_per_speaker",
                     "frames_min", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.frames_max < self.frames_min:
            raise ValueError("frames_max must be >= frames_min")
        for name in ("speaker_scale", "channel_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class FeatureSequence:
    """One recording: [F, T] float64 frames plus identity metadata.

    ``speaker_id`` is "-" when the label is withheld (target training split).
    """

    recording_id: str
    speaker_id: str
    domain: str
    frames: np.ndarray

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.frames.ndim != 2:
            raise ValueError("frames must be a [F, T] array")


@dataclass
class Chunk:
    """A contiguous (possibly wrapped) slice of one recording's frames."""

    recording_id: str
    speaker_id: str
    domain: str
    frames: np.ndarray


@dataclass
class Corpus:
    source: list[FeatureSequence] = field(default_factory=list)
    target_adapt: list[FeatureSequence] = field(default_factory=list)
    target_trial: list[FeatureSequence] = field(default_factory=list)
    trial_speaker_of: dict[str, str] = field(default_factory=dict)

    def all_recordings(self) -> list[FeatureSequence]:
        return self.source + self.target_adapt + self.target_trial


def _smooth(noise: np.ndarray) -> np.ndarray:
    # First-order recursive smoother y_t = c*y_{t-1} + (1-c)*x_t.
    c = SMOOTHER_COEFF
    return lfilter([1.0 - c], [1.0, -c], noise, axis=1)


def _make_recording(
    rng: np.random.Generator,
    cfg: CorpusConfig,
    speaker_vec: np.ndarray,
    shifted: bool,
) -> np.ndarray:
    f = cfg.feature_dim
    channel = rng.normal(0.0, cfg.channel_scale, size=f) if cfg.channel_scale > 0 else np.zeros(f)
    t = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    if cfg.noise_scale > 0:
        noise = _smooth(rng.normal(0.0, cfg.noise_scale, size=(f, t)))
    else:
        noise = np.zeros((f, t))
    frames = speaker_vec[:, None] + channel[:, None] + noise
    if shifted:
        frames = cfg.shift_scale * frames + cfg.shift_offset
    return frames


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Draw a full corpus deterministically from ``cfg.seed``.

    Target speakers split in half: the first ceil(n/2) form the
    unlabeled adaptation pool (speaker ids withheld), the rest are held
    out for verification trials. Draw order is fixed, so identical
    configs give bitwise-identical corpora.
    """
    rng = seeds.seeded_rng(cfg.seed, seeds.CORPUS)
    corpus = Corpus()

    for i in range(cfg.num_speakers_source):
        spk = f"src{i:03d}"
        vec = rng.normal(0.0, cfg.speaker_scale, size=cfg.feature_dim)
        for j in range(cfg.recordings_per_speaker):
            frames = _make_recording(rng, cfg, vec, shifted=False)
            corpus.source.append(FeatureSequence(f"{spk}_r{j:02d}", spk, "source", frames))

    n_adapt = cfg.num_speakers_target - cfg.num_speakers_target // 2
    for i in range(cfg.num_speakers_target):
        adapt = i < n_adapt
        spk = f"ada{i:03d}" if adapt else f"tst{i - n_adapt:03d}"
        vec = rng.normal(0.0, cfg.speaker_scale, size=cfg.feature_dim)
        for j in range(cfg.recordings_per_speaker):
            frames = _make_recording(rng, cfg, vec, shifted=True)
            rec_id = f"{spk}_r{j:02d}"
            if adapt:
                corpus.target_adapt.append(FeatureSequence(rec_id, "-", "target", frames))
            else:
                # The public label stays withheld; pair ground truth for
                # trial construction is kept separately.
                corpus.target_trial.append(FeatureSequence(rec_id, "-", "target", frames))
                corpus.trial_speaker_of[rec_id] = spk
    return corpus


def cut_chunk(recording: FeatureSequence, length: int, rng: np.random.Generator) -> Chunk:
    """Slice ``length`` frames from the recording, wrapping if it is shorter.

    A recording shorter than the requested length is tiled from its
    start, so e.g. 100 frames at length 300 yield the recording three
    times over.
    """
    frames = recording.frames
    t = frames.shape[1]
    if length >= t:
        reps = -(-length // t)
        piece = np.tile(frames, reps)[:, :length].copy()
    else:
        start = int(rng.integers(0, t - length + 1))
        piece = frames[:, start : start + length].copy()
    return Chunk(recording.recording_id, recording.speaker_id, recording.domain, piece)


def sample_epoch(
    recordings: list[FeatureSequence],
    chunks_per_recording: int = 10,
    seed: int = 0,
    stream: int = 0,
) -> list[Chunk]:
    """Draw ``chunks_per_recording`` random chunks per recording, shuffled.

    Lengths are uniform on [300, 800] frames. The same (recordings,
    seed, stream) triple always yields the same chunk sequence; callers
    pass the epoch index as ``stream`` to vary chunks across epochs.
    """
    if not recordings:
        raise ValueError("sample_epoch needs at least one recording")
    rng = seeds.seeded_rng(seed, seeds.EPOCH_SHUFFLE, stream)
    chunks = []
    for rec in recordings:
        for _ in range(chunks_per_recording):
            length = int(rng.integers(CHUNK_MIN_FRAMES, CHUNK_MAX_FRAMES + 1))
            chunks.append(cut_chunk(rec, length, rng))
    order = rng.permutation(len(chunks))
    return [chunks[i] for i in order]


def sample_target_batch(
    recordings: list[FeatureSequence],
    batch_size: int,
    rng: np.random.Generator,
) -> list[Chunk]:
    """Draw ``batch_size`` chunks from ``recordings`` with replacement."""
    if not recordings:
        raise ValueError("sample_target_batch needs at least one recording")
    out = []
    for _ in range(batch_size):
        rec = recordings[int(rng.integers(0, len(recordings)))]
        length = int(rng.integers(CHUNK_MIN_FRAMES, CHUNK_MAX_FRAMES + 1))
        out.append(cut_chunk(rec, length, rng))
    return out
