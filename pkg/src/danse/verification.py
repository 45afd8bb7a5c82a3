"""Test-time protocol: recording embeddings, cosine scoring, equal error rate.

The discriminator branch plays no part here; embeddings come from a
single eval-mode forward pass over the full recording.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str
    score: float | None = None

    def __post_init__(self):
        if self.label not in ("target", "nontarget"):
            raise ValueError(f"trial label must be target|nontarget, got {self.label!r}")


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa = float(a @ a)
    sb = float(b @ b)
    if sa < NORM_FLOOR**2 or sb < NORM_FLOOR**2:
        raise ValueError("degenerate embedding norm")
    # sqrt(sa*sb) instead of sqrt(sa)*sqrt(sb): for a == b this divides
    # the dot product by itself exactly, so self-similarity is 1.0
    return min(1.0, max(-1.0, float(a @ b) / np.sqrt(sa * sb)))


def score_trials(embeddings, trials: list[Trial]) -> list[Trial]:
    """Fill each trial's score from the embedding table, order preserved."""
    out = []
    for t in trials:
        for rec_id in (t.enroll_id, t.test_id):
            if rec_id not in embeddings:
                raise KeyError(f"no embedding for recording {rec_id!r}")
        a = embeddings[t.enroll_id]
        b = embeddings[t.test_id]
        for rec_id, v in ((t.enroll_id, a), (t.test_id, b)):
            if float(np.linalg.norm(v)) < NORM_FLOOR:
                raise ValueError(f"degenerate embedding norm for recording {rec_id!r}")
        out.append(replace(t, score=cosine_score(a, b)))
    return out


def _operating_points(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray):
    """(FAR, FRR) under accept-iff-score>=threshold, one row per threshold."""
    n_target = int(np.sum(labels == 1))
    n_nontarget = int(np.sum(labels == 0))
    fars = np.empty(len(thresholds))
    frrs = np.empty(len(thresholds))
    for i, tau in enumerate(thresholds):
        accepted = scores >= tau
        fars[i] = np.sum(accepted & (labels == 0)) / n_nontarget
        frrs[i] = np.sum(~accepted & (labels == 1)) / n_target
    return fars, frrs


def _crossing(fars: np.ndarray, frrs: np.ndarray, thresholds: np.ndarray):
    # FAR is non-increasing and FRR non-decreasing in the threshold, so
    # diff = FAR - FRR falls monotonically from +1 to -1; take the first
    # non-positive point and interpolate linearly when it is negative.
    diff = fars - frrs
    idx = int(np.argmax(diff <= 0.0))
    if diff[idx] == 0.0:
        return float(fars[idx]), float(thresholds[idx])
    d1, d2 = diff[idx - 1], diff[idx]
    t = d1 / (d1 - d2)
    eer = (1.0 - t) * fars[idx - 1] + t * fars[idx]
    tau = (1.0 - t) * thresholds[idx - 1] + t * thresholds[idx]
    return float(eer), float(tau)


def compute_eer(trials: list[Trial]) -> tuple[float, float]:
    """Equal error rate and crossing threshold for a scored trial set.

    Operating points are taken at every distinct score (accept iff
    score >= threshold) plus one reject-everything point; the EER is
    read at the FAR/FRR crossing, linearly interpolated between the
    two adjacent points when no threshold hits it exactly.
    """
    if any(t.score is None for t in trials):
        raise RuntimeError("compute_eer requires every trial to be scored")
    scores = np.array([t.score for t in trials], dtype=np.float64)
    labels = np.array([1 if t.label == "target" else 0 for t in trials])
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite trial score")
    if np.sum(labels == 1) == 0 or np.sum(labels == 0) == 0:
        raise ValueError("EER undefined: need at least one target and one nontarget trial")
    uniq = np.unique(scores)
    thresholds = np.append(uniq, uniq[-1] + 1.0)  # final point rejects everything
    fars, frrs = _operating_points(scores, labels, thresholds)
    return _crossing(fars, frrs, thresholds)


def make_trials(recording_ids: list[str], speaker_of: dict[str, str]) -> list[Trial]:
    """All unordered pairs of distinct recordings, labeled by speaker match."""
    trials = []
    for i, enroll in enumerate(recording_ids):
        for test in recording_ids[i + 1 :]:
            label = "target" if speaker_of[enroll] == speaker_of[test] else "nontarget"
            trials.append(Trial(enroll, test, label))
    return trials


def extract_embedding(net, recording) -> np.ndarray:
    """One eval-mode forward pass over the full recording, no chunking."""
    emb = net.embed_sequences([recording.frames], mode="eval")
    return emb.data[0].copy()
