"""Score speaker-verification trials and read off the EER.

No network here: hand-made embeddings, so the whole scoring path is
visible in twenty lines.  PYTHONPATH=src python3 demos/verification_scoring.py
"""

import numpy as np

from danse.verification import Trial, compute_eer, cosine_score, make_trials, score_trials


def main() -> None:
    rng = np.random.default_rng(11)

    # three "speakers", four recordings each: same-speaker embeddings are
    # nearby directions, different speakers are not, with enough noise
    # that a few trials land on the wrong side
    anchors = {s: rng.normal(size=8) for s in ("spk_a", "spk_b", "spk_c")}
    speaker_of = {}
    embeddings = {}
    for spk, anchor in anchors.items():
        for i in range(4):
            rid = f"{spk}_rec{i}"
            speaker_of[rid] = spk
            embeddings[rid] = anchor + 0.75 * rng.normal(size=8)

    trials = make_trials(sorted(embeddings), speaker_of)
    scored = score_trials(embeddings, trials)
    print(f"{len(scored)} trials from {len(embeddings)} recordings")
    for t in scored[:5]:
        print(f"  {t.enroll_id} vs {t.test_id}: {t.label:9s} score {t.score:+.3f}")

    eer, threshold = compute_eer(scored)
    print(f"\nEER {eer:.4f} at threshold {threshold:+.4f}")

    # cosine similarity only cares about direction
    a, b = embeddings["spk_a_rec0"], embeddings["spk_a_rec1"]
    print("scale-invariant:", np.isclose(cosine_score(a, b), cosine_score(5 * a, b)))

    # EER only cares about the ordering of scores, so any strictly
    # increasing transform leaves it unchanged
    warped = [Trial(t.enroll_id, t.test_id, t.label, score=np.tanh(3 * t.score))
              for t in scored]
    eer_warped, _ = compute_eer(warped)
    print(f"after tanh(3s) warp: EER {eer_warped:.4f} (same: {np.isclose(eer, eer_warped)})")


if __name__ == "__main__":
    main()
