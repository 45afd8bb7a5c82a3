"""Speaker embedding network with an adversarial domain branch.

The extractor maps a [F, T] feature sequence through an input
convolution, four stages of bottleneck residual blocks (stages two to
four halve the time axis), attentive statistics pooling, and two fully
connected layers down to a fixed-size embedding. A margin-softmax
classifier and a gradient-reversed domain discriminator both consume
the embedding; their parameters are partitioned so the three
saddle-point updates touch disjoint sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from danse import autodiff as ad
from danse import nn
from danse import seeds
from danse.autodiff import Tensor

STAGE_STRIDES = (1, 2, 2, 2)


@dataclass(frozen=True)
class ExtractorConfig:
    feature_dim: int = 23
    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    channel_widths: tuple[int, ...] = (32, 64, 128, 256)
    bottleneck_expansion: int = 2
    embedding_dim: int = 64
    fc_hidden_dim: int = 128
    attention_dim: int = 64
    var_floor: float = 1e-8

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if len(self.block_counts) != 4 or any(c < 1 for c in self.block_counts):
            raise ValueError("block_counts must be 4 positive integers")
        if len(self.channel_widths) != 4 or any(w < 1 for w in self.channel_widths):
            raise ValueError("channel_widths must be 4 positive integers")
        if self.bottleneck_expansion < 1:
            raise ValueError("bottleneck_expansion must be positive")
        for name in ("embedding_dim", "fc_hidden_dim", "attention_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")

    @property
    def pooled_channels(self) -> int:
        """Channel count entering the pooling layer (nF)."""
        return self.channel_widths[-1] * self.bottleneck_expansion

    @property
    def total_stride(self) -> int:
        return int(np.prod(STAGE_STRIDES))

    @property
    def min_input_frames(self) -> int:
        # At least four pooled frames so attention statistics are meaningful.
        return 4 * self.total_stride

    def pooled_length(self, t: int) -> int:
        out = t
        for s in STAGE_STRIDES:
            out = -(-out // s)
        return out

    @property
    def named_layer_count(self) -> int:
        """Input conv + block convs + attention + two FC layers."""
        return 1 + 3 * sum(self.block_counts) + 1 + 2


class Extractor:
    """Feature extractor F(X; theta_f): sequences in, embeddings out."""

    def __init__(self, config: ExtractorConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.stem = nn.Conv1d(c.feature_dim, c.channel_widths[0], 3, stride=1, padding=1, rng=rng)
        self.stem_bn = nn.BatchNorm1d(c.channel_widths[0])
        self.stages: list[list[nn.Bottleneck]] = []
        in_ch = c.channel_widths[0]
        for stage_idx, (count, width) in enumerate(zip(c.block_counts, c.channel_widths)):
            blocks = []
            for b in range(count):
                stride = STAGE_STRIDES[stage_idx] if b == 0 else 1
                block = nn.Bottleneck(in_ch, width, c.bottleneck_expansion, stride, rng=rng)
                in_ch = block.out_channels
                blocks.append(block)
            self.stages.append(blocks)
        self.attention = nn.AttentionPool(c.pooled_channels, c.attention_dim, c.var_floor, rng=rng)
        self.fc1 = nn.Linear(2 * c.pooled_channels, c.fc_hidden_dim, rng=rng)
        self.fc1_bn = nn.BatchNorm1d(c.fc_hidden_dim)
        self.fc2 = nn.Linear(c.fc_hidden_dim, c.embedding_dim, rng=rng)

    def _check_input(self, frames: np.ndarray) -> None:
        c = self.config
        if frames.ndim != 2 or frames.shape[0] != c.feature_dim:
            raise ValueError(
                f"expected [F={c.feature_dim}, T] features, got shape {frames.shape}"
            )
        if frames.shape[1] < c.min_input_frames:
            raise ValueError(
                f"input too short: {frames.shape[1]} frames, minimum is {c.min_input_frames}"
            )

    def feature_maps(self, chunks: list, mode: str) -> list[Tensor]:
        """Run the convolutional trunk; returns one [nF, T'] map per chunk."""
        tensors = []
        for chunk in chunks:
            t = chunk if isinstance(chunk, Tensor) else Tensor(chunk)
            self._check_input(t.data)
            tensors.append(t)
        p = nn.pack(tensors)
        p = self.stem.forward_packed(p)
        p = self.stem_bn.forward_packed(p, mode)
        p = nn.Packed(ad.elu(p.data), p.sizes)
        for blocks in self.stages:
            for block in blocks:
                p = block.forward_packed(p, mode)
        return nn.unpack(p)

    def embed(self, chunks: list, mode: str) -> Tensor:
        """Full extractor forward: [N] sequences -> [N, embedding_dim]."""
        maps = self.feature_maps(chunks, mode)
        stats = [self.attention(h) for h in maps]
        x = nn.stack_rows(stats)
        x = self.fc1(x)
        x = self.fc1_bn.forward_features(x, mode)
        x = ad.elu(x)
        return self.fc2(x)

    def named_params(self, prefix: str = "extractor") -> dict[str, Tensor]:
        out = {}
        out.update(self.stem.named_params(f"{prefix}.stem"))
        out.update(self.stem_bn.named_params(f"{prefix}.stem_bn"))
        for i, blocks in enumerate(self.stages, 1):
            for j, block in enumerate(blocks, 1):
                out.update(block.named_params(f"{prefix}.stage{i}.block{j}"))
        out.update(self.attention.named_params(f"{prefix}.attention"))
        out.update(self.fc1.named_params(f"{prefix}.fc1"))
        out.update(self.fc1_bn.named_params(f"{prefix}.fc1_bn"))
        out.update(self.fc2.named_params(f"{prefix}.fc2"))
        return out

    def batchnorms(self, prefix: str = "extractor") -> list[tuple[str, nn.BatchNorm1d]]:
        out = [(f"{prefix}.stem_bn", self.stem_bn)]
        for i, blocks in enumerate(self.stages, 1):
            for j, block in enumerate(blocks, 1):
                for name, bn in block.batchnorms():
                    out.append((f"{prefix}.stage{i}.block{j}.{name}", bn))
        out.append((f"{prefix}.fc1_bn", self.fc1_bn))
        return out


class SpeakerNet:
    """Extractor, margin classifier, and domain discriminator."""

    def __init__(
        self,
        num_speakers: int,
        config: ExtractorConfig | None = None,
        classifier_hidden: int = 128,
        discriminator_hidden: int = 256,
        seed: int = 0,
    ):
        if num_speakers < 1:
            raise ValueError("num_speakers must be positive")
        self.config = config if config is not None else ExtractorConfig()
        self.num_speakers = num_speakers
        self.classifier_hidden = classifier_hidden
        self.discriminator_hidden = discriminator_hidden
        self.seed = seed

        self.extractor = Extractor(self.config, seeds.seeded_rng(seed, seeds.INIT_EXTRACTOR))
        self._init_classifier(seeds.seeded_rng(seed, seeds.INIT_CLASSIFIER))
        rng_d = seeds.seeded_rng(seed, seeds.INIT_DISCRIMINATOR)
        emb = self.config.embedding_dim
        dh = discriminator_hidden
        self.disc_fc1 = nn.Linear(emb, dh, rng=rng_d)
        self.disc_bn1 = nn.BatchNorm1d(dh)
        self.disc_fc2 = nn.Linear(dh, dh, rng=rng_d)
        self.disc_bn2 = nn.BatchNorm1d(dh)
        self.disc_out = nn.Linear(dh, 1, rng=rng_d)

    def _init_classifier(self, rng: np.random.Generator) -> None:
        emb = self.config.embedding_dim
        ch = self.classifier_hidden
        self.cls_hidden = nn.Linear(emb, ch, rng=rng)
        self.cls_bn = nn.BatchNorm1d(ch)
        self.margin_weight = Tensor(nn.kaiming_uniform(rng, (ch, self.num_speakers), ch), requires_grad=True)

    def reinit_classifier(self, seed: int) -> None:
        """Fresh classifier head (used when margin training begins)."""
        self._init_classifier(seeds.seeded_rng(seed, seeds.INIT_CLASSIFIER))

    # forward passes -------------------------------------------------------

    def embed_sequences(self, chunks: list, mode: str) -> Tensor:
        return self.extractor.embed(chunks, mode)

    def classifier_activations(self, embeddings: Tensor, mode: str) -> Tensor:
        h = self.cls_hidden(embeddings)
        h = self.cls_bn.forward_features(h, mode)
        return ad.elu(h)

    def classification_loss(self, embeddings: Tensor, labels: np.ndarray, mode: str,
                            margin: float = 0.6, scale: float = 30.0) -> Tensor:
        h = self.classifier_activations(embeddings, mode)
        return am_softmax_loss(h, labels, self.margin_weight, margin, scale)

    def domain_logits(self, embeddings: Tensor, lam: float, mode: str) -> Tensor:
        g = ad.grad_reverse(embeddings, lam)
        h = ad.elu(self.disc_bn1.forward_features(self.disc_fc1(g), mode))
        h = ad.elu(self.disc_bn2.forward_features(self.disc_fc2(h), mode))
        z = self.disc_out(h)
        return ad.reshape(z, (z.shape[0],))

    def discriminate(self, embeddings: Tensor, lam: float, mode: str) -> Tensor:
        """Domain probabilities in (0, 1): p = sigmoid(logits)."""
        return ad.sigmoid(self.domain_logits(embeddings, lam, mode))

    # parameter partitions --------------------------------------------------

    def params_f(self) -> dict[str, Tensor]:
        return self.extractor.named_params()

    def params_y(self) -> dict[str, Tensor]:
        out = self.cls_hidden.named_params("classifier.hidden")
        out.update(self.cls_bn.named_params("classifier.hidden_bn"))
        out["classifier.margin_weight"] = self.margin_weight
        return out

    def params_d(self) -> dict[str, Tensor]:
        out = self.disc_fc1.named_params("discriminator.fc1")
        out.update(self.disc_bn1.named_params("discriminator.bn1"))
        out.update(self.disc_fc2.named_params("discriminator.fc2"))
        out.update(self.disc_bn2.named_params("discriminator.bn2"))
        out.update(self.disc_out.named_params("discriminator.out"))
        return out

    def all_params(self) -> dict[str, Tensor]:
        out = self.params_f()
        out.update(self.params_y())
        out.update(self.params_d())
        return out

    def batchnorms(self) -> list[tuple[str, nn.BatchNorm1d]]:
        out = self.extractor.batchnorms()
        out.append(("classifier.hidden_bn", self.cls_bn))
        out.append(("discriminator.bn1", self.disc_bn1))
        out.append(("discriminator.bn2", self.disc_bn2))
        return out

    # state ------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.all_params().items()}
        for name, bn in self.batchnorms():
            for key, arr in bn.named_state(name).items():
                out[key] = arr.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.all_params()
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()
            p.grad = None
        for name, bn in self.batchnorms():
            bn.load_state(name, state)


# loss heads ---------------------------------------------------------------


def am_softmax_loss(
    features: Tensor,
    labels: np.ndarray,
    weights: Tensor,
    margin: float = 0.6,
    scale: float = 30.0,
) -> Tensor:
    """Additive-margin softmax over cosine similarities.

    ``features``: [N, D] activations; ``weights``: [D, S] class directions.
    Both are length-normalized, the true-class cosine is reduced by
    ``margin``, everything is multiplied by ``scale``, and the result is
    averaged cross-entropy in log-sum-exp form. With margin 0 and scale 1
    this is plain softmax cross-entropy over the cosines.
    """
    labels = np.asarray(labels)
    n, d = features.shape
    if weights.ndim != 2 or weights.shape[0] != d:
        raise ValueError(f"weights shape {weights.shape} incompatible with features [{n}, {d}]")
    s = weights.shape[1]
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= s:
        raise ValueError(f"labels must lie in [0, {s - 1}]")
    fhat = ad.l2_normalize(features, axis=1)
    what = ad.l2_normalize(weights, axis=0)
    cos = ad.matmul(fhat, what)
    onehot = np.zeros((n, s))
    onehot[np.arange(n), labels] = 1.0
    logits = ad.mul(ad.sub(cos, Tensor(margin * onehot)), Tensor(float(scale)))
    lse = ad.logsumexp(logits, axis=-1)
    true_logit = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=-1, keepdims=True)
    return ad.tmean(ad.sub(lse, true_logit))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Plain softmax cross-entropy over unnormalized logits [N, S]."""
    labels = np.asarray(labels)
    n, s = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= s:
        raise ValueError("labels must be one index in [0, S) per row")
    onehot = np.zeros((n, s))
    onehot[np.arange(n), labels] = 1.0
    lse = ad.logsumexp(logits, axis=-1)
    true_logit = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=-1, keepdims=True)
    return ad.tmean(ad.sub(lse, true_logit))


def bce_loss(probabilities: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from probabilities in the open unit interval.

    Training uses :func:`danse.autodiff.bce_with_logits` on the raw
    discriminator outputs instead, which stays stable for any logit.
    """
    p = probabilities
    d = np.asarray(targets, dtype=np.float64)
    if p.shape != d.shape:
        raise ValueError(f"probabilities shape {p.shape} != targets shape {d.shape}")
    if np.any(p.data <= 0.0) or np.any(p.data >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    term = ad.add(
        ad.mul(Tensor(-d), ad.tlog(p)),
        ad.mul(Tensor(d - 1.0), ad.tlog(ad.sub(Tensor(1.0), p))),
    )
    return ad.tmean(term)


grad_reverse = ad.grad_reverse
