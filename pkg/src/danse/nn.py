"""Network layers built on the autodiff tape.

Variable-length batches travel as a ``Packed`` pair: one [C, sum(T_i)]
tensor holding every sequence back to back, plus the per-sequence
lengths. Pointwise layers and batch statistics operate on the packed
tensor directly (batch-norm statistics then span every frame in the
batch, which is the intended semantics); only convolutions with a
temporal extent or a stride split it back into per-sequence pieces.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from danse import autodiff as ad
from danse.autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Packed(NamedTuple):
    data: Tensor  # [C, total_frames]
    sizes: tuple[int, ...]


def pack(pieces: list[Tensor]) -> Packed:
    if len(pieces) == 1:
        return Packed(pieces[0], (pieces[0].shape[1],))
    return Packed(ad.concat(pieces, axis=1), tuple(p.shape[1] for p in pieces))


def unpack(p: Packed) -> list[Tensor]:
    if len(p.sizes) == 1:
        return [p.data]
    return ad.split(p.data, list(p.sizes), axis=1)


class Conv1d:
    """1-D cross-correlation layer over [C, T] sequences."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        *,
        rng: np.random.Generator,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels, kernel), in_channels * kernel),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def out_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.kernel) // self.stride + 1

    def forward_packed(self, p: Packed) -> Packed:
        if self.kernel == 1 and self.stride == 1:
            # Pointwise and stride-free: windows never cross sequence
            # boundaries, so the packed tensor can be convolved whole.
            return Packed(self(p.data), p.sizes)
        outs = [self(piece) for piece in unpack(p)]
        return pack(outs)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Linear:
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator):
        self.weight = Tensor(
            kaiming_uniform(rng, (in_features, out_features), in_features), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class BatchNorm1d:
    """Per-channel normalization with running statistics for eval mode.

    Train mode normalizes with biased batch statistics and updates the
    running estimates as (1 - momentum) * running + momentum * batch.
    Eval mode requires statistics populated by training or a checkpoint.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.ready = False

    def _apply(self, x: Tensor, axes: tuple[int, ...], param_shape: tuple[int, ...], mode: str) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"batch-norm mode must be 'train' or 'eval', got {mode!r}")
        gamma = ad.reshape(self.gamma, param_shape)
        beta = ad.reshape(self.beta, param_shape)
        if mode == "train":
            mu = ad.tmean(x, axis=axes, keepdims=True)
            centered = ad.sub(x, mu)
            var = ad.tmean(ad.mul(centered, centered), axis=axes, keepdims=True)
            xhat = ad.div(centered, ad.tsqrt(ad.add(var, Tensor(self.eps))))
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1.0 - m) * self.running_var + m * var.data.reshape(-1)
            self.ready = True
        else:
            if not self.ready:
                raise RuntimeError(
                    "batch-norm eval mode requires running statistics; "
                    "train first or load a checkpoint"
                )
            rm = Tensor(self.running_mean.reshape(param_shape))
            rv = Tensor(self.running_var.reshape(param_shape))
            xhat = ad.div(ad.sub(x, rm), ad.tsqrt(ad.add(rv, Tensor(self.eps))))
        return ad.add(ad.mul(xhat, gamma), beta)

    def forward_time(self, x: Tensor, mode: str) -> Tensor:
        """x: [C, T]; statistics span the time axis."""
        return self._apply(x, (1,), (self.num_features, 1), mode)

    def forward_features(self, x: Tensor, mode: str) -> Tensor:
        """x: [N, D]; statistics span the batch axis."""
        return self._apply(x, (0,), (self.num_features,), mode)

    def forward_packed(self, p: Packed, mode: str) -> Packed:
        return Packed(self.forward_time(p.data, mode), p.sizes)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def named_state(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }

    def load_state(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        self.running_mean = state[f"{prefix}.running_mean"].copy()
        self.running_var = state[f"{prefix}.running_var"].copy()
        self.ready = True


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float,
    mode: str,
    running_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Normalize [N, C, T] per channel over the batch and time axes."""
    if x.ndim != 3:
        raise ValueError(f"batchnorm1d expects [N, C, T], got shape {x.shape}")
    n, c, t = x.shape
    if n * t < 1:
        raise ValueError("batchnorm1d requires at least one frame")
    shape = (1, c, 1)
    g = ad.reshape(gamma, shape)
    b = ad.reshape(beta, shape)
    if mode == "train":
        mu = ad.tmean(x, axis=(0, 2), keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.mul(centered, centered), axis=(0, 2), keepdims=True)
        xhat = ad.div(centered, ad.tsqrt(ad.add(var, Tensor(eps))))
    elif mode == "eval":
        if running_stats is None:
            raise RuntimeError("batchnorm1d eval mode requires running statistics")
        rm, rv = running_stats
        xhat = ad.div(
            ad.sub(x, Tensor(rm.reshape(shape))),
            ad.tsqrt(ad.add(Tensor(rv.reshape(shape)), Tensor(eps))),
        )
    else:
        raise ValueError(f"batchnorm1d mode must be 'train' or 'eval', got {mode!r}")
    return ad.add(ad.mul(xhat, g), b)


class AttentionPool:
    """Scores frames with v'tanh(W h + b) + k and pools weighted statistics."""

    def __init__(self, n_features: int, attn_dim: int, var_floor: float = 1e-8, *, rng: np.random.Generator):
        self.n_features = n_features
        self.attn_dim = attn_dim
        self.var_floor = var_floor
        self.w = Tensor(kaiming_uniform(rng, (attn_dim, n_features), n_features), requires_grad=True)
        self.b = Tensor(np.zeros(attn_dim), requires_grad=True)
        self.v = Tensor(kaiming_uniform(rng, (attn_dim,), attn_dim), requires_grad=True)
        self.k = Tensor(0.0, requires_grad=True)

    def weights(self, h: Tensor) -> Tensor:
        """h: [nF, T] -> attention weights [T] summing to one."""
        pre = ad.add(ad.matmul(self.w, h), ad.reshape(self.b, (self.attn_dim, 1)))
        scores = ad.add(ad.matmul(ad.reshape(self.v, (1, self.attn_dim)), ad.tanh(pre)), self.k)
        return ad.softmax(ad.reshape(scores, (h.shape[1],)), axis=-1)

    def stats(self, h: Tensor, alpha: Tensor) -> Tensor:
        """Weighted mean and floored standard deviation, concatenated [2*nF]."""
        col = ad.reshape(alpha, (h.shape[1], 1))
        mu = ad.matmul(h, col)
        second = ad.matmul(ad.mul(h, h), col)
        var = ad.sub(second, ad.mul(mu, mu))
        sd = ad.tsqrt(ad.clamp_min(var, self.var_floor))
        return ad.reshape(ad.concat([mu, sd], axis=0), (2 * self.n_features,))

    def __call__(self, h: Tensor) -> Tensor:
        return self.stats(h, self.weights(h))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w": self.w,
            f"{prefix}.b": self.b,
            f"{prefix}.v": self.v,
            f"{prefix}.k": self.k,
        }


class Bottleneck:
    """Residual block: 1x1 reduce, 3x1 (optionally strided), 1x1 expand.

    Every convolution is followed by batch-norm; the first two also by an
    ELU. The final ELU fires after the residual addition. A projection
    shortcut (1x1 conv + batch-norm) handles channel or stride changes.
    """

    def __init__(self, in_channels: int, width: int, expansion: int, stride: int, *, rng: np.random.Generator):
        out_channels = width * expansion
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = Conv1d(in_channels, width, 1, rng=rng)
        self.bn1 = BatchNorm1d(width)
        self.conv2 = Conv1d(width, width, 3, stride=stride, padding=1, rng=rng)
        self.bn2 = BatchNorm1d(width)
        self.conv3 = Conv1d(width, out_channels, 1, rng=rng)
        self.bn3 = BatchNorm1d(out_channels)
        if in_channels != out_channels or stride != 1:
            self.proj = Conv1d(in_channels, out_channels, 1, stride=stride, rng=rng)
            self.bn_proj = BatchNorm1d(out_channels)
        else:
            self.proj = None
            self.bn_proj = None

    def forward_packed(self, p: Packed, mode: str) -> Packed:
        y = self.bn1.forward_packed(self.conv1.forward_packed(p), mode)
        y = Packed(ad.elu(y.data), y.sizes)
        y = self.bn2.forward_packed(self.conv2.forward_packed(y), mode)
        y = Packed(ad.elu(y.data), y.sizes)
        y = self.bn3.forward_packed(self.conv3.forward_packed(y), mode)
        if self.proj is not None:
            shortcut = self.bn_proj.forward_packed(self.proj.forward_packed(p), mode)
        else:
            shortcut = p
        assert shortcut.sizes == y.sizes
        return Packed(ad.elu(ad.add(y.data, shortcut.data)), y.sizes)

    def _parts(self):
        parts = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
                 ("bn2", self.bn2), ("conv3", self.conv3), ("bn3", self.bn3)]
        if self.proj is not None:
            parts += [("proj", self.proj), ("bn_proj", self.bn_proj)]
        return parts

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, part in self._parts():
            out.update(part.named_params(f"{prefix}.{name}"))
        return out

    def named_state(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, part in self._parts():
            if isinstance(part, BatchNorm1d):
                out.update(part.named_state(f"{prefix}.{name}"))
        return out

    def batchnorms(self) -> list[tuple[str, BatchNorm1d]]:
        return [(name, part) for name, part in self._parts() if isinstance(part, BatchNorm1d)]


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into an [N, D] matrix."""
    d = rows[0].shape[0]
    if len(rows) == 1:
        return ad.reshape(rows[0], (1, d))
    return ad.concat([ad.reshape(r, (1, d)) for r in rows], axis=0)
