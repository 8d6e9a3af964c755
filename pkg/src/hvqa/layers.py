"""Parameterized layers: dense/MLP, convolution stack, batch norm, LSTM."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError
from . import tensor as T
from .tensor import Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Container that registers parameter tensors and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", [])
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray):
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            getattr(self, head)[...] = value

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def num_parameters(self) -> int:
        return T.parameters_numel(self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_rng(self, rng: np.random.Generator):
        """Hand a generator to every dropout layer."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot(rng, (n_in, n_out), n_in, n_out, dtype)
        if bias:
            self.bias = zeros((n_out,), dtype)
        else:
            object.__setattr__(self, "bias", None)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Dense expects last extent {self.n_in}, got {x.shape}")
        if x.ndim == 1:
            return self(x.reshape(1, -1)).reshape(self.n_out)
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Dropout(Module):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` in training."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * (keep / (1 - self.rate)).astype(x.dtype)


class MLP(Module):
    """Affine layers with ReLU between them; the last layer is affine only.

    ``final_activation`` also puts a ReLU after the last layer, which is how
    the per-cell embedding stacks are built.
    """

    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator,
        dtype=np.float32,
        dropout: float = 0.0,
        final_activation: bool = False,
    ):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.dims = list(dims)
        self.final_activation = final_activation
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            setattr(self, f"fc{i}", Dense(dims[i], dims[i + 1], rng, dtype))
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = getattr(self, f"fc{i}")(x)
            if i < self.n_layers - 1:
                x = self.drop(x.relu())
            elif self.final_activation:
                x = x.relu()
        return x


class BatchNorm(Module):
    """Batch normalization over all axes but the channel (last) axis.

    Training mode normalizes with batch statistics and updates the running
    averages as ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros((channels,), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            if x.ndim < 2 or x.shape[0] < 2:
                raise ValueError("batch norm in training mode needs a batch of at least 2")
            y, mu, var = T.batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mu
            self.running_var[...] = m * self.running_var + (1 - m) * var
            return y
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
        return (x - self.running_mean) * (self.gamma * inv) + self.beta


class Conv2D(Module):
    def __init__(self, kernel: int, c_in: int, c_out: int, stride: int, rng, dtype=np.float32, padding="same"):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = glorot(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, kernel * kernel * c_out, dtype)
        self.bias = zeros((c_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding) + self.bias


class ConvStack(Module):
    """Image encoder: conv -> (batch norm) -> ReLU per layer.

    ``layers`` is a sequence of ``(filters, kernel, stride)`` triples.
    """

    def __init__(self, c_in: int, layers: Sequence[tuple[int, int, int]], rng, dtype=np.float32, batch_norm=True):
        super().__init__()
        if not layers:
            raise ValueError("conv stack needs at least one layer")
        self.spec = [tuple(l) for l in layers]
        self.batch_norm = batch_norm
        c = c_in
        for i, (filters, kernel, stride) in enumerate(self.spec):
            setattr(self, f"conv{i}", Conv2D(kernel, c, filters, stride, rng, dtype))
            if batch_norm:
                setattr(self, f"bn{i}", BatchNorm(filters, dtype))
            c = filters
        self.out_channels = c

    def output_grid(self, height: int, width: int) -> tuple[int, int]:
        """Spatial extent of the feature map; raises if any layer sees less than its kernel."""
        for filters, kernel, stride in self.spec:
            if height < kernel or width < kernel:
                raise ShapeError(f"{height}x{width} input is smaller than a {kernel}x{kernel} kernel")
            height, width = -(-height // stride), -(-width // stride)
        return height, width

    def __call__(self, image: Tensor) -> Tensor:
        self.output_grid(image.shape[-3], image.shape[-2])
        x = image
        for i in range(len(self.spec)):
            x = getattr(self, f"conv{i}")(x)
            if self.batch_norm:
                x = getattr(self, f"bn{i}")(x)
            x = x.relu()
        return x


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng, dtype=np.float32):
        super().__init__()
        self.vocab = vocab
        self.table = glorot(rng, (vocab, dim), vocab, dim, dtype)

    def __call__(self, ids) -> Tensor:
        return T.take_rows(self.table, ids)


class LSTM(Module):
    """Single-layer LSTM returning the hidden state after the last real token.

    Gate order in the fused weight matrices is input, forget, cell, output.
    """

    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        self.w_x = glorot(rng, (n_in, 4 * hidden), n_in, 4 * hidden, dtype)
        self.w_h = glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor, lengths) -> Tensor:
        """``x`` is ``[B, T, n_in]``; ``lengths`` gives the real length of each row."""
        B, steps, _ = x.shape
        lengths = np.asarray(lengths)
        H = self.hidden
        dtype = x.dtype
        xw = T.matmul(x, self.w_x) + self.bias
        h = Tensor(np.zeros((B, H), dtype=dtype))
        c = Tensor(np.zeros((B, H), dtype=dtype))
        for t in range(int(lengths.max())):
            z = xw[:, t, :] + T.matmul(h, self.w_h)
            i = z[:, :H].sigmoid()
            f = z[:, H : 2 * H].sigmoid()
            g = z[:, 2 * H : 3 * H].tanh()
            o = z[:, 3 * H :].sigmoid()
            c_new = f * c + i * g
            h_new = o * c_new.tanh()
            live = (t < lengths).astype(dtype)[:, None]
            if live.all():
                c, h = c_new, h_new
            else:
                c = c_new * live + c * (1 - live)
                h = h_new * live + h * (1 - live)
        return h


class QuestionEncoder(Module):
    """Word embedding followed by an LSTM; returns the final hidden state."""

    def __init__(self, vocab: int, embed_dim: int, hidden: int, rng, dtype=np.float32):
        super().__init__()
        self.vocab = vocab
        self.embed = Embedding(vocab, embed_dim, rng, dtype)
        self.lstm = LSTM(embed_dim, hidden, rng, dtype)

    def __call__(self, tokens, lengths=None) -> Tensor:
        """``tokens`` is ``[B, T]`` (negative entries are padding) or an unbatched sequence."""
        tok = np.asarray(tokens)
        single = tok.ndim == 1
        if single:
            tok = tok[None]
        if lengths is None:
            lengths = (tok >= 0).sum(axis=1)
        lengths = np.asarray(lengths)
        if tok.shape[1] == 0 or (lengths == 0).any():
            raise ValueError("question token sequence is empty")
        real = np.arange(tok.shape[1])[None, :] < lengths[:, None]
        if (tok[real] >= self.vocab).any() or (tok[real] < 0).any():
            raise ValueError(f"token index outside vocabulary of size {self.vocab}")
        ids = np.where(real, tok, 0)
        h = self.lstm(self.embed(ids), lengths)
        return h[0] if single else h


def lstm_encode(tokens, encoder: QuestionEncoder) -> Tensor:
    return encoder(tokens)
