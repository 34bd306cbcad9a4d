"""Network building blocks: MLP stacks, deep-set encoder, hypernetwork,
externally parameterised task network, LSTM language encoder, optimizers and
the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = ad.LEAKY_SLOPE


def he_bound(fan_in: int, slope: float = LEAKY_SLOPE) -> float:
    # uniform(-b, b) has variance b^2 / 3 = 2 / (fan_in * (1 + slope^2))
    return float(np.sqrt(6.0 / (fan_in * (1.0 + slope**2))))


def init_weights(shape, scheme: str, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Fan-in scaled uniform weights (``"he"``) or zeros (``"zeros"``)."""
    shape = tuple(shape)
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "he":
        b = gain * he_bound(shape[0])
        return rng.uniform(-b, b, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Anything holding named parameter tensors."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


class MlpStack(Module):
    """Affine layers with leaky-ReLU between them.

    ``final_activation`` controls whether the last layer is followed by the
    nonlinearity too.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 final_activation: bool = False, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.final_activation = final_activation
        self.name = name
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(_param(init_weights((a, b), "he", rng), f"{name}.w{i}"))
            self.biases.append(_param(init_weights((1, b), "zeros", rng), f"{name}.b{i}"))

    @property
    def depth(self) -> int:
        return len(self.weights)

    def named_parameters(self, prefix=""):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [(prefix + w.name, w), (prefix + b.name, b)]
        return out

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(net: MlpStack, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != net.widths[0]:
        raise ad.DimensionError(f"{net.name}: expected width {net.widths[0]}, got {x.shape[-1]}")
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = ad.add(ad.matmul(x, w), b)
        if i < net.depth - 1 or net.final_activation:
            x = ad.leaky_relu(x)
    return x


class DeepSetEncoder(Module):
    """Per-datum MLP, element-wise max across the set, then a pooled MLP."""

    def __init__(self, z_dim: int, hidden: int, rng: np.random.Generator, name: str = "M"):
        self.z_dim = z_dim
        self.hidden = hidden
        self.per_datum = MlpStack([2 * z_dim, hidden, hidden], rng, final_activation=True,
                                  name=f"{name}.per_datum")
        self.pooled = MlpStack([hidden, hidden, z_dim], rng, name=f"{name}.pooled")

    def named_parameters(self, prefix=""):
        return self.per_datum.named_parameters(prefix) + self.pooled.named_parameters(prefix)

    def __call__(self, pairs) -> Tensor:
        return deep_set_forward(self, pairs)


def deep_set_forward(enc: DeepSetEncoder, pairs) -> Tensor:
    """``pairs`` is an (n, 2Z) tensor or a ``(z_in, z_target)`` tuple of (n, Z)."""
    if isinstance(pairs, tuple):
        pairs = ad.concat(list(pairs), axis=1)
    pairs = ad.as_tensor(pairs)
    if pairs.data.ndim != 2 or pairs.shape[0] == 0:
        raise ValueError("deep set input must be a nonempty (n, 2Z) set")
    h = enc.per_datum(pairs)
    return enc.pooled(ad.reduce_max(h, axis=0))


@dataclass(frozen=True)
class ParamLayout:
    """Slicing of a flat vector into (weight, bias) per layer.

    Layers in forward order, weight (row-major, shape in x out) then bias.
    """

    widths: tuple

    @property
    def slices(self) -> list[tuple[tuple[int, int, tuple], tuple[int, int, tuple]]]:
        out = []
        pos = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = (pos, pos + a * b, (a, b))
            pos += a * b
            bias = (pos, pos + b, (1, b))
            pos += b
            out.append((w, bias))
        return out

    @property
    def size(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def flatten(self, net: MlpStack) -> np.ndarray:
        if tuple(net.widths) != self.widths:
            raise ValueError("layout/widths mismatch")
        parts = []
        for w, b in zip(net.weights, net.biases):
            parts += [w.data.reshape(-1), b.data.reshape(-1)]
        return np.concatenate(parts)


@dataclass(frozen=True)
class TaskNetwork:
    """Architecture of the task network; parameters are supplied per call."""

    z_dim: int
    hidden: int
    n_layers: int = 4
    in_dim: int | None = None

    @property
    def widths(self) -> tuple:
        first = self.in_dim or self.z_dim
        return (first,) + (self.hidden,) * (self.n_layers - 1) + (self.z_dim,)

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(self.widths)

    @property
    def param_count(self) -> int:
        return self.layout.size

    def __call__(self, params, x) -> Tensor:
        return task_net_apply(self, params, x)


def task_net_apply(desc: TaskNetwork, params, x) -> Tensor:
    params = ad.as_tensor(params)
    if params.data.size != desc.param_count:
        raise ad.DimensionError(
            f"task network needs {desc.param_count} parameters, got {params.data.size}")
    x = ad.as_tensor(x)
    layers = desc.layout.slices
    for i, ((w0, w1, wshape), (b0, b1, bshape)) in enumerate(layers):
        w = ad.reshape(ad.take_flat(params, w0, w1), wshape)
        b = ad.reshape(ad.take_flat(params, b0, b1), bshape)
        x = ad.add(ad.matmul(x, w), b)
        if i < len(layers) - 1:
            x = ad.leaky_relu(x)
    return x


class HyperNetwork(Module):
    """MLP from a function embedding to the flat task-network parameters.

    The output layer is scaled per slice so the generated task-network
    weights start at the same fan-in scale as a directly initialised layer.
    """

    def __init__(self, z_dim: int, hidden: int, target: TaskNetwork,
                 rng: np.random.Generator, n_layers: int = 4, name: str = "H"):
        self.target = target
        self.layout = target.layout
        widths = [z_dim] + [hidden] * (n_layers - 1) + [self.layout.size]
        self.mlp = MlpStack(widths, rng, name=name)
        w = self.mlp.weights[-1].data
        col_scale = np.zeros(self.layout.size)
        for (w0, w1, wshape), _ in self.layout.slices:
            col_scale[w0:w1] = he_bound(wshape[0]) / he_bound(hidden) / np.sqrt(hidden)
        # biases of the task network start small rather than at zero
        for _, (b0, b1, _) in self.layout.slices:
            col_scale[b0:b1] = 0.1 / np.sqrt(hidden)
        w *= col_scale[None, :]

    def named_parameters(self, prefix=""):
        return self.mlp.named_parameters(prefix)

    def __call__(self, z) -> Tensor:
        return hyper_forward(self, z)


def hyper_forward(h: HyperNetwork, z) -> Tensor:
    z = ad.as_tensor(z)
    if z.shape[-1] != h.mlp.widths[0]:
        raise ad.DimensionError(f"hypernetwork expects width {h.mlp.widths[0]}, got {z.shape}")
    return h.mlp(z)


PAD = "<PAD>"


class LstmEncoder(Module):
    """Token embeddings -> stacked LSTM -> two fully connected layers to Z."""

    def __init__(self, vocab: Sequence[str], hidden: int, z_dim: int, n_layers: int,
                 rng: np.random.Generator, name: str = "L"):
        self.vocab = list(vocab)
        if PAD not in self.vocab:
            self.vocab.insert(0, PAD)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self.hidden = hidden
        self.n_layers = n_layers
        self.embedding = _param(rng.uniform(-0.1, 0.1, size=(len(self.vocab), hidden)),
                                f"{name}.embedding")
        self.cells = []
        for i in range(n_layers):
            b = 1.0 / np.sqrt(hidden)
            w = _param(rng.uniform(-b, b, size=(2 * hidden, 4 * hidden)), f"{name}.lstm{i}.w")
            bias = np.zeros((1, 4 * hidden))
            bias[0, hidden:2 * hidden] = 1.0  # forget gate
            self.cells.append((w, _param(bias, f"{name}.lstm{i}.b")))
        self.head = MlpStack([hidden, hidden, z_dim], rng, name=f"{name}.head")

    def named_parameters(self, prefix=""):
        out = [(prefix + self.embedding.name, self.embedding)]
        for w, b in self.cells:
            out += [(prefix + w.name, w), (prefix + b.name, b)]
        return out + self.head.named_parameters(prefix)

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise KeyError(f"unknown token {e.args[0]!r}") from None

    def __call__(self, tokens) -> Tensor:
        return lstm_encode(self, tokens)


def lstm_cell(w: Tensor, b: Tensor, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    n = h.shape[1]
    gates = ad.add(ad.matmul(ad.concat([x, h], axis=1), w), b)
    i = ad.sigmoid(ad.take_cols(gates, 0, n))
    f = ad.sigmoid(ad.take_cols(gates, n, 2 * n))
    o = ad.sigmoid(ad.take_cols(gates, 2 * n, 3 * n))
    g = ad.tanh(ad.take_cols(gates, 3 * n, 4 * n))
    c = ad.add(ad.mul(f, c), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def lstm_encode(enc: LstmEncoder, tokens) -> Tensor:
    """Encode one token sequence, or a batch (list of equal-length sequences)."""
    batch = tokens if tokens and isinstance(tokens[0], (list, tuple)) else [tokens]
    if len({len(s) for s in batch}) != 1:
        raise ValueError("sequences in a batch must share a (padded) length")
    ids = np.array([enc.token_ids(s) for s in batch])
    n = len(batch)
    hs = [Tensor(np.zeros((n, enc.hidden))) for _ in enc.cells]
    cs = [Tensor(np.zeros((n, enc.hidden))) for _ in enc.cells]
    for t in range(ids.shape[1]):
        x = ad.take_rows(enc.embedding, ids[:, t])
        for layer, (w, b) in enumerate(enc.cells):
            hs[layer], cs[layer] = lstm_cell(w, b, x, hs[layer], cs[layer])
            x = hs[layer]
    return enc.head(hs[-1])


def pad_tokens(tokens: Sequence[str], length: int) -> list[str]:
    if len(tokens) > length:
        raise ValueError(f"sequence longer than padded length {length}")
    return [PAD] * (length - len(tokens)) + list(tokens)


class Optimizer:
    """Per-parameter moment buffers plus a step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ad.DimensionError(f"gradient shape {g.shape} != parameter {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise ad.NonFiniteError(f"non-finite gradient for {p.name}; step rejected")
        self.t += 1
        self._update(grads, lr)

    def _update(self, grads, lr):
        raise NotImplementedError

    def state(self) -> list[np.ndarray]:
        raise NotImplementedError


class Adam(Optimizer):
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads, lr):
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            denom = np.sqrt(v)
            denom *= 1.0 / np.sqrt(c2)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= lr / c1
            p.data -= denom

    def state(self):
        return self.m + self.v


class RMSProp(Optimizer):
    """RMSProp with epsilon inside the square root."""

    def __init__(self, params, decay: float = 0.9, eps: float = 1e-10):
        super().__init__(params)
        self.decay, self.eps = decay, eps
        self.ms = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads, lr):
        rho = self.decay
        for p, g, ms in zip(self.params, grads, self.ms):
            ms *= rho
            ms += (1.0 - rho) * g * g
            p.data -= lr * g / np.sqrt(ms + self.eps)

    def state(self):
        return list(self.ms)


def make_optimizer(kind: str, params) -> Optimizer:
    kind = kind.lower()
    if kind == "adam":
        return Adam(params)
    if kind == "rmsprop":
        return RMSProp(params)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(opt: Optimizer, grads, lr: float) -> list[Tensor]:
    opt.step(grads, lr)
    return opt.params


@dataclass
class LrSchedule:
    base_lr: float
    meta_lr: float
    base_decay: float = 0.85
    meta_decay: float = 0.85
    base_min: float = 3e-8
    meta_min: float = 1e-7
    period: int = 100

    def rates(self, epoch: int) -> tuple[float, float]:
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        k = epoch // self.period
        return (_decayed(self.base_lr, self.base_decay, self.base_min, k),
                _decayed(self.meta_lr, self.meta_decay, self.meta_min, k))


def _decayed(lr: float, decay: float, floor: float, k: int) -> float:
    if lr <= floor:
        return lr
    return max(lr * decay**k, floor)


def lr_schedule_step(sched: LrSchedule, epoch: int) -> tuple[float, float]:
    return sched.rates(epoch)


@dataclass
class ParamSet:
    """Named collection used for checkpoints and snapshots."""

    items: list = field(default_factory=list)

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for _, p in self.items]

    def restore(self, arrays) -> None:
        for (_, p), a in zip(self.items, arrays):
            p.data[...] = a
