"""Parameterized layers and the named parameter store.

Initialization convention: dense weights ~ uniform(-1/sqrt(in), +1/sqrt(in)),
biases zero, always drawn from an explicit seeded generator. Autoregressive
mask degrees follow a sequential modulo scheme offset by the seed, so the
same seed always yields the same masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeds import derive_seed
from .tensor import Tensor, gather, matmul

ACTIVATIONS = ("none", "leaky_relu", "tanh")
LEAKY_SLOPE = 0.2


@dataclass
class DenseLayer:
    weight: Tensor  # [out, in]
    bias: Tensor    # [out]
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"weight/bias shapes inconsistent: {self.weight.shape} vs {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MaskedDenseLayer(DenseLayer):
    # binary mask on the weight; effective weight is weight * mask
    mask: Tensor = None  # type: ignore[assignment]

    def __post_init__(self):
        super().__post_init__()
        if self.mask is None or self.mask.shape != self.weight.shape:
            raise ValueError("mask must match the weight shape")


def init_dense(in_dim: int, out_dim: int, rng: np.random.Generator,
               activation: str = "none", dtype=np.float32) -> DenseLayer:
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
    b = np.zeros(out_dim, dtype=dtype)
    return DenseLayer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      activation)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "leaky_relu":
        return x.leaky_relu(LEAKY_SLOPE)
    if activation == "tanh":
        return x.tanh()
    return x


def effective_weight(layer: DenseLayer) -> Tensor:
    if isinstance(layer, MaskedDenseLayer):
        return layer.weight * layer.mask
    return layer.weight


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    """activation(weight @ x + bias) for a vector input."""
    if x.shape != (layer.in_dim,):
        raise ValueError(f"dense input shape {x.shape} != ({layer.in_dim},)")
    return _activate(matmul(effective_weight(layer), x) + layer.bias, layer.activation)


def dense_forward_batch(layer: DenseLayer, x: Tensor) -> Tensor:
    """Row-batched forward: x is [batch, in], result [batch, out]."""
    if x.data.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ValueError(f"batched dense input shape {x.shape} != (B, {layer.in_dim})")
    b = x.shape[0]
    w_t = gather(effective_weight(layer),
                 np.arange(layer.in_dim * layer.out_dim).reshape(
                     layer.out_dim, layer.in_dim).T)
    pre = matmul(x, w_t)
    bias_rows = gather(layer.bias, np.tile(np.arange(layer.out_dim), (b, 1)))
    return _activate(pre + bias_rows, layer.activation)


def dense_eval_batch(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Plain-numpy twin of dense_forward_batch (no tape)."""
    w = layer.weight.data
    if isinstance(layer, MaskedDenseLayer):
        w = w * layer.mask.data
    out = x @ w.T + layer.bias.data
    if layer.activation == "leaky_relu":
        out = np.where(out > 0, out, LEAKY_SLOPE * out)
    elif layer.activation == "tanh":
        out = np.tanh(out)
    return out


# -- autoregressive masks ---------------------------------------------------------


def make_autoregressive_masks(d: int, hidden: list[int], seed: int
                              ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Binary masks for a conditioner MLP d -> hidden... -> 2d.

    Output unit i (in each of the two d-sized halves) may depend only on
    inputs with index strictly below i; the first unit is a pure bias. For
    d == 1 the conditioner degenerates to a constant (all masks zero).

    Returns (masks, degrees); masks[k] has shape [width_{k+1}, width_k].
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    in_deg = np.arange(1, d + 1)
    degrees = [in_deg]
    for k, width in enumerate(hidden):
        if d == 1:
            deg = np.zeros(width, dtype=int)
        else:
            offset = derive_seed(seed, f"mask-layer-{k}") % (d - 1)
            deg = ((np.arange(width) + offset) % (d - 1)) + 1
        degrees.append(deg)
    out_deg = np.tile(np.arange(1, d + 1), 2)  # location and log-scale halves
    degrees.append(out_deg)

    masks: list[np.ndarray] = []
    for k in range(len(degrees) - 1):
        prev, nxt = degrees[k], degrees[k + 1]
        last = k == len(degrees) - 2
        if d == 1:
            m = np.zeros((len(nxt), len(prev)), dtype=np.float32)
        elif last:
            m = (nxt[:, None] > prev[None, :]).astype(np.float32)
        else:
            m = (nxt[:, None] >= prev[None, :]).astype(np.float32)
        masks.append(m)
    return masks, degrees


def masked_mlp(d: int, hidden: list[int], seed: int, dtype=np.float32,
               zero_last: bool = False) -> list[MaskedDenseLayer]:
    """Seeded conditioner MLP with autoregressive masks, leaky_relu hidden units.

    zero_last starts the output layer at zero weights so the transform the
    conditioner drives begins as an identity (bias-only) map.
    """
    masks, _ = make_autoregressive_masks(d, hidden, seed)
    widths = [d] + list(hidden) + [2 * d]
    rng = np.random.default_rng(derive_seed(seed, "masked-mlp"))
    layers = []
    for k in range(len(widths) - 1):
        last = k == len(widths) - 2
        base = init_dense(widths[k], widths[k + 1], rng,
                          "none" if last else "leaky_relu", dtype)
        if last and zero_last:
            base.weight.data[...] = 0.0
        layers.append(MaskedDenseLayer(base.weight, base.bias, base.activation,
                                       Tensor(masks[k].astype(dtype))))
    return layers


# -- parameter store ---------------------------------------------------------------


@dataclass
class ParamStore:
    """Ordered name -> tensor map with per-entry trainability."""

    _entries: dict[str, Tensor] = field(default_factory=dict)
    _trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = trainable
        self._entries[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._entries[name].requires_grad = flag

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._entries.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=self._trainable[name]),
                    self._trainable[name])
        return out

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None
