"""Toy style-based generator.

A mapping MLP sends a Gaussian draw z to a style vector w; an L-layer
synthesis stack turns one style vector per layer (the extended code, an
L x d matrix) into a grayscale image in [0, 1]. Each synthesis layer
doubles the resolution of a learned 4x4 constant feature map, scales and
shifts feature channels by an affine function of its style row, adds a
learned multiple of that layer's noise image, and applies leaky_relu; a
final per-pixel projection squashes channels to one through (tanh+1)/2,
so side = 4 * 2**layer_count.

Two modes: `fixed` uses seeded random weights (its range defines the image
domain, giving exact in-domain ground truth for recovery tests); `trained`
fits the same architecture as the decoder of a blob-image autoencoder.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalAbort
from .nn import DenseLayer, ParamStore, dense_forward, init_dense
from .seeds import derive_seed
from .tensor import Tensor, backward, gather, linear2d, matmul, ones, tensor

MAPPING_LAYERS = 2  # hidden layers in the mapping MLP


@dataclass
class ExtendedLatent:
    """One style vector per synthesis layer (L x d)."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValueError(f"extended latent must be [L, d], got {self.rows.shape}")

    @classmethod
    def broadcast(cls, w: np.ndarray, layer_count: int) -> "ExtendedLatent":
        """All rows identical: the plain style-space special case."""
        return cls(np.tile(np.asarray(w, dtype=np.float32), (layer_count, 1)))


@dataclass
class Image:
    """Grayscale image with values in [0, 1]; side is a power of two."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        side = self.pixels.shape[0]
        if self.pixels.ndim != 2 or self.pixels.shape[1] != side:
            raise ValueError(f"image must be square, got {self.pixels.shape}")
        if side & (side - 1):
            raise ValueError(f"image side {side} is not a power of two")

    @property
    def side(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class GeneratorBundle:
    mapping: ParamStore
    synthesis: ParamStore
    latent_dim: int
    layer_count: int
    channels: int
    mapping_hidden: int
    mode: str = "fixed"
    seed: int = 0
    dtype: type = np.float32
    noise_inputs: list[np.ndarray] | None = None  # None means all-zero

    @property
    def side(self) -> int:
        return 4 * 2 ** self.layer_count

    def noise_shapes(self) -> list[tuple[int, int]]:
        return [(4 * 2 ** i, 4 * 2 ** i) for i in range(1, self.layer_count + 1)]

    def clone(self) -> "GeneratorBundle":
        return GeneratorBundle(self.mapping.clone(), self.synthesis.clone(),
                               self.latent_dim, self.layer_count, self.channels,
                               self.mapping_hidden, self.mode, self.seed, self.dtype,
                               None if self.noise_inputs is None
                               else [n.copy() for n in self.noise_inputs])


def build_generator(latent_dim: int = 16, layer_count: int = 3, channels: int = 8,
                    mapping_hidden: int = 32, seed: int = 0, mode: str = "fixed",
                    dtype=np.float32) -> GeneratorBundle:
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "generator-init"))
    mapping = ParamStore()
    widths = [latent_dim] + [mapping_hidden] * MAPPING_LAYERS + [latent_dim]
    for k in range(len(widths) - 1):
        layer = init_dense(widths[k], widths[k + 1], rng, dtype=dtype)
        mapping.add(f"map.fc{k}.weight", layer.weight)
        mapping.add(f"map.fc{k}.bias", layer.bias)

    synthesis = ParamStore()
    const = rng.uniform(-1.0, 1.0, size=(channels * 4, 4)).astype(dtype)
    synthesis.add("const", Tensor(const, requires_grad=True))
    bound = 1.0 / np.sqrt(latent_dim)
    for i in range(1, layer_count + 1):
        a = rng.uniform(-bound, bound, size=(channels, latent_dim)).astype(dtype)
        synthesis.add(f"layer{i}.style_weight", Tensor(a, requires_grad=True))
        synthesis.add(f"layer{i}.style_bias",
                      Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))
        synthesis.add(f"layer{i}.noise_scale",
                      Tensor(np.asarray(0.1, dtype=dtype), requires_grad=True))
    head = rng.uniform(-1.0 / np.sqrt(channels), 1.0 / np.sqrt(channels),
                       size=(1, channels)).astype(dtype)
    synthesis.add("out.weight", Tensor(head, requires_grad=True))
    synthesis.add("out.bias", Tensor(np.zeros(1, dtype=dtype), requires_grad=True))
    return GeneratorBundle(mapping, synthesis, latent_dim, layer_count, channels,
                           mapping_hidden, mode, seed, dtype)


# -- mapping network ---------------------------------------------------------------


def _mapping_layers(gen: GeneratorBundle) -> list[DenseLayer]:
    # tanh hidden units: a smooth style distribution gaussianizes far better
    # than the folded tails a leaky_relu mapping produces
    layers = []
    for k in range(MAPPING_LAYERS + 1):
        act = "none" if k == MAPPING_LAYERS else "tanh"
        layers.append(DenseLayer(gen.mapping[f"map.fc{k}.weight"],
                                 gen.mapping[f"map.fc{k}.bias"], act))
    return layers


def mapping_forward(gen: GeneratorBundle, z: Tensor) -> Tensor:
    """Differentiable style vector for one latent draw."""
    out = z
    for layer in _mapping_layers(gen):
        out = dense_forward(layer, out)
    return out


def mapping_eval(gen: GeneratorBundle, z: np.ndarray) -> np.ndarray:
    """Plain-numpy mapping forward for a [batch, d] array of draws."""
    z = np.asarray(z, dtype=gen.dtype)
    squeeze = z.ndim == 1
    out = z[None, :] if squeeze else z
    for k in range(MAPPING_LAYERS + 1):
        w = gen.mapping[f"map.fc{k}.weight"].data
        b = gen.mapping[f"map.fc{k}.bias"].data
        out = out @ w.T + b
        if k < MAPPING_LAYERS:
            out = np.tanh(out)
    return out[0] if squeeze else out


def mean_latent(gen: GeneratorBundle, sample_count: int = 10_000,
                seed: int = 0) -> np.ndarray:
    """Average style vector of sample_count seeded Gaussian draws."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "mean-latent"))
    total = np.zeros(gen.latent_dim, dtype=np.float64)
    done = 0
    while done < sample_count:
        n = min(8192, sample_count - done)
        z = rng.standard_normal((n, gen.latent_dim)).astype(gen.dtype)
        total += mapping_eval(gen, z).astype(np.float64).sum(axis=0)
        done += n
    return (total / sample_count).astype(gen.dtype)


# -- synthesis network --------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _dup_matrix(n: int, dtype_name: str) -> np.ndarray:
    """Row-duplication matrix for nearest-neighbor 2x upsampling."""
    return np.repeat(np.eye(n, dtype=np.dtype(dtype_name)), 2, axis=0)


@functools.lru_cache(maxsize=64)
def _channel_index(channels: int, h: int, w: int) -> np.ndarray:
    idx = np.repeat(np.arange(channels), h)  # row -> channel
    return np.tile(idx[:, None], (1, w))


@functools.lru_cache(maxsize=64)
def _pixel_index(channels: int, h: int, w: int) -> np.ndarray:
    base = np.arange(h * w).reshape(h, w)
    return np.tile(base, (channels, 1))


def synthesis_forward(gen: GeneratorBundle, wplus: Tensor,
                      theta: ParamStore | None = None,
                      eta: list[Tensor] | None = None) -> Tensor:
    """Image tensor for an extended code.

    wplus: [L, d] tensor, one style row per layer. eta: per-layer noise
    images matching each layer's spatial shape (None means all-zero, in
    which case the noise term is skipped entirely).
    """
    theta = theta if theta is not None else gen.synthesis
    length, d = wplus.shape
    if length != gen.layer_count:
        raise ValueError(
            f"extended code has {length} rows, generator has {gen.layer_count} layers")
    if d != gen.latent_dim:
        raise ValueError(f"style dim {d} != generator latent dim {gen.latent_dim}")
    if eta is not None and len(eta) != gen.layer_count:
        raise ValueError(f"expected {gen.layer_count} noise inputs, got {len(eta)}")

    c = gen.channels
    dt = wplus.data.dtype.name
    feat = theta["const"]  # [c*4, 4], channel-major rows
    h = w = 4
    for i in range(1, gen.layer_count + 1):
        feat = linear2d(feat, _dup_matrix(c * h, dt), _dup_matrix(w, dt))
        h, w = 2 * h, 2 * w
        row = gather(wplus, np.arange((i - 1) * d, i * d))
        style = matmul(theta[f"layer{i}.style_weight"], row) + ones(
            c, dtype=wplus.data.dtype)
        feat = feat * gather(style, _channel_index(c, h, w))
        feat = feat + gather(theta[f"layer{i}.style_bias"], _channel_index(c, h, w))
        if eta is not None and eta[i - 1] is not None:
            noise = gather(eta[i - 1], _pixel_index(c, h, w))
            amp = gather(theta[f"layer{i}.noise_scale"],
                         np.zeros((c * h, w), dtype=np.int64))
            feat = feat + noise * amp
        feat = feat.leaky_relu(0.2)

    flat = feat.reshape((c, h * w))
    out = matmul(theta["out.weight"], flat)
    out = out + gather(theta["out.bias"], np.zeros((1, h * w), dtype=np.int64))
    img = out.tanh().reshape((h, w))
    return (img + ones((h, w), dtype=wplus.data.dtype)).scale(0.5)


def generate(gen: GeneratorBundle, wplus: np.ndarray,
             eta: list[np.ndarray] | None = None) -> np.ndarray:
    """Tape-free image for a raw [L, d] code (and optional noise images)."""
    w_t = Tensor(np.asarray(wplus, dtype=gen.dtype))
    theta = ParamStore()
    for name, t in gen.synthesis.items():
        theta.add(name, Tensor(t.data), trainable=False)
    eta_t = None
    if eta is not None:
        eta_t = [None if e is None else Tensor(np.asarray(e, dtype=gen.dtype))
                 for e in eta]
    return synthesis_forward(gen, w_t, theta, eta_t).data.copy()


def sample_images(gen: GeneratorBundle, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded in-domain draws: returns (codes [count, d], images [count, side, side])."""
    rng = np.random.default_rng(derive_seed(seed, "sample-images"))
    z = rng.standard_normal((count, gen.latent_dim)).astype(gen.dtype)
    w = mapping_eval(gen, z)
    imgs = np.stack([generate(gen, np.tile(w[k], (gen.layer_count, 1)))
                     for k in range(count)])
    return w, imgs


# -- weight-file round trip -----------------------------------------------------------


def gen_to_store(gen: GeneratorBundle) -> ParamStore:
    """Flatten a generator into one named store (architecture in meta.arch)."""
    store = ParamStore()
    meta = np.asarray([gen.latent_dim, gen.layer_count, gen.channels,
                       gen.mapping_hidden, 1.0 if gen.mode == "trained" else 0.0],
                      dtype=np.float32)
    store.add("meta.arch", Tensor(meta), trainable=False)
    for name, t in gen.mapping.items():
        store.add(f"mapping.{name}", Tensor(t.data.copy()))
    for name, t in gen.synthesis.items():
        store.add(f"synthesis.{name}", Tensor(t.data.copy()))
    return store


def gen_from_store(store: ParamStore) -> GeneratorBundle:
    if "meta.arch" not in store:
        raise ValueError("store does not describe a generator (missing meta.arch)")
    d, layers, channels, hidden, mode_flag = store["meta.arch"].data.tolist()
    gen = build_generator(int(d), int(layers), int(channels), int(hidden),
                          mode="trained" if mode_flag else "fixed")
    for name, t in gen.mapping.items():
        t.data = store[f"mapping.{name}"].data.copy()
    for name, t in gen.synthesis.items():
        t.data = store[f"synthesis.{name}"].data.copy()
    return gen


# -- autoencoder training of the `trained` mode --------------------------------------


def train_decoder(dataset: np.ndarray, latent_dim: int = 16, layer_count: int = 3,
                  channels: int = 8, mapping_hidden: int = 32, epochs: int = 4,
                  lr: float = 1e-3, batch: int = 32, seed: int = 0) -> GeneratorBundle:
    """Fit the generator as the decoder of a blob-image autoencoder.

    A throwaway encoder (image -> z) is trained jointly with the mapping and
    synthesis networks under mean-squared reconstruction loss; only the
    generator survives. epochs=0 returns the seeded initialization unchanged.
    """
    from .optim import Adam  # local import to avoid a cycle

    dataset = np.asarray(dataset, dtype=np.float32)
    if dataset.ndim != 3 or dataset.shape[0] < 1:
        raise ValueError("dataset must be a non-empty [count, side, side] array")
    gen = build_generator(latent_dim, layer_count, channels, mapping_hidden,
                          seed=seed, mode="trained")
    side = gen.side
    if dataset.shape[1] != side or dataset.shape[2] != side:
        raise ValueError(f"dataset side {dataset.shape[1:]} != generator side {side}")
    if epochs == 0:
        return gen

    rng = np.random.default_rng(derive_seed(seed, "decoder-train"))
    enc_rng = np.random.default_rng(derive_seed(seed, "encoder-init"))
    encoder = ParamStore()
    enc0 = init_dense(side * side, 4 * latent_dim, enc_rng, "leaky_relu")
    enc1 = init_dense(4 * latent_dim, latent_dim, enc_rng)
    encoder.add("enc.fc0.weight", enc0.weight)
    encoder.add("enc.fc0.bias", enc0.bias)
    encoder.add("enc.fc1.weight", enc1.weight)
    encoder.add("enc.fc1.bias", enc1.bias)

    trainable = list(encoder.items()) + list(gen.mapping.items()) + \
        list(gen.synthesis.items())
    opt = Adam(dict(trainable), lr=lr)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch):
            chunk = order[start:start + batch]
            losses = None
            for k in chunk:
                target = tensor(dataset[k])
                flat = tensor(dataset[k].reshape(side * side))
                code = dense_forward(enc1, dense_forward(enc0, flat))
                style = mapping_forward(gen, code)
                rows = gather(style, np.tile(np.arange(latent_dim), (layer_count, 1)))
                img = synthesis_forward(gen, rows)
                sample_loss = (img - target).square().mean()
                losses = sample_loss if losses is None else losses + sample_loss
            loss = losses.scale(1.0 / len(chunk))
            if not np.isfinite(loss.item()):
                raise NumericalAbort("non-finite autoencoder loss", iteration=step)
            for _, t in trainable:
                t.grad = None
            backward(loss)
            opt.step()
            step += 1
    return gen
