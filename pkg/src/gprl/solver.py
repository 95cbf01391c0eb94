"""Two-stage latent search.

Stage one (anchor search) optimizes the extended code under the full
regularized objective with Adam, starting every row at the mean style
vector. Stage two (ball refinement) clones the generator and jointly
fine-tunes the code, the first few synthesis layers and the per-layer noise
images under the bare data term, with each code row projected back onto an
l1 ball around its anchor row after every step; the prior survives through
that locality constraint and the short iteration budget.

Ablation switches compose: no_regu / no_cross / w_space alter stage one,
no_anchor / no_noise / no_w / no_g / no_l1_ball alter stage two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .degrade import bicubic_downsample
from .errors import NumericalAbort
from .flow import FlowModel
from .generator import GeneratorBundle, generate, mean_latent, mapping_eval
from .objective import PriorWeights, anchor_objective, density_score, norm_stat, \
    refine_objective
from .optim import Adam, L1Ball, pgd_loop
from .seeds import derive_seed
from .tensor import Tensor, backward, gather, tensor

ABLATIONS = ("no_regu", "no_cross", "w_space", "no_anchor", "no_noise",
             "no_w", "no_g", "no_l1_ball")
ALL_VARIANTS = ("anchor", "refined") + ABLATIONS


@dataclass
class AblationFlags:
    no_regu: bool = False
    no_cross: bool = False
    w_space: bool = False
    no_anchor: bool = False
    no_noise: bool = False
    no_w: bool = False
    no_g: bool = False
    no_l1_ball: bool = False

    @classmethod
    def for_variant(cls, variant: str) -> "AblationFlags":
        if variant in ("anchor", "refined"):
            return cls()
        if variant not in ABLATIONS:
            raise ValueError(f"unknown variant {variant!r}")
        return cls(**{variant: True})


@dataclass
class SolverConfig:
    weights: PriorWeights = field(default_factory=PriorWeights)
    rls_iterations: int = 200
    rls_lr: float = 0.5
    init_samples: int = 10000
    plus_iterations: int = 50
    plus_lr: float = 1e-4
    radius: float | None = None            # None: sqrt(latent_dim)
    trainable_layers: int | None = None    # None: ceil(layer_count / 2)
    ball_mode: str = "per_row"
    patience: int = 0
    diverse_init: bool = False
    flags: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    init_latent: np.ndarray | None = None  # precomputed shared initialization

    def resolved_radius(self, latent_dim: int) -> float:
        return float(self.radius) if self.radius else math.sqrt(latent_dim)

    def resolved_trainable_layers(self, layer_count: int) -> int:
        k = self.trainable_layers if self.trainable_layers else math.ceil(layer_count / 2)
        return min(k, layer_count)


@dataclass
class SolveResult:
    stage: str                       # anchor | refined
    wplus: np.ndarray                # final code [L, d]
    anchor: np.ndarray               # stage-one code (== wplus for stage one)
    image: np.ndarray                # final rendered image
    data_term: float                 # mean per-pixel l1 at the final point
    trace: list[float]
    theta_delta: dict[str, float] | None = None  # l2 change per refined layer
    eta: list[np.ndarray] | None = None
    density: float = 0.0
    norms: float = 0.0


def _initial_latent(gen: GeneratorBundle, cfg: SolverConfig) -> np.ndarray:
    if cfg.diverse_init:
        rng = np.random.default_rng(derive_seed(cfg.seed, "diverse-init"))
        z = rng.standard_normal(gen.latent_dim).astype(gen.dtype)
        return mapping_eval(gen, z)
    if cfg.init_latent is not None:
        return np.asarray(cfg.init_latent, dtype=gen.dtype)
    return mean_latent(gen, cfg.init_samples, cfg.seed)


def _effective_weights(cfg: SolverConfig) -> PriorWeights:
    if cfg.flags.no_regu:
        return PriorWeights(0.0, 0.0, 0.0)
    if cfg.flags.no_cross:
        return replace(cfg.weights, lambda_c=0.0)
    return cfg.weights


def _finalize(gen: GeneratorBundle, wplus: np.ndarray, y: np.ndarray, factor: int,
              flow: FlowModel, theta=None, eta=None) -> tuple[np.ndarray, float]:
    image = generate(gen if theta is None else _with_theta(gen, theta), wplus, eta)
    lr = bicubic_downsample(image, factor)
    return image, float(np.mean(np.abs(lr.astype(np.float64) - y)))


def _with_theta(gen: GeneratorBundle, theta) -> GeneratorBundle:
    out = gen.clone()
    for name, t in theta.items():
        out.synthesis[name].data = t.data.copy()
    return out


def anchor_solve(y: np.ndarray, gen: GeneratorBundle, flow: FlowModel,
                 cfg: SolverConfig, factor: int) -> SolveResult:
    """Stage one: regularized search for the extended code explaining y."""
    y = np.asarray(y, dtype=gen.dtype)
    init = _initial_latent(gen, cfg)
    length, d = gen.layer_count, gen.latent_dim
    weights = _effective_weights(cfg)
    y_t = tensor(y)

    if cfg.flags.w_space:
        leaf = Tensor(init.copy(), requires_grad=True)
        broadcast_idx = np.tile(np.arange(d), (length, 1))

        def rows_of():
            return gather(leaf, broadcast_idx)
    else:
        leaf = Tensor(np.tile(init, (length, 1)), requires_grad=True)

        def rows_of():
            return leaf

    opt = Adam({"w": leaf}, lr=cfg.rls_lr)
    trace: list[float] = []
    for it in range(cfg.rls_iterations):
        loss = anchor_objective(y_t, rows_of(), gen, flow, weights, factor)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericalAbort("non-finite anchor loss", iteration=it, trace=trace)
        trace.append(val)
        opt.zero_grad()
        backward(loss)
        opt.step()

    wplus = (np.tile(leaf.data, (length, 1)) if cfg.flags.w_space
             else leaf.data.copy())
    image, final_data = _finalize(gen, wplus, y, factor, flow)
    return SolveResult("anchor", wplus, wplus.copy(), image, final_data, trace,
                       density=density_score(wplus, flow),
                       norms=norm_stat(wplus, flow))


def refine_solve(y: np.ndarray, gen: GeneratorBundle, flow: FlowModel,
                 anchor: SolveResult | None, cfg: SolverConfig,
                 factor: int) -> SolveResult:
    """Stage two: ball-constrained joint refinement of (code, weights, noise)."""
    y = np.asarray(y, dtype=gen.dtype)
    length, d = gen.layer_count, gen.latent_dim
    flags = cfg.flags
    if flags.no_anchor or anchor is None:
        center = np.tile(_initial_latent(gen, cfg), (length, 1))
    else:
        center = anchor.wplus.copy()

    clone = gen.clone()
    theta = clone.synthesis
    k = cfg.resolved_trainable_layers(length)
    trainable_names = []
    if not flags.no_g:
        for i in range(1, k + 1):
            trainable_names += [f"layer{i}.style_weight", f"layer{i}.style_bias",
                                f"layer{i}.noise_scale"]
    for name in theta.names():
        theta.set_trainable(name, name in trainable_names)

    params: dict[str, Tensor] = {}
    w_leaf = Tensor(center.copy(), requires_grad=not flags.no_w)
    if not flags.no_w:
        params["w"] = w_leaf
    for name in trainable_names:
        params[name] = theta[name]

    eta_leaves: list[Tensor] | None = None
    if not flags.no_noise:
        eta_leaves = []
        for i, shape in enumerate(clone.noise_shapes()):
            leaf = Tensor(np.zeros(shape, dtype=gen.dtype), requires_grad=True)
            eta_leaves.append(leaf)
            params[f"eta{i + 1}"] = leaf

    if not params:
        raise NumericalAbort("refinement has no free variables under these flags")

    radius = cfg.resolved_radius(d)
    balls = None
    whole_ball = None
    if not flags.no_l1_ball and not flags.no_w:
        if cfg.ball_mode == "flat":
            whole_ball = L1Ball(center.ravel(), radius * math.sqrt(length))
        else:
            balls = [L1Ball(center[i], radius) for i in range(length)]

    def build_loss() -> Tensor:
        return refine_objective(tensor(y), w_leaf, clone, theta, eta_leaves, factor)

    trace = pgd_loop(build_loss, params, cfg.plus_iterations, cfg.plus_lr,
                     row_param="w" if balls else None, balls=balls,
                     flat_param="w" if whole_ball else None, whole_ball=whole_ball,
                     patience=cfg.patience)

    wplus = w_leaf.data.copy()
    eta_out = None if eta_leaves is None else [t.data.copy() for t in eta_leaves]
    image, final_data = _finalize(gen, wplus, y, factor, flow, theta, eta_out)
    delta = {}
    for i in range(1, length + 1):
        sq = 0.0
        for suffix in ("style_weight", "style_bias", "noise_scale"):
            name = f"layer{i}.{suffix}"
            diff = theta[name].data.astype(np.float64) - \
                gen.synthesis[name].data.astype(np.float64)
            sq += float(np.sum(diff * diff))
        delta[f"layer{i}"] = math.sqrt(sq)
    return SolveResult("refined", wplus, center, image, final_data, trace,
                       theta_delta=delta, eta=eta_out,
                       density=density_score(wplus, flow),
                       norms=norm_stat(wplus, flow))


def run_variant(y: np.ndarray, gen: GeneratorBundle, flow: FlowModel,
                cfg: SolverConfig, variant: str, factor: int) -> SolveResult:
    """One named pipeline variant on one observation."""
    flags = AblationFlags.for_variant(variant)
    vcfg = replace(cfg, flags=flags)
    if variant in ("anchor", "no_regu", "no_cross", "w_space"):
        return anchor_solve(y, gen, flow, vcfg, factor)
    if variant == "no_anchor":
        return refine_solve(y, gen, flow, None, vcfg, factor)
    anchor = anchor_solve(y, gen, flow, replace(vcfg, flags=AblationFlags()), factor)
    return refine_solve(y, gen, flow, anchor, vcfg, factor)
