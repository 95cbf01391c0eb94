"""Data term and latent priors, assembled into the two stage objectives.

The observation noise is modeled as Laplace, so the data term is the l1
deviation between the observation and the downscaled render, reduced as a
mean per pixel (not a sum) so that prior weights transfer across image
sizes. The three priors are maximized, hence subtracted with positive
weights from the minimized loss:

  * row density      -- mean flow log-density of the style rows,
  * sphere proximity -- mean negative squared gap between each gaussianized
                        row's norm and sqrt(d),
  * row coherence    -- negative sum of pairwise squared row distances.

The refinement objective is the bare data term over (code, generator
weights, noise inputs); its prior is carried by the l1-ball constraint and
the short iteration budget, not by penalty terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .degrade import bicubic_downsample
from .flow import FlowModel, flow_eval, log_density_batch, log_density_rows, \
    flow_forward_tape
from .generator import GeneratorBundle, synthesis_forward
from .nn import ParamStore
from .tensor import Tensor, gather, tensor


@dataclass
class PriorWeights:
    """Nonnegative multipliers; all-zero is the unregularized ablation."""

    lambda_w: float = 0.0002   # row density
    lambda_g: float = 0.0004   # sphere proximity
    lambda_c: float = 0.05     # row coherence

    def __post_init__(self):
        for name in ("lambda_w", "lambda_g", "lambda_c"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def row_density_prior(wplus: Tensor, flow: FlowModel) -> Tensor:
    """Mean flow log-density over the style rows (higher is denser)."""
    if wplus.shape[1] != flow.latent_dim:
        raise ValueError(
            f"style dim {wplus.shape[1]} != flow dim {flow.latent_dim}")
    return log_density_rows(flow, wplus).mean()


def sphere_proximity_prior(wplus: Tensor, flow: FlowModel) -> Tensor:
    """-(1/L) sum_i (||F(w_i)||_2 - sqrt(d))^2; zero only on the sphere."""
    length, d = wplus.shape
    if d != flow.latent_dim:
        raise ValueError(f"style dim {d} != flow dim {flow.latent_dim}")
    z, _ = flow_forward_tape(flow, wplus)
    root_d = float(np.sqrt(d))
    total = None
    for i in range(length):
        row = gather(z, np.arange(i * d, (i + 1) * d))
        gap = row.l2_norm() + tensor(-root_d, dtype=wplus.data.dtype)
        term = gap.square()
        total = term if total is None else total + term
    return total.scale(-1.0 / length)


def row_coherence_prior(wplus: Tensor) -> Tensor:
    """-sum_{i<j} ||w_i - w_j||^2; zero iff all rows coincide."""
    length, d = wplus.shape
    total = None
    for i in range(length - 1):
        row_i = gather(wplus, np.arange(i * d, (i + 1) * d))
        for j in range(i + 1, length):
            row_j = gather(wplus, np.arange(j * d, (j + 1) * d))
            term = (row_i - row_j).square().sum()
            total = term if total is None else total + term
    if total is None:  # single row
        return tensor(0.0, dtype=wplus.data.dtype)
    return total.scale(-1.0)


def data_term(y: Tensor, wplus: Tensor, gen: GeneratorBundle, factor: int,
              theta: ParamStore | None = None,
              eta: list[Tensor] | None = None) -> Tensor:
    """Mean per-pixel l1 between the observation and the downscaled render."""
    img = synthesis_forward(gen, wplus, theta, eta)
    lr = bicubic_downsample(img, factor)
    if lr.shape != y.shape:
        raise ValueError(f"observation shape {y.shape} != rendered LR {lr.shape}")
    return (lr - y).abs().mean()


def anchor_objective(y: Tensor, wplus: Tensor, gen: GeneratorBundle,
                     flow: FlowModel, weights: PriorWeights,
                     factor: int) -> Tensor:
    """Stage-one loss: data term minus the weighted priors."""
    loss = data_term(y, wplus, gen, factor)
    if weights.lambda_w:
        loss = loss + row_density_prior(wplus, flow).scale(-weights.lambda_w)
    if weights.lambda_g:
        loss = loss + sphere_proximity_prior(wplus, flow).scale(-weights.lambda_g)
    if weights.lambda_c:
        loss = loss + row_coherence_prior(wplus).scale(-weights.lambda_c)
    return loss


def refine_objective(y: Tensor, wplus: Tensor, gen: GeneratorBundle,
                     theta: ParamStore, eta: list[Tensor] | None,
                     factor: int) -> Tensor:
    """Stage-two loss: the bare data term over (code, weights, noise)."""
    return data_term(y, wplus, gen, factor, theta, eta)


# -- tape-free scores used by metrics --------------------------------------------------


def density_score(wplus: np.ndarray, flow: FlowModel) -> float:
    """Mean flow log-density of the rows of a raw [L, d] code."""
    return float(np.mean(log_density_batch(flow, np.asarray(wplus))))


def norm_stat(wplus: np.ndarray, flow: FlowModel) -> float:
    """Mean squared norm of the gaussianized rows."""
    z, _ = flow_eval(flow, np.asarray(wplus))
    return float(np.mean(np.sum(z.astype(np.float64) ** 2, axis=1)))
