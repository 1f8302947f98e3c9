"""Bottleneck adapters and the hierarchical encoder adapter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class AdapterConfig:
    d_B: int = 16
    tau: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.d_B < 1:
            raise ValueError("d_B must be positive")


@dataclass
class AdapterParams:
    W_d: dc.Tensor  # d_m x d_B
    b_d: dc.Tensor
    W_u: dc.Tensor  # d_B x d_m
    b_u: dc.Tensor
    ln_g: dc.Tensor  # layer norm over the bottleneck
    ln_b: dc.Tensor


def adapter_shapes(d_m: int, d_B: int) -> dict[str, tuple]:
    if not d_B < d_m:
        raise ValueError(f"bottleneck d_B={d_B} must be smaller than d_m={d_m}")
    return {"W_d": (d_m, d_B), "b_d": (d_B,), "W_u": (d_B, d_m), "b_u": (d_m,),
            "ln_g": (d_B,), "ln_b": (d_B,)}


def init_adapter_arrays(d_m: int, d_B: int, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, np.ndarray]:
    """Random down-projection, zero up-projection: the adapter starts as identity."""
    bound = 1.0 / np.sqrt(d_m)
    return {
        "W_d": rng.uniform(-bound, bound, (d_m, d_B)).astype(dtype),
        "b_d": rng.uniform(-bound, bound, (d_B,)).astype(dtype),
        "W_u": np.zeros((d_B, d_m), dtype),
        "b_u": np.zeros((d_m,), dtype),
        "ln_g": np.ones((d_B,), dtype),
        "ln_b": np.zeros((d_B,), dtype),
    }


def init_adapters(config: AdapterConfig, d_m: int, n_layers: int,
                  rng: np.random.Generator, dtype=np.float32) -> list[AdapterParams]:
    out = []
    for _ in range(n_layers):
        arrs = init_adapter_arrays(d_m, config.d_B, rng, dtype)
        out.append(AdapterParams(**{k: dc.Tensor(v, name=k, tunable=True) for k, v in arrs.items()}))
    return out


def _down(h: dc.Tensor, p: AdapterParams) -> dc.Tensor:
    z = dc.add(dc.matmul(h, p.W_d), p.b_d)
    return dc.relu(dc.layer_norm(z, p.ln_g, p.ln_b))


def _up_residual(h: dc.Tensor, u: dc.Tensor, p: AdapterParams) -> dc.Tensor:
    return dc.add(h, dc.add(dc.matmul(u, p.W_u), p.b_u))


def vanilla_forward(h: dc.Tensor, p: AdapterParams) -> dc.Tensor:
    """``h + W_u ReLU(LN(W_d h + b_d)) + b_u`` applied position-wise."""
    return _up_residual(h, _down(h, p), p)


def context_weights(H: dc.Tensor, tau: float) -> dc.Tensor:
    """Row-wise ``softmax(H / tau)``; shared by every hierarchical layer."""
    return dc.softmax(dc.scale(H, 1.0 / tau), axis=-1)


def hierarchical_forward(h: dc.Tensor, global_positions, H: dc.Tensor | None,
                         p: AdapterParams, tau: float = 0.1,
                         weights: dc.Tensor | None = None) -> dc.Tensor:
    """Vanilla adapter whose bottleneck at global positions is contextualised:
    ``u'_i = sum_k softmax(H_i / tau)_k u_k + u_i``; text positions pass through.

    ``weights`` may carry a precomputed ``context_weights(H, tau)``.
    """
    gpos = np.asarray(global_positions, dtype=np.int64)
    if weights is None:
        if H is None:
            raise ValueError("hierarchical adapter needs the interaction matrix H")
        if H.shape != (len(gpos), len(gpos)):
            raise ValueError(f"H has shape {H.shape} but there are {len(gpos)} global positions")
        weights = context_weights(H, tau)
    u = _down(h, p)
    ctx = dc.matmul(weights, dc.take(u, gpos, axis=0))
    return _up_residual(h, dc.scatter_add_rows(u, ctx, gpos), p)
