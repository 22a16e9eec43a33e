"""Dynamic routing plugin and the adapter that wires both plugins into the decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import cross_attention
from .dsp import deformable_features, init_dsp_weights
from .errors import ShapeError
from .params import ParamGroup
from .rng import Rng
from .tensor import Tensor


def init_router_weights(group: ParamGroup, prefix: str, channels: int, rng: Rng) -> None:
    group.add(f"{prefix}.hidden.w", rng.normal((channels, channels)) / np.sqrt(channels))
    group.add(f"{prefix}.hidden.b", np.zeros(channels))
    group.add(f"{prefix}.ln.g", np.ones(channels))
    group.add(f"{prefix}.ln.b", np.zeros(channels))
    group.add(f"{prefix}.out.w", np.zeros((channels, 2)))
    group.add(f"{prefix}.out.b", np.zeros(2))
    group.add(f"{prefix}.log_s", np.zeros(1))


def route(t_o: Tensor, w: ParamGroup, prefix: str) -> Tensor:
    """``softmax(MLP(t_o)) * s`` as a ``1 x 2`` tensor; ``s = exp(log_s)``."""
    w_h = w[f"{prefix}.hidden.w"]
    if t_o.shape != (1, w_h.shape[0]):
        raise ShapeError(f"router expects a 1 x {w_h.shape[0]} token, got {t_o.shape}")
    h = T.matmul(t_o, w_h) + w[f"{prefix}.hidden.b"]
    h = T.gelu(T.layer_norm(h, w[f"{prefix}.ln.g"], w[f"{prefix}.ln.b"]))
    logits = T.matmul(h, w[f"{prefix}.out.w"]) + w[f"{prefix}.out.b"]
    return T.softmax_rows(logits) * T.exp(w[f"{prefix}.log_s"])


def blend(x_def: Tensor, x: Tensor, alpha: Tensor) -> Tensor:
    """``alpha1 * x_def + alpha2 * x``."""
    if x_def.shape != x.shape:
        raise ShapeError(f"cannot blend features {x_def.shape} and {x.shape}")
    a1 = T.index(alpha, (0, 0))
    a2 = T.index(alpha, (0, 1))
    return x_def * a1 + x * a2


def blended_attention(tokens: Tensor, tok_pe: Tensor, x_def: Tensor, x: Tensor, alpha: Tensor,
                      img_pe: Tensor, base: ParamGroup, name: str):
    """Frozen cross-attention over the blended (pre-projection) features."""
    H, W, C = x.shape
    kv = T.reshape(blend(x_def, x, alpha), (H * W, C))
    return cross_attention(tokens, tok_pe, kv, img_pe, base, name)


@dataclass
class AdapterConfig:
    channels: int = 32
    hidden: int = 32
    s_p: float = 0.25
    n_layers: int = 2


class Adapter:
    """Per-layer deformable sampling + routing weights in one trainable group.

    ``mode`` selects the key/value source: ``"blend"`` (routed, the deployed
    path), ``"deformable"`` (pure deformable features) or ``"regular"``.
    ``alpha_override`` pins the routing weights to a fixed pair.
    """

    def __init__(self, cfg: AdapterConfig, params: ParamGroup | None = None, rng: Rng | None = None):
        self.cfg = cfg
        if params is None:
            rng = rng or Rng(0)
            params = ParamGroup()
            for l in range(cfg.n_layers):
                init_dsp_weights(params, f"l{l}.dsp", cfg.channels, cfg.hidden, rng)
                init_router_weights(params, f"l{l}.drp", cfg.channels, rng)
        self.params = params
        self.mode = "blend"
        self.alpha_override: tuple[float, float] | None = None

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def alpha(self, layer: int, t_o: Tensor) -> Tensor:
        if self.alpha_override is not None:
            return Tensor(np.array([self.alpha_override], dtype=np.float64))
        return route(t_o, self.params, f"l{layer}.drp")

    def keys_values(self, layer: int, x: Tensor, t_o: Tensor):
        """Key/value features for one layer: ``(features, sample locations, alpha)``."""
        if self.mode == "regular":
            return x, None, None
        x_def, loc = deformable_features(x, self.params, f"l{layer}.dsp", self.cfg.s_p)
        if self.mode == "deformable":
            return x_def, loc, None
        a = self.alpha(layer, t_o)
        return blend(x_def, x, a), loc, (float(a.data[0, 0]), float(a.data[0, 1]))
