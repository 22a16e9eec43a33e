"""Deformable sampling plugin.

An offset network reads the image features and predicts, per feature cell, a
bounded sampling offset and a feature amplitude. The features are modulated
by the amplitude, resampled bilinearly at the shifted locations, and used as
keys/values of the unchanged token-to-image attention.

Offset network: ``conv_in`` (1x1, C -> C_h + 1). The first ``C_h`` channels go
through a 5x5 depthwise conv, LayerNorm, GELU and ``conv_out`` (1x1, C_h -> 2),
then ``s_p * tanh``. The last channel gives the amplitude ``2 * sigmoid(.)``.
``conv_out`` and the amplitude row/bias of ``conv_in`` start at zero, so a fresh
plugin samples the identity grid with unit amplitude.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .decoder import cross_attention
from .errors import ConfigError, ShapeError
from .params import ParamGroup
from .rng import Rng
from .tensor import Tensor


def init_dsp_weights(group: ParamGroup, prefix: str, channels: int, hidden: int, rng: Rng) -> None:
    w_in = rng.normal((channels, hidden + 1)) / np.sqrt(channels)
    w_in[:, hidden] = 0.0
    group.add(f"{prefix}.conv_in.w", w_in)
    group.add(f"{prefix}.conv_in.b", np.zeros(hidden + 1))
    group.add(f"{prefix}.dw.w", rng.normal((5, 5, hidden)) / 5.0)
    group.add(f"{prefix}.dw.b", np.zeros(hidden))
    group.add(f"{prefix}.ln.g", np.ones(hidden))
    group.add(f"{prefix}.ln.b", np.zeros(hidden))
    group.add(f"{prefix}.conv_out.w", np.zeros((hidden, 2)))
    group.add(f"{prefix}.conv_out.b", np.zeros(2))


def predict_offsets_amplitudes(x: Tensor, w: ParamGroup, prefix: str, s_p: float):
    """Returns ``(delta, amp)``: ``Hf x Wf x 2`` offsets in normalised
    coordinates with ``|delta| < s_p``, and ``Hf x Wf x 1`` amplitudes in (0, 2)."""
    if s_p <= 0:
        raise ConfigError(f"offset scale s_p must be positive, got {s_p}")
    w_in = w[f"{prefix}.conv_in.w"]
    if x.ndim != 3 or x.shape[-1] != w_in.shape[0]:
        raise ShapeError(f"offset network expects {w_in.shape[0]} channels, got features {x.shape}")
    hidden = w_in.shape[1] - 1
    h = T.conv_1x1(x, w_in, w[f"{prefix}.conv_in.b"])
    trunk = T.index(h, (slice(None), slice(None), slice(0, hidden)))
    amp_logit = T.index(h, (slice(None), slice(None), slice(hidden, hidden + 1)))
    trunk = T.depthwise_conv5x5(trunk, w[f"{prefix}.dw.w"], w[f"{prefix}.dw.b"])
    trunk = T.gelu(T.layer_norm(trunk, w[f"{prefix}.ln.g"], w[f"{prefix}.ln.b"]))
    raw = T.conv_1x1(trunk, w[f"{prefix}.conv_out.w"], w[f"{prefix}.conv_out.b"])
    return T.scaled_tanh(raw, s_p), T.sigmoid(amp_logit) * 2.0


def resample_modulated(x: Tensor, delta: Tensor, amp: Tensor) -> Tensor:
    """``grid_sample(amp * x, p + delta)`` with ``p`` the identity grid."""
    H, W, _ = x.shape
    if delta.shape != (H, W, 2) or amp.shape != (H, W, 1):
        raise ShapeError(f"fields {delta.shape}/{amp.shape} do not match features {x.shape}")
    loc = delta + Tensor(T.identity_grid(H, W))
    return T.grid_sample_bilinear(x * amp, loc)


def deformable_features(x: Tensor, w: ParamGroup, prefix: str, s_p: float):
    """Resampled, modulated features plus the sampling locations used."""
    delta, amp = predict_offsets_amplitudes(x, w, prefix, s_p)
    loc = delta.data + T.identity_grid(*x.shape[:2])
    return resample_modulated(x, delta, amp), loc


def dsp_cross_attention(tokens: Tensor, tok_pe: Tensor, x: Tensor, img_pe: Tensor, base: ParamGroup,
                        name: str, dsp: ParamGroup, prefix: str, s_p: float):
    """Frozen token-to-image attention with keys/values from the deformable features."""
    xs, _ = deformable_features(x, dsp, prefix, s_p)
    H, W, C = x.shape
    return cross_attention(tokens, tok_pe, T.reshape(xs, (H * W, C)), img_pe, base, name)
