"""A small promptable mask decoder with SAM's two-way layout.

Image -> strided conv encoder -> ``Hf x Wf x C`` features. Prompts -> tokens
(output-mask token first). Two layers of: token self-attention,
token-to-image cross-attention (where the plugins attach), token MLP and
image-to-token cross-attention. The output-mask token is mapped by a small
hypernetwork and dotted with per-pixel features to give quarter-resolution
logits, which are bilinearly upsampled to the image size.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .masks import downsample_mean, write_pgm
from .params import ParamGroup
from .prompts import PromptSpec
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    stride: int = 4
    channels: int = 32
    mlp_dim: int = 128
    n_layers: int = 2
    head_dim: int = 8
    enc_hidden: int = 16
    enc_blocks: int = 2

    @property
    def feat_size(self) -> int:
        return self.image_size // self.stride

    def to_dict(self) -> dict:
        return asdict(self)


# fixed Fourier positional encoding ------------------------------------------

def fourier_features(xy: np.ndarray, channels: int) -> np.ndarray:
    """Sin/cos features of coordinates already normalised to ``[0, 1]``.

    ``channels // 4`` frequencies spaced geometrically from pi to 16 pi; the
    layout per frequency is ``[sin(fx), cos(fx), sin(fy), cos(fy)]``.
    """
    n = channels // 4
    freqs = np.pi * 2.0 ** (np.arange(n) * 4.0 / max(n - 1, 1))
    u = 2.0 * np.asarray(xy, dtype=np.float64) - 1.0
    ang_x = u[..., :1] * freqs
    ang_y = u[..., 1:2] * freqs
    out = np.stack([np.sin(ang_x), np.cos(ang_x), np.sin(ang_y), np.cos(ang_y)], axis=-1)
    return out.reshape(*u.shape[:-1], 4 * n)


def image_pe(cfg: ModelConfig) -> np.ndarray:
    """Positional encoding of each feature cell centre, ``(Hf*Wf) x C``."""
    f = cfg.feat_size
    c = (np.arange(f) + 0.5) / f
    gx, gy = np.meshgrid(c, c)
    return fourier_features(np.stack([gx, gy], axis=-1).reshape(-1, 2), cfg.channels)


def upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights (half-pixel centres, edge clamped)."""
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    U = np.zeros((n_out, n_in))
    U[np.arange(n_out), i0] += 1.0 - w
    U[np.arange(n_out), i1] += w
    return U


# weights ---------------------------------------------------------------------

def _lin(group: ParamGroup, name: str, n_in: int, n_out: int, rng: Rng, scale: float = 1.0):
    group.add(f"{name}.w", rng.normal((n_in, n_out)) * scale / np.sqrt(n_in))
    group.add(f"{name}.b", np.zeros(n_out))


def _ln(group: ParamGroup, name: str, c: int):
    group.add(f"{name}.g", np.ones(c))
    group.add(f"{name}.b", np.zeros(c))


def _attn(group: ParamGroup, name: str, c: int, rng: Rng):
    for p in ("q", "k", "v", "o"):
        _lin(group, f"{name}.{p}", c, c, rng)


def init_base_weights(cfg: ModelConfig, rng: Rng) -> ParamGroup:
    if cfg.channels % 4 or cfg.image_size % cfg.stride or cfg.stride != 4:
        raise ConfigError("need channels divisible by 4 and a stride-4 encoder")
    C, h = cfg.channels, cfg.enc_hidden
    g = ParamGroup()
    _lin(g, "enc.patch1", 4, h, rng)
    _lin(g, "enc.patch2", 4 * h, C, rng)
    for i in range(cfg.enc_blocks):
        g.add(f"enc.block{i}.dw.w", rng.normal((5, 5, C)) / 5.0)
        g.add(f"enc.block{i}.dw.b", np.zeros(C))
        _ln(g, f"enc.block{i}.ln", C)
        _lin(g, f"enc.block{i}.pw", C, C, rng)
    _ln(g, "enc.out_ln", C)
    g.add("prompt.mask_token", rng.normal((1, C)))
    g.add("prompt.type_embed", rng.normal((3, C)) * 0.5)  # box corner 0, corner 1, point
    g.add("prompt.dense.w", rng.normal((1, C)) * 0.1)
    g.add("prompt.dense.b", np.zeros(C))
    for l in range(cfg.n_layers):
        p = f"dec{l}"
        _attn(g, f"{p}.self", C, rng)
        _ln(g, f"{p}.ln1", C)
        _attn(g, f"{p}.t2i", C, rng)
        _ln(g, f"{p}.ln2", C)
        _lin(g, f"{p}.mlp1", C, cfg.mlp_dim, rng)
        _lin(g, f"{p}.mlp2", cfg.mlp_dim, C, rng)
        _ln(g, f"{p}.ln3", C)
        _attn(g, f"{p}.i2t", C, rng)
        _ln(g, f"{p}.ln4", C)
    _lin(g, "head.pix", C, cfg.head_dim, rng)
    _lin(g, "head.hyper1", C, C, rng)
    _lin(g, "head.hyper2", C, cfg.head_dim, rng)
    return g


# encoders --------------------------------------------------------------------

@dataclass
class ImageEmbedding:
    features: Tensor  # Hf x Wf x C
    image_size: tuple


def encode_image(w: ParamGroup, img, cfg: ModelConfig) -> ImageEmbedding:
    img = img if isinstance(img, Tensor) else Tensor(img)
    if img.ndim != 2 or img.shape[0] % cfg.stride or img.shape[1] % cfg.stride:
        raise ConfigError(f"image shape {img.shape} is not divisible by the encoder stride {cfg.stride}")
    H, W = img.shape
    x = T.reshape(img, (H, W, 1))
    x = T.gelu(T.conv_1x1(T.patchify(x, 2), w["enc.patch1.w"], w["enc.patch1.b"]))
    x = T.conv_1x1(T.patchify(x, 2), w["enc.patch2.w"], w["enc.patch2.b"])
    for i in range(cfg.enc_blocks):
        p = f"enc.block{i}"
        h = T.depthwise_conv5x5(x, w[f"{p}.dw.w"], w[f"{p}.dw.b"])
        h = T.gelu(T.layer_norm(h, w[f"{p}.ln.g"], w[f"{p}.ln.b"]))
        x = x + T.conv_1x1(h, w[f"{p}.pw.w"], w[f"{p}.pw.b"])
    x = T.layer_norm(x, w["enc.out_ln.g"], w["enc.out_ln.b"])
    return ImageEmbedding(x, (H, W))


@dataclass
class PromptTokens:
    tokens: Tensor  # T x C, row 0 is the output-mask token
    pe: Tensor  # T x C positional part (zero for the mask token)


def encode_prompts(w: ParamGroup, prompt: PromptSpec, image_size: tuple, cfg: ModelConfig) -> PromptTokens:
    H, W = image_size
    if prompt.kind in ("gt_box", "noisy_box"):
        box = prompt.payload
    elif prompt.kind == "coarse_mask":
        box = prompt.companion_box
    else:
        box = None
    if box is not None:
        xy = np.array([[box.x0, box.y0], [box.x1, box.y1]])
        types = [0, 1]
    elif prompt.kind == "points":
        xy = prompt.payload.points
        types = [2] * len(xy)
    else:
        raise ValueError(f"prompt kind {prompt.kind!r} cannot be tokenised")
    pe = fourier_features(xy / np.array([W, H], dtype=np.float64), cfg.channels)
    pe_t = Tensor(np.vstack([np.zeros((1, cfg.channels)), pe]))
    types_t = T.index(w["prompt.type_embed"], np.asarray(types))
    tokens = T.concat([w["prompt.mask_token"], Tensor(pe) + types_t], axis=0)
    return PromptTokens(tokens, pe_t)


def add_mask_prompt(w: ParamGroup, emb: ImageEmbedding, coarse, cfg: ModelConfig) -> ImageEmbedding:
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.shape != tuple(emb.image_size):
        raise ShapeError(f"coarse mask {coarse.shape} does not match image {emb.image_size}")
    small = downsample_mean(coarse, cfg.stride)[..., None]
    dense = T.conv_1x1(Tensor(small), w["prompt.dense.w"], w["prompt.dense.b"])
    return ImageEmbedding(emb.features + dense, emb.image_size)


# attention -------------------------------------------------------------------

def _proj(x: Tensor, w: ParamGroup, name: str) -> Tensor:
    return T.matmul(x, w[f"{name}.w"]) + w[f"{name}.b"]


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, w: ParamGroup, name: str):
    """Single-head scaled dot-product attention; returns ``(out, weights)``."""
    if q_in.shape[-1] != k_in.shape[-1] or k_in.shape[0] != v_in.shape[0]:
        raise ShapeError(f"attention: query {q_in.shape}, key {k_in.shape}, value {v_in.shape}")
    q = _proj(q_in, w, f"{name}.q")
    k = _proj(k_in, w, f"{name}.k")
    v = _proj(v_in, w, f"{name}.v")
    a = T.softmax_rows(T.matmul(q, k.T) * (1.0 / np.sqrt(q.shape[-1])))
    return _proj(T.matmul(a, v), w, f"{name}.o"), a


def cross_attention(tokens: Tensor, tok_pe: Tensor, kv: Tensor, img_pe: Tensor, w: ParamGroup, name: str):
    """Token-to-image attention: queries from tokens, keys from ``kv + img_pe``,
    values from ``kv`` (``N x C``)."""
    return attention(tokens + tok_pe, kv + img_pe, kv, w, name)


def _ln_apply(x: Tensor, w: ParamGroup, name: str) -> Tensor:
    return T.layer_norm(x, w[f"{name}.g"], w[f"{name}.b"])


@dataclass
class AttentionRecord:
    weights: list = field(default_factory=list)  # per layer, T x (Hf*Wf)
    locations: list = field(default_factory=list)  # per layer, Hf x Wf x 2 normalised, or None
    alphas: list = field(default_factory=list)  # per layer (a1, a2), or None


@dataclass
class DecoderOutput:
    low_res: Tensor  # Hf x Wf logits
    logits: Tensor  # H x W logits
    record: AttentionRecord


def run_decoder(w: ParamGroup, emb: ImageEmbedding, prompt: PromptTokens, cfg: ModelConfig,
                adapter=None) -> DecoderOutput:
    """Two-way decoder forward. ``adapter``, when given, replaces the keys and
    values of each token-to-image attention (see :mod:`stable_attn.drp`)."""
    f = cfg.feat_size
    C = cfg.channels
    feats = emb.features
    if feats.shape != (f, f, C):
        raise ShapeError(f"image features {feats.shape} do not match config {(f, f, C)}")
    if adapter is not None and adapter.n_layers != cfg.n_layers:
        raise ShapeError(f"adapter has {adapter.n_layers} layers, decoder has {cfg.n_layers}")
    ipe = Tensor(image_pe(cfg))
    img = T.reshape(feats, (f * f, C))
    tok, tpe = prompt.tokens, prompt.pe
    rec = AttentionRecord()
    for l in range(cfg.n_layers):
        p = f"dec{l}"
        q = tok + tpe
        sa, _ = attention(q, q, tok, w, f"{p}.self")
        tok = _ln_apply(tok + sa, w, f"{p}.ln1")
        if adapter is None:
            kv, loc, alpha = img, None, None
        else:
            kv, loc, alpha = adapter.keys_values(l, T.reshape(img, (f, f, C)), T.index(tok, slice(0, 1)))
            kv = T.reshape(kv, (f * f, C))
        ca, a = cross_attention(tok, tpe, kv, ipe, w, f"{p}.t2i")
        rec.weights.append(a.data)
        rec.locations.append(loc)
        rec.alphas.append(alpha)
        tok = _ln_apply(tok + ca, w, f"{p}.ln2")
        m = _proj(T.gelu(_proj(tok, w, f"{p}.mlp1")), w, f"{p}.mlp2")
        tok = _ln_apply(tok + m, w, f"{p}.ln3")
        it, _ = attention(img + ipe, tok + tpe, tok, w, f"{p}.i2t")
        img = _ln_apply(img + it, w, f"{p}.ln4")
    pix = T.gelu(_proj(img, w, "head.pix"))
    hyper = _proj(T.gelu(_proj(T.index(tok, slice(0, 1)), w, "head.hyper1")), w, "head.hyper2")
    low = T.reshape(T.matmul(pix, hyper.T), (f, f))
    H, W = emb.image_size
    Uy = Tensor(upsample_matrix(H, f))
    Ux = Tensor(upsample_matrix(W, f))
    full = T.matmul(T.matmul(Uy, low), Ux.T)
    return DecoderOutput(low, full, rec)


def predict(w: ParamGroup, emb: ImageEmbedding, prompt: PromptSpec, cfg: ModelConfig, adapter=None) -> DecoderOutput:
    """Prompt encoding (including any dense mask prompt) followed by the decoder."""
    if prompt.kind == "coarse_mask":
        emb = add_mask_prompt(w, emb, prompt.payload, cfg)
    tokens = encode_prompts(w, prompt, emb.image_size, cfg)
    return run_decoder(w, emb, tokens, cfg, adapter)


def dump_attention(record: AttentionRecord, out_dir, feat_size: int, layer: int = -1, prefix: str = "attn",
                   provenance: dict | None = None) -> list:
    """Write one PGM heatmap per token for ``layer`` (default: last) and a JSON
    file with the sampling locations in feature-cell coordinates."""
    provenance = provenance or {}
    tag = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) or None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer = layer % len(record.weights)
    weights = np.asarray(record.weights[layer])
    written = []
    for t, row in enumerate(weights):
        top = row.max()
        scaled = np.zeros_like(row) if top <= 0 else row / top
        path = out_dir / f"{prefix}_layer{layer}_token{t}.pgm"
        write_pgm(path, scaled.reshape(feat_size, feat_size), tag)
        written.append(path)
    loc = record.locations[layer]
    overlay = {
        "layer": layer,
        "provenance": provenance,
        "feat_size": feat_size,
        "argmax": [int(np.argmax(r)) for r in weights],
        "alpha": record.alphas[layer],
        # normalised [-1, 1] -> cell index units
        "locations": None if loc is None else ((np.asarray(loc) + 1.0) * 0.5 * (feat_size - 1)).tolist(),
    }
    path = out_dir / f"{prefix}_layer{layer}.json"
    path.write_text(json.dumps(overlay, sort_keys=True) + "\n")
    written.append(path)
    return written
