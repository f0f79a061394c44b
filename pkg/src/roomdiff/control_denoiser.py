"""Noise-prediction UNet with dual conditioning controls.

The denoiser is a small convolutional UNet over latent grids with three
attention mechanisms layered on top:

* text cross-attention at configured resolutions, with a per-token logit
  prior derived from learned prompt weights;
* appearance-context attention, where spatial tokens attend over the
  concatenation of themselves and same-resolution features of a noised
  reference latent produced by a frozen copy of the encoder path;
* design-specification attention in every decoder level, where embedded
  dimension-clause tokens query the spatial features and the pooled
  result is broadcast back through a zero-initialized output projection.

Zero initialization of the final convolution and of every design output
projection makes a fresh model predict exactly zero noise and makes the
design path an exact identity until training moves it.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import _autograd as ag
from ._autograd import Var
from .errors import ConfigError, DomainError, ShapeError
from .latent_codec import LatentGrid
from .prompt_encoder import PromptFeatures
from .tensor_core import Rng, require_finite

_REF_PREFIX = "ref."


@dataclasses.dataclass(frozen=True)
class DenoiserConfig:
    """Shape parameters of the UNet and its attention sites."""

    in_channels: int
    grid: int
    base: int
    mults: tuple = (1, 2)
    attn_grids: tuple = (8, 4)
    d_k: int = 32
    d_text: int = 32
    groups: int = 8

    def __post_init__(self):
        if min(self.in_channels, self.grid, self.base, self.d_k, self.d_text, self.groups) < 1:
            raise ConfigError("all size fields must be positive")
        if self.base % 2 or self.base % self.groups:
            raise ConfigError("base channels must be even and divisible by groups")
        if not self.mults or any(int(m) != m or m < 1 for m in self.mults):
            raise ConfigError("mults must be positive integers")
        levels = len(self.mults)
        if self.grid % (1 << (levels - 1)):
            raise ConfigError("grid must be divisible by 2^(levels-1)")
        for i, ch in enumerate(self.channels):
            if self.level_grid(i) in self.attn_grids and ch % self.d_k:
                raise ConfigError("d_k must divide channels at attention grids")

    @property
    def channels(self) -> tuple:
        return tuple(self.base * int(m) for m in self.mults)

    @property
    def levels(self) -> int:
        return len(self.mults)

    def level_grid(self, i: int) -> int:
        return self.grid >> i


def desk_config(in_channels: int = 48, grid: int = 8) -> DenoiserConfig:
    # trunk width matches the 48-channel latent: noise is spatially white, so
    # a narrower stem would project away part of every pixel's own noise and
    # floor the prediction error regardless of training
    return DenoiserConfig(in_channels=in_channels, grid=grid, base=48,
                          mults=(1, 2), attn_grids=(8, 4), d_k=24, d_text=32, groups=8)


def tiny_config() -> DenoiserConfig:
    """Smallest exercisable preset; keeps finite-difference checks cheap."""
    return DenoiserConfig(in_channels=2, grid=4, base=4, mults=(1,),
                          attn_grids=(4,), d_k=4, d_text=4, groups=2)


@dataclasses.dataclass(frozen=True)
class FeatureMap:
    """Spatial features at one layer, kept in channel-first layout."""

    layer: int
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ShapeError("feature maps are (channels, height, width)")
        require_finite("feature map", self.features)

    def tokens(self) -> np.ndarray:
        c = self.features.shape[0]
        return self.features.reshape(c, -1).T


@dataclasses.dataclass(frozen=True)
class ConditioningBundle:
    """Conditioning inputs: weighted prompt, reference latent, design tokens."""

    c_text: PromptFeatures = None
    c_ref: np.ndarray = None
    c_design: np.ndarray = None

    def __post_init__(self):
        has_design = self.c_design is not None and self.c_design.size > 0
        if self.c_text is None and self.c_ref is None and not has_design:
            raise ConfigError("at least one conditioning input required")
        if self.c_text is not None and self.c_text.weights is None:
            raise DomainError("prompt features must carry weights")
        if self.c_design is not None and self.c_design.ndim != 2:
            raise ShapeError("design tokens are a (k, d_text) matrix")

    def design_rows(self) -> np.ndarray:
        if self.c_design is None:
            return np.zeros((0, 0))
        return self.c_design


def empty_bundle_guard(cond) -> ConditioningBundle:
    if not isinstance(cond, ConditioningBundle):
        raise ConfigError("conditioning must be a ConditioningBundle")
    return cond


@dataclasses.dataclass
class DenoiserParams:
    """Flat name-to-array parameter store plus its config.

    Names under the "ref." prefix are the frozen reference branch and are
    excluded from training.
    """

    config: DenoiserConfig
    values: dict

    def trainable_names(self) -> list:
        return sorted(n for n in self.values if not n.startswith(_REF_PREFIX))

    def frozen_names(self) -> list:
        return sorted(n for n in self.values if n.startswith(_REF_PREFIX))

    def n_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else sorted(self.values)
        return int(sum(self.values[n].size for n in names))

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {n: v.copy() for n, v in self.values.items()})


def _conv_names(prefix):
    return prefix + "w", prefix + "b"


def _res_names(prefix, cin, cout):
    names = {
        prefix + "norm1.scale": (cin,),
        prefix + "norm1.shift": (cin,),
        prefix + "conv1.w": (cout, cin, 3, 3),
        prefix + "conv1.b": (cout,),
        prefix + "temb.w": None,
        prefix + "temb.b": (cout,),
        prefix + "norm2.scale": (cout,),
        prefix + "norm2.shift": (cout,),
        prefix + "conv2.w": (cout, cout, 3, 3),
        prefix + "conv2.b": (cout,),
    }
    if cin != cout:
        names[prefix + "skip.w"] = (cout, cin, 1, 1)
        names[prefix + "skip.b"] = (cout,)
    return names


def _reference_source_names(cfg: DenoiserConfig) -> list:
    """Trainable names whose values seed the frozen reference branch."""
    names = ["temb.w1", "temb.b1", "temb.w2", "temb.b2", "in_conv.w", "in_conv.b"]
    for i, ch in enumerate(cfg.channels):
        names.extend(n for n in _res_names(f"enc{i}.res0.", ch, ch))
        if i < cfg.levels - 1:
            names.extend(_conv_names(f"down{i}."))
    return names


def init_params(config: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    """Seeded initialization honoring the zero-init output conventions."""
    rng = Rng(seed)
    values = {}

    def gauss(name, shape, scale):
        values[name] = rng.spawn("init", name).normal(shape) * scale

    def conv(prefix, cin, cout, k=3, zero=False):
        wname, bname = _conv_names(prefix)
        if zero:
            values[wname] = np.zeros((cout, cin, k, k))
        else:
            gauss(wname, (cout, cin, k, k), np.sqrt(2.0 / (cin * k * k)))
        values[bname] = np.zeros(cout)

    def norm(prefix, c):
        values[prefix + "scale"] = np.ones(c)
        values[prefix + "shift"] = np.zeros(c)

    def linear(prefix, din, dout, zero=False):
        if zero:
            values[prefix + "w"] = np.zeros((din, dout))
        else:
            gauss(prefix + "w", (din, dout), 1.0 / np.sqrt(din))
        values[prefix + "b"] = np.zeros(dout)

    def proj(name, din, dout, zero=False):
        if zero:
            values[name] = np.zeros((din, dout))
        else:
            gauss(name, (din, dout), 1.0 / np.sqrt(din))

    def res_block(prefix, cin, cout):
        norm(prefix + "norm1.", cin)
        conv(prefix + "conv1.", cin, cout)
        linear(prefix + "temb.", config.base, cout)
        norm(prefix + "norm2.", cout)
        conv(prefix + "conv2.", cout, cout)
        if cin != cout:
            conv(prefix + "skip.", cin, cout, k=1)

    def attn_site(prefix, c, d_kv):
        norm(prefix + "norm.", c)
        proj(prefix + "wq", c, config.d_k)
        proj(prefix + "wk", d_kv, config.d_k)
        proj(prefix + "wv", d_kv, config.d_k)
        proj(prefix + "wo", config.d_k, c)

    ch = config.channels
    gauss("temb.w1", (config.base, config.base), 1.0 / np.sqrt(config.base))
    values["temb.b1"] = np.zeros(config.base)
    gauss("temb.w2", (config.base, config.base), 1.0 / np.sqrt(config.base))
    values["temb.b2"] = np.zeros(config.base)
    conv("in_conv.", config.in_channels, ch[0])
    for i, c in enumerate(ch):
        res_block(f"enc{i}.res0.", c, c)
        if config.level_grid(i) in config.attn_grids:
            attn_site(f"enc{i}.self.", c, c)
            attn_site(f"enc{i}.text.", c, config.d_text)
        if i < config.levels - 1:
            conv(f"down{i}.", c, ch[i + 1])
    res_block("mid.res0.", ch[-1], ch[-1])
    if config.level_grid(config.levels - 1) in config.attn_grids:
        attn_site("mid.self.", ch[-1], ch[-1])
        attn_site("mid.text.", ch[-1], config.d_text)
    res_block("mid.res1.", ch[-1], ch[-1])
    for i in reversed(range(config.levels)):
        c = ch[i]
        res_block(f"dec{i}.res0.", 2 * c, c)
        if config.level_grid(i) in config.attn_grids:
            attn_site(f"dec{i}.self.", c, c)
            attn_site(f"dec{i}.text.", c, config.d_text)
        proj(f"dec{i}.design.wq", config.d_text, config.d_k)
        proj(f"dec{i}.design.wk", c, config.d_k)
        proj(f"dec{i}.design.wv", c, config.d_k)
        proj(f"dec{i}.design.wo", config.d_k, c, zero=True)
        if i > 0:
            conv(f"up{i}.", c, ch[i - 1])
    norm("out.norm.", ch[0])
    conv("out_conv.", ch[0], config.in_channels, zero=True)

    params = DenoiserParams(config, values)
    refresh_reference(params)
    return params


def refresh_reference(params: DenoiserParams) -> None:
    """Copy the current encoder-path weights into the frozen branch."""
    for name in _reference_source_names(params.config):
        params.values[_REF_PREFIX + name] = params.values[name].copy()


# --- forward pass over autograd variables ---


def _sinusoid(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])[None, :]


def _time_features(p, prefix, t, base):
    h = ag.matmul(Var(_sinusoid(t, base)), p[prefix + "temb.w1"]) + p[prefix + "temb.b1"]
    return ag.matmul(ag.silu(h), p[prefix + "temb.w2"]) + p[prefix + "temb.b2"]


def _group_norm(x, scale, shift, groups, eps=1e-5):
    _, c, hgt, wid = x.shape
    g = ag.reshape(x, (groups, (c // groups) * hgt * wid))
    m = ag.mean_(g, axis=1, keepdims=True)
    d = g - m
    v = ag.mean_(d * d, axis=1, keepdims=True)
    normed = ag.reshape(d / ag.sqrt(v + eps), (1, c, hgt, wid))
    return normed * ag.reshape(scale, (1, c, 1, 1)) + ag.reshape(shift, (1, c, 1, 1))


def _res_apply(p, prefix, x, temb, groups):
    cout = p[prefix + "conv1.w"].shape[0]
    h = _group_norm(x, p[prefix + "norm1.scale"], p[prefix + "norm1.shift"], groups)
    h = ag.conv2d(ag.silu(h), p[prefix + "conv1.w"], p[prefix + "conv1.b"], pad=1)
    shift = ag.matmul(temb, p[prefix + "temb.w"]) + p[prefix + "temb.b"]
    h = h + ag.reshape(shift, (1, cout, 1, 1))
    h = _group_norm(h, p[prefix + "norm2.scale"], p[prefix + "norm2.shift"], groups)
    h = ag.conv2d(ag.silu(h), p[prefix + "conv2.w"], p[prefix + "conv2.b"], pad=1)
    if prefix + "skip.w" in p:
        x = ag.conv2d(x, p[prefix + "skip.w"], p[prefix + "skip.b"])
    return h + x


def _tokens(h):
    _, c, hgt, wid = h.shape
    return ag.transpose(ag.reshape(h, (c, hgt * wid)), (1, 0))


def _untokens(tok, shape):
    _, c, hgt, wid = shape
    return ag.reshape(ag.transpose(tok, (1, 0)), (1, c, hgt, wid))


def _attn_apply(q_tok, kv_tok, wq, wk, wv, wo, bias=None):
    d_k = wq.shape[1]
    q = ag.matmul(q_tok, wq)
    k = ag.matmul(kv_tok, wk)
    v = ag.matmul(kv_tok, wv)
    logits = ag.matmul(q, ag.transpose(k, (1, 0))) * (1.0 / np.sqrt(d_k))
    att = ag.softmax_last(logits, bias)
    return ag.matmul(ag.matmul(att, v), wo)


def _self_site(p, prefix, h, ref_map, groups):
    normed = _group_norm(h, p[prefix + "norm.scale"], p[prefix + "norm.shift"], groups)
    q = _tokens(normed)
    if ref_map is not None:
        ref_normed = _group_norm(ref_map, p[prefix + "norm.scale"], p[prefix + "norm.shift"], groups)
        kv = ag.concat([q, _tokens(ref_normed)], axis=0)
    else:
        kv = q
    out = _attn_apply(q, kv, p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"], p[prefix + "wo"])
    return h + _untokens(out, h.shape)


def _text_site(p, prefix, h, text_emb, text_bias, groups):
    normed = _group_norm(h, p[prefix + "norm.scale"], p[prefix + "norm.shift"], groups)
    q = _tokens(normed)
    out = _attn_apply(q, Var(text_emb), p[prefix + "wq"], p[prefix + "wk"],
                      p[prefix + "wv"], p[prefix + "wo"], bias=text_bias)
    return h + _untokens(out, h.shape)


def _design_site(p, prefix, h, design):
    if design is None:
        return h
    tok = _tokens(h)
    att = _attn_apply(Var(design), tok, p[prefix + "wq"], p[prefix + "wk"],
                      p[prefix + "wv"], Var(np.eye(p[prefix + "wv"].shape[1])))
    pooled = ag.mean_(att, axis=0, keepdims=True)
    addv = ag.matmul(pooled, p[prefix + "wo"])
    return h + ag.reshape(addv, (1, h.shape[1], 1, 1))


def _reference_maps(p, z_ref, t, cfg):
    temb = _time_features(p, _REF_PREFIX, t, cfg.base)
    h = ag.conv2d(Var(z_ref[None]), p[_REF_PREFIX + "in_conv.w"],
                  p[_REF_PREFIX + "in_conv.b"], pad=1)
    maps = {}
    for i in range(cfg.levels):
        h = _res_apply(p, f"{_REF_PREFIX}enc{i}.res0.", h, temb, cfg.groups)
        maps[cfg.level_grid(i)] = h
        if i < cfg.levels - 1:
            h = ag.conv2d(h, p[f"{_REF_PREFIX}down{i}.w"], p[f"{_REF_PREFIX}down{i}.b"],
                          stride=2, pad=1)
    return maps


def _text_inputs(cond: ConditioningBundle):
    if cond.c_text is None:
        return None, None
    weights = cond.c_text.weights
    # uniform weights give a zero bias, reducing to unweighted attention
    return cond.c_text.embeddings, np.log(weights.size * weights)


def forward_vars(p: dict, z, t: int, cond: ConditioningBundle, cfg: DenoiserConfig):
    """UNet forward over autograd variables; returns the (C, H, W) output Var."""
    z4 = ag.reshape(z, (1,) + tuple(z.shape))
    temb = _time_features(p, "", t, cfg.base)
    text_emb, text_bias = _text_inputs(cond)
    design = cond.c_design if cond.c_design is not None and cond.c_design.size else None
    ref_maps = {}
    if cond.c_ref is not None:
        ref_maps = _reference_maps(p, cond.c_ref, t, cfg)

    h = ag.conv2d(z4, p["in_conv.w"], p["in_conv.b"], pad=1)
    skips = []
    for i in range(cfg.levels):
        h = _res_apply(p, f"enc{i}.res0.", h, temb, cfg.groups)
        if cfg.level_grid(i) in cfg.attn_grids:
            h = _self_site(p, f"enc{i}.self.", h, ref_maps.get(cfg.level_grid(i)), cfg.groups)
            if text_emb is not None:
                h = _text_site(p, f"enc{i}.text.", h, text_emb, text_bias, cfg.groups)
        skips.append(h)
        if i < cfg.levels - 1:
            h = ag.conv2d(h, p[f"down{i}.w"], p[f"down{i}.b"], stride=2, pad=1)

    deep = cfg.level_grid(cfg.levels - 1)
    h = _res_apply(p, "mid.res0.", h, temb, cfg.groups)
    if deep in cfg.attn_grids:
        h = _self_site(p, "mid.self.", h, ref_maps.get(deep), cfg.groups)
        if text_emb is not None:
            h = _text_site(p, "mid.text.", h, text_emb, text_bias, cfg.groups)
    h = _res_apply(p, "mid.res1.", h, temb, cfg.groups)

    for i in reversed(range(cfg.levels)):
        h = ag.concat([h, skips[i]], axis=1)
        h = _res_apply(p, f"dec{i}.res0.", h, temb, cfg.groups)
        if cfg.level_grid(i) in cfg.attn_grids:
            h = _self_site(p, f"dec{i}.self.", h, ref_maps.get(cfg.level_grid(i)), cfg.groups)
            if text_emb is not None:
                h = _text_site(p, f"dec{i}.text.", h, text_emb, text_bias, cfg.groups)
        h = _design_site(p, f"dec{i}.design.", h, design)
        if i > 0:
            h = ag.conv2d(ag.upsample2x(h), p[f"up{i}.w"], p[f"up{i}.b"], pad=1)

    h = _group_norm(h, p["out.norm.scale"], p["out.norm.shift"], cfg.groups)
    h = ag.conv2d(ag.silu(h), p["out_conv.w"], p["out_conv.b"], pad=1)
    return ag.reshape(h, tuple(z.shape))


def wrap_params(params: DenoiserParams, trainable: bool = False) -> dict:
    return {
        name: Var(arr, requires_grad=trainable and not name.startswith(_REF_PREFIX))
        for name, arr in params.values.items()
    }


def predict_noise(z_t, t: int, cond: ConditioningBundle, params: DenoiserParams) -> np.ndarray:
    """Predicted noise for one latent sample; shape equals the input shape."""
    cond = empty_bundle_guard(cond)
    data = z_t.data if isinstance(z_t, LatentGrid) else np.asarray(z_t, dtype=np.float64)
    cfg = params.config
    if data.shape != (cfg.in_channels, cfg.grid, cfg.grid):
        raise ShapeError("latent shape does not match the denoiser config")
    if not isinstance(t, (int, np.integer)) or t < 1:
        raise DomainError("t must be a positive integer")
    if cond.c_ref is not None and cond.c_ref.shape != data.shape:
        raise ShapeError("reference latent shape must match the input")
    if cond.c_design is not None and cond.c_design.size and cond.c_design.shape[1] != cfg.d_text:
        raise ShapeError("design token width must equal d_text")
    if cond.c_text is not None and cond.c_text.embeddings.shape[1] != cfg.d_text:
        raise ShapeError("prompt embedding width must equal d_text")
    with ag.no_grad():
        out = forward_vars(wrap_params(params), Var(data), int(t), cond, cfg)
    return out.data


# --- standalone attention operations on plain arrays ---


def _proj_vars(proj: dict):
    try:
        return tuple(Var(np.asarray(proj[k], dtype=np.float64))
                     for k in ("W_q", "W_k", "W_v", "W_o"))
    except KeyError as exc:
        raise ConfigError("projection dict needs W_q, W_k, W_v, W_o") from exc


def attention(q_in: np.ndarray, kv_in: np.ndarray, proj: dict, logit_bias=None) -> np.ndarray:
    """Single-head scaled dot-product attention with an optional logit bias."""
    q_in = np.asarray(q_in, dtype=np.float64)
    kv_in = np.asarray(kv_in, dtype=np.float64)
    if q_in.ndim != 2 or kv_in.ndim != 2:
        raise ShapeError("attention inputs are (rows, channels) matrices")
    wq, wk, wv, wo = _proj_vars(proj)
    if q_in.shape[1] != wq.shape[0] or kv_in.shape[1] != wk.shape[0]:
        raise ShapeError("projection shapes do not match the inputs")
    if logit_bias is not None:
        logit_bias = np.asarray(logit_bias, dtype=np.float64)
        if logit_bias.shape != (kv_in.shape[0],):
            raise ShapeError("one logit bias per key row required")
    with ag.no_grad():
        out = _attn_apply(Var(q_in), Var(kv_in), wq, wk, wv, wo, bias=logit_bias)
    return out.data


def appearance_context_attention(h: FeatureMap, h_ref, proj: dict) -> FeatureMap:
    """Attention of h's tokens over the concatenation of h and reference tokens.

    Queries come from the h rows only, which equals querying from the full
    concatenation and keeping the h rows. A missing reference degenerates
    to plain self-attention.
    """
    tokens = h.tokens()
    if h_ref is None:
        kv = tokens
    else:
        if h_ref.features.shape[0] != h.features.shape[0]:
            raise ShapeError("reference channel dim must match")
        kv = np.concatenate([tokens, h_ref.tokens()], axis=0)
    out = attention(tokens, kv, proj)
    c, hgt, wid = h.features.shape
    return FeatureMap(layer=h.layer, features=out.T.reshape(c, hgt, wid))


def design_control_block(h_l: FeatureMap, c_design: np.ndarray, params_l: dict) -> FeatureMap:
    """Design tokens query the spatial features; pooled result broadcast-adds."""
    c_design = np.asarray(c_design, dtype=np.float64)
    if c_design.size == 0:
        return h_l
    wq, wk, wv, wo = _proj_vars(params_l)
    tokens = h_l.tokens()
    with ag.no_grad():
        att = _attn_apply(Var(c_design), Var(tokens), wq, wk, wv,
                          Var(np.eye(wv.shape[1])))
        pooled = ag.mean_(att, axis=0, keepdims=True)
        addv = ag.matmul(pooled, wo)
    return FeatureMap(layer=h_l.layer,
                      features=h_l.features + addv.data.reshape(-1, 1, 1))
