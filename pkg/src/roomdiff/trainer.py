"""Noise-prediction training: loss, Adam updates, and gradient verification.

The objective is the standard denoising score-matching loss: per sample,
draw a timestep and a noise vector, form the noised latent, and penalize
the squared error between the drawn noise and the model prediction under
the sample's conditioning. Per-sample randomness is keyed by a content
hash, so the loss is invariant to batch ordering.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib

import numpy as np

from . import _autograd as ag
from ._autograd import Var
from .control_denoiser import (
    ConditioningBundle,
    DenoiserParams,
    forward_vars,
    wrap_params,
)
from .diffusion_process import NoiseSchedule, forward_marginal
from .errors import ConfigError, DomainError, FormatError, ShapeError, TrainingAbort
from .latent_codec import Codec
from .prompt_encoder import (
    PatchScorer,
    Vocabulary,
    design_token_mask,
    tokenize_and_embed,
    weight_prompt,
)
from .tensor_core import Rng

_ADAM_EPS = 1e-8


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings; defaults are the desk-scale profile."""

    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 8
    steps: int = 0
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("momentum coefficients must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")


class ConditioningBuilder:
    """Turns (prompt, reference image) pairs into ConditioningBundles.

    Prompt features and image latents are cached by content, which keeps
    repeated epochs cheap without affecting determinism.
    """

    def __init__(self, codec: Codec, vocab: Vocabulary, table: np.ndarray,
                 scorer: PatchScorer):
        self.codec = codec
        self.vocab = vocab
        self.table = table
        self.scorer = scorer
        self._prompt_cache = {}
        self._latent_cache = {}

    def text_features(self, prompt: str):
        cached = self._prompt_cache.get(prompt)
        if cached is None:
            feats = weight_prompt(tokenize_and_embed(prompt, self.vocab, self.table),
                                  self.scorer)
            design = feats.embeddings[design_token_mask(feats.token_ids, self.vocab)]
            cached = (feats, design)
            self._prompt_cache[prompt] = cached
        return cached

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        key = hashlib.blake2b(image.tobytes(), digest_size=16).digest()
        cached = self._latent_cache.get(key)
        if cached is None:
            cached = self.codec.encode(image).data
            self._latent_cache[key] = cached
        return cached

    def bundle(self, prompt: str, t: int, schedule: NoiseSchedule,
               ref_image=None, stream: Rng = None) -> ConditioningBundle:
        feats, design = self.text_features(prompt)
        c_ref = None
        if ref_image is not None:
            if stream is None:
                raise ConfigError("a noise stream is required to noise the reference")
            z0_ref = self.encode_image(ref_image)
            c_ref, _ = forward_marginal(z0_ref, t, schedule, stream.spawn("ref-noise"))
        return ConditioningBundle(c_text=feats, c_ref=c_ref, c_design=design)


def sample_stream(rng: Rng, image: np.ndarray, prompt: str, ref_image=None) -> Rng:
    """Per-sample RNG stream keyed by sample content, not batch position."""
    h = hashlib.blake2b(digest_size=16)
    h.update(image.tobytes())
    h.update(prompt.encode("utf-8"))
    if ref_image is not None:
        h.update(ref_image.tobytes())
    return rng.spawn("sample", h.hexdigest())


def training_loss(batch, params: DenoiserParams, schedule: NoiseSchedule,
                  rng: Rng, builder: ConditioningBuilder, forward_fn=forward_vars):
    """Mean per-sample squared noise error and gradients of trainable params.

    batch items are (image, prompt, reference image or None, SceneSpec).
    The per-sample loss is the summed squared error over latent
    coordinates, so an untrained zero predictor scores about the latent
    dimension count.
    """
    if not batch:
        raise DomainError("empty training batch")
    cfg = params.config
    pvars = wrap_params(params, trainable=True)
    terms = []
    for image, prompt, ref_image, _spec in batch:
        stream = sample_stream(rng, image, prompt, ref_image)
        z0 = builder.encode_image(image)
        if z0.shape != (cfg.in_channels, cfg.grid, cfg.grid):
            raise ShapeError("encoded latent does not match the denoiser config")
        t = int(stream.spawn("t").integers(1, schedule.T + 1))
        z_t, eps = forward_marginal(z0, t, schedule, stream.spawn("noise"))
        cond = builder.bundle(prompt, t, schedule, ref_image=ref_image, stream=stream)
        eps_hat = forward_fn(pvars, Var(z_t), t, cond, cfg)
        diff = eps_hat - Var(eps)
        terms.append(ag.sum_(diff * diff))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    loss = total * (1.0 / len(batch))
    ag.backward(loss)
    grads = {}
    for name in params.trainable_names():
        g = pvars[name].grad
        grads[name] = np.zeros_like(params.values[name]) if g is None else g
    return float(loss.data), grads


@dataclasses.dataclass
class OptimizerState:
    """Adam moment accumulators keyed like the trainable parameters."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def create(cls, params: DenoiserParams) -> "OptimizerState":
        names = params.trainable_names()
        return cls(
            m={n: np.zeros_like(params.values[n]) for n in names},
            v={n: np.zeros_like(params.values[n]) for n in names},
        )


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def optimizer_step(params: DenoiserParams, grads: dict, state: OptimizerState,
                   config: TrainConfig):
    """One Adam step with bias correction, decoupled decay, global-norm clip."""
    bad = sorted(n for n, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise TrainingAbort(f"non-finite gradients for: {', '.join(bad)}")
    norm = global_grad_norm(grads)
    scale = 1.0
    if config.grad_clip is not None and norm > config.grad_clip:
        scale = config.grad_clip / norm
    state.step += 1
    c1 = 1.0 - config.beta1 ** state.step
    c2 = 1.0 - config.beta2 ** state.step
    for name, g in grads.items():
        g = g * scale
        state.m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        theta = params.values[name]
        params.values[name] = theta - config.lr * (
            m_hat / (np.sqrt(v_hat) + _ADAM_EPS) + config.weight_decay * theta)
    return params, state


def gradient_check(params, loss_fn, subset_size: int, eps: float = 1e-5,
                   seed: int = 0) -> dict:
    """Central finite differences against analytic gradients on a coordinate subset.

    Frozen (reference-branch) parameters are excluded. The relative error
    denominator is floored at 1e-4, which turns into an absolute
    agreement requirement for near-zero gradients.
    """
    values = params.values if isinstance(params, DenoiserParams) else params
    names = sorted(n for n in values if not n.startswith("ref."))
    if not names:
        raise ConfigError("no trainable parameters to check")
    base_loss, grads = loss_fn(values)
    again, _ = loss_fn(values)
    if again != base_loss:
        raise DomainError("loss function is not deterministic")
    sizes = np.array([values[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    k = min(subset_size, total)
    flat_picks = np.sort(Rng(seed).spawn("gradcheck").shuffled(total)[:k])
    report = {"checked": int(k), "eps": eps, "max_rel_err": 0.0, "worst": None}
    for flat in flat_picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(int(flat - offsets[which]), values[name].shape)
        keep = values[name][idx]
        values[name][idx] = keep + eps
        up, _ = loss_fn(values)
        values[name][idx] = keep - eps
        dn, _ = loss_fn(values)
        values[name][idx] = keep
        fd = (up - dn) / (2.0 * eps)
        g = grads[name][idx]
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-4)
        if rel >= report["max_rel_err"]:
            report["max_rel_err"] = float(rel)
            report["worst"] = {"name": name, "index": tuple(int(i) for i in idx),
                               "analytic": float(g), "fd": float(fd)}
    return report


def train(dataset, config: TrainConfig, params: DenoiserParams,
          schedule: NoiseSchedule, builder: ConditioningBuilder,
          checkpoint_fn=None, checkpoint_every: int = 500):
    """Seeded training loop; returns (params, loss curve as (step, loss) pairs)."""
    if not dataset:
        raise DomainError("empty training dataset")
    rng = Rng(config.seed)
    state = OptimizerState.create(params)
    curve = []
    order = []
    epoch = 0
    for step in range(1, config.steps + 1):
        batch = []
        while len(batch) < config.batch_size:
            if not order:
                order = list(rng.spawn("shuffle", epoch).shuffled(len(dataset)))
                epoch += 1
            batch.append(dataset[order.pop()])
        loss, grads = training_loss(batch, params, schedule, rng.spawn("step", step),
                                    builder)
        optimizer_step(params, grads, state, config)
        curve.append((step, loss))
        if checkpoint_fn is not None and checkpoint_every and step % checkpoint_every == 0:
            checkpoint_fn(step, params, state)
    return params, curve


def write_curve(path, curve) -> None:
    """Loss curve as a two-column CSV with a header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in curve:
            writer.writerow([step, repr(float(loss))])


def read_curve(path) -> list:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["step", "loss"]:
            raise FormatError("unexpected loss-curve header")
        return [(int(s), float(l)) for s, l in reader]
