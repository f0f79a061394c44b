"""Ancestral reverse-process sampling and sample artifact output.

Each sample runs the learned denoiser backwards from pure noise: at step
t the predicted noise gives the reverse mean, posterior-variance noise is
added for t > 1, and the final latent is decoded with clamp diagnostics.
Samples are pure functions of (seed, prompt, params, schedule); sample i
of a request always draws from its own derived stream.
"""

from __future__ import annotations

import dataclasses
import json
import warnings

import numpy as np

from .control_denoiser import DenoiserParams, predict_noise
from .diffusion_process import NoiseSchedule, reverse_params
from .errors import ConfigError, ShapeError
from .latent_codec import Codec, LatentGrid, write_ppm
from .tensor_core import Rng


@dataclasses.dataclass(frozen=True)
class SampleRequest:
    """What to generate: prompt, optional reference image, seed, count."""

    prompt: str
    seed: int = 0
    count: int = 1
    ref_image: np.ndarray = None
    schedule_override: NoiseSchedule = None

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be at least 1")
        if not isinstance(self.prompt, str) or not self.prompt.strip():
            raise ConfigError("a nonempty prompt is required")


def _looks_untrained(params: DenoiserParams) -> bool:
    return bool(np.all(params.values["out_conv.w"] == 0.0))


def sample_latent(stream: Rng, prompt: str, params: DenoiserParams,
                  schedule: NoiseSchedule, codec: Codec, encoder,
                  ref_image=None, predict_fn=None):
    """Reverse diffusion for one sample; returns (final latent, per-step stats)."""
    if predict_fn is None:
        predict_fn = predict_noise
    cfg = params.config
    z = stream.spawn("init").normal((cfg.in_channels, cfg.grid, cfg.grid))
    steps = []
    for t in range(schedule.T, 0, -1):
        cond = encoder.bundle(prompt, t, schedule, ref_image=ref_image,
                              stream=stream.spawn("cond", t))
        eps_hat = predict_fn(z, t, cond, params)
        post = reverse_params(z, t, eps_hat, schedule)
        if t > 1:
            z = post.mean + np.sqrt(post.var) * stream.spawn("noise", t).normal(z.shape)
        else:
            z = post.mean
        _, diag = codec.decode_report(LatentGrid(z, t=t - 1))
        steps.append({"t": int(t), "clamped_fraction": diag["clamped_fraction"]})
    return z, steps


def ancestral_sample(req: SampleRequest, params: DenoiserParams,
                     schedule: NoiseSchedule, codec: Codec, encoder,
                     predict_fn=None, return_diagnostics: bool = False):
    """Images for a SampleRequest, deterministic per (seed, prompt, params)."""
    sched = req.schedule_override if req.schedule_override is not None else schedule
    cfg = params.config
    if codec.channels != cfg.in_channels:
        raise ShapeError("codec channels do not match the denoiser config")
    if _looks_untrained(params):
        warnings.warn("sampling from untrained parameters decodes pure noise",
                      RuntimeWarning)
    rng = Rng(req.seed)
    images = []
    diagnostics = []
    for i in range(req.count):
        stream = rng.spawn("sample", i)
        z, steps = sample_latent(stream, req.prompt, params, sched, codec, encoder,
                                 ref_image=req.ref_image, predict_fn=predict_fn)
        img, diag = codec.decode_report(LatentGrid(z, t=0))
        images.append(img)
        diagnostics.append({
            "index": i,
            "clamped_fraction": diag["clamped_fraction"],
            "steps": steps,
        })
    if return_diagnostics:
        return images, diagnostics
    return images


def contact_sheet(images, gap: int = 2) -> np.ndarray:
    """Single montage image: samples tiled on a near-square grid."""
    if not images:
        raise ConfigError("no images to tile")
    h, w, _ = images[0].shape
    for img in images:
        if img.shape != (h, w, 3):
            raise ShapeError("all tiles must share one shape")
    cols = int(np.ceil(np.sqrt(len(images))))
    rows = int(np.ceil(len(images) / cols))
    sheet = np.ones((rows * h + gap * (rows - 1), cols * w + gap * (cols - 1), 3))
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        y, x = r * (h + gap), c * (w + gap)
        sheet[y:y + h, x:x + w] = img
    return sheet


def write_samples(outdir, req: SampleRequest, images, diagnostics) -> dict:
    """PPM files, a JSON sidecar, and a contact-sheet montage under outdir."""
    import pathlib

    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"images": [], "sidecar": str(outdir / "samples.json"),
             "contact_sheet": str(outdir / "contact_sheet.ppm")}
    for i, img in enumerate(images):
        p = outdir / f"{i:06d}.ppm"
        write_ppm(p, img)
        paths["images"].append(str(p))
    write_ppm(outdir / "contact_sheet.ppm", contact_sheet(images))
    sidecar = {
        "prompt": req.prompt,
        "seed": req.seed,
        "count": req.count,
        "has_reference": req.ref_image is not None,
        "samples": diagnostics,
    }
    with open(outdir / "samples.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return paths
