"""Exactly invertible image<->latent codec and PPM image I/O.

Images are float64 arrays of shape (H, W, 3) with values in [0,1].  The
encoder is a space-to-depth rearrangement (patch_size x patch_size pixel
blocks become channels) followed by a fixed orthonormal channel mixing and an
affine standardization under dataset pixel statistics.  Every step has an
exact inverse, so diffusion properties can be tested in latent space without
codec error confounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .tensor_core import Rng, require_finite


def validate_image(img: np.ndarray, patch_size: int | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    if img.min() < -1e-12 or img.max() > 1.0 + 1e-12:
        raise ShapeError("image values must lie in [0, 1]")
    if patch_size is not None and (img.shape[0] % patch_size or img.shape[1] % patch_size):
        raise ShapeError(
            f"image dims {img.shape[:2]} not divisible by patch_size {patch_size}"
        )
    return img


@dataclass
class LatentGrid:
    """Latent tensor (C, H', W') with a timestep tag; t=0 means clean."""

    data: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"latent must be (C, H, W), got {self.data.shape}")
        require_finite("LatentGrid", self.data)
        if self.t < 0:
            raise ShapeError("latent timestep tag must be >= 0")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Codec:
    """Orthonormal patchify codec with affine standardization.

    channels = 3 * patch_size**2.  ``mixing`` is orthonormal (checked at
    construction); ``offset``/``scale`` come from ``fit`` over a dataset and
    default to identity.
    """

    patch_size: int
    mixing: np.ndarray
    offset: np.ndarray = field(default=None)  # per-channel mean of mixed latent
    scale: np.ndarray = field(default=None)  # per-channel std, floored

    def __post_init__(self):
        c = 3 * self.patch_size**2
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if self.mixing.shape != (c, c):
            raise ShapeError(f"mixing matrix must be ({c},{c}), got {self.mixing.shape}")
        err = np.abs(self.mixing.T @ self.mixing - np.eye(c)).max()
        if err >= 1e-10:
            raise ShapeError(f"mixing matrix not orthonormal: |M'M - I| = {err:.2e}")
        if self.offset is None:
            self.offset = np.zeros(c)
        if self.scale is None:
            self.scale = np.ones(c)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.offset.shape != (c,) or self.scale.shape != (c,):
            raise ShapeError("offset/scale must be per-channel vectors")
        if np.any(self.scale <= 0):
            raise ShapeError("scale must be positive")

    @property
    def channels(self) -> int:
        return 3 * self.patch_size**2

    @classmethod
    def create(cls, patch_size: int = 4, seed: int = 0) -> "Codec":
        c = 3 * patch_size**2
        q, r = np.linalg.qr(Rng(seed).spawn("codec-mixing").normal((c, c)))
        # fix the QR sign ambiguity so the matrix is a pure function of the seed
        q = q * np.sign(np.diag(r))
        return cls(patch_size=patch_size, mixing=q)

    def _space_to_depth(self, img: np.ndarray) -> np.ndarray:
        p = self.patch_size
        h, w = img.shape[0] // p, img.shape[1] // p
        # (H, W, 3) -> (3*p*p, h, w); channel index = ch*p*p + py*p + px
        return img.reshape(h, p, w, p, 3).transpose(4, 1, 3, 0, 2).reshape(self.channels, h, w)

    def _depth_to_space(self, stacked: np.ndarray) -> np.ndarray:
        p = self.patch_size
        _, h, w = stacked.shape
        return (
            stacked.reshape(3, p, p, h, w).transpose(3, 1, 4, 2, 0).reshape(h * p, w * p, 3)
        )

    def fit(self, images) -> "Codec":
        """Return a copy whose affine standardization matches the dataset."""
        mixed = [
            np.einsum("ij,jhw->ihw", self.mixing, self._space_to_depth(validate_image(im, self.patch_size)))
            for im in images
        ]
        flat = np.concatenate([m.reshape(self.channels, -1) for m in mixed], axis=1)
        mu = flat.mean(axis=1)
        sigma = np.maximum(flat.std(axis=1), 1e-2)
        return Codec(self.patch_size, self.mixing, mu, sigma)

    def encode(self, img: np.ndarray) -> LatentGrid:
        img = validate_image(img, self.patch_size)
        stacked = self._space_to_depth(img)
        mixed = np.einsum("ij,jhw->ihw", self.mixing, stacked)
        z = (mixed - self.offset[:, None, None]) / self.scale[:, None, None]
        return LatentGrid(z, t=0)

    def decode(self, z: LatentGrid) -> np.ndarray:
        img, _ = self.decode_report(z)
        return img

    def decode_report(self, z: LatentGrid) -> tuple[np.ndarray, dict]:
        """Decode plus diagnostics: fraction of pixels clamped to [0,1]."""
        if z.data.shape[0] != self.channels:
            raise ShapeError(
                f"latent has {z.data.shape[0]} channels, codec expects {self.channels}"
            )
        mixed = z.data * self.scale[:, None, None] + self.offset[:, None, None]
        stacked = np.einsum("ij,jhw->ihw", self.mixing.T, mixed)
        raw = self._depth_to_space(stacked)
        img = np.clip(raw, 0.0, 1.0)
        clamped = float(np.mean(np.abs(raw - img) > 1e-12))
        return img, {"clamped_fraction": clamped, "noisy_input": z.t != 0}


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255) image files


def write_ppm(path, img: np.ndarray) -> None:
    img = validate_image(img)
    h, w = img.shape[:2]
    payload = np.rint(img * 255.0).astype(np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload)


def _read_token(f) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise FormatError("ppm: unexpected end of header")
        if ch == b"#":  # comment to end of line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_token(f) != b"P6":
            raise FormatError("ppm: not a P6 file")
        try:
            w, h, maxval = (int(_read_token(f)) for _ in range(3))
        except ValueError as e:
            raise FormatError(f"ppm: bad header field: {e}") from e
        if maxval != 255:
            raise FormatError(f"ppm: only maxval 255 supported, got {maxval}")
        payload = f.read(w * h * 3)
        if len(payload) != w * h * 3:
            raise FormatError("ppm: truncated pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0
