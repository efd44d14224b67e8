"""Convolutional VAE in canonical polar coordinates.

The encoder canonicalizes the image with the pose network, then maps the polar
image to a diagonal Gaussian q(z|x).  The decoder maps z back to a canonical
polar image; the Cartesian reconstruction undoes the pose.  The training
objective is the ELBO with a standard-normal prior and a Bernoulli pixel
likelihood scored in canonical polar space.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .equivariant import PosePredictor, canonicalize, decanonicalize
from .errors import CheckpointError, ShapeError
from .optim import ParameterStore, he_normal

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    radial_bins: int = 32
    angular_bins: int = 64
    r_max: Optional[float] = None
    latent_dim: int = 16
    pose_channels: Tuple[int, ...] = (8, 16)
    encoder_channels: Tuple[int, ...] = (8, 16)
    classifier_hidden: int = 32

    @property
    def radius(self) -> float:
        return self.image_size / 2.0 if self.r_max is None else float(self.r_max)

    @property
    def bottleneck(self) -> Tuple[int, int, int]:
        """Feature-map shape after the two stride-2 encoder convolutions."""
        r, a = self.radial_bins, self.angular_bins
        for _ in self.encoder_channels:
            r, a = (r - 1) // 2 + 1, (a - 1) // 2 + 1
        return self.encoder_channels[-1], r, a

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("pose_channels", "encoder_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose_channels"] = list(self.pose_channels)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


def init_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per (seed, named stream)."""
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, key])


class VaeModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, params: Optional[ParameterStore] = None):
        self.config = config
        self.params = ParameterStore() if params is None else params
        cfg = config
        factor = 2 ** len(cfg.encoder_channels)
        if cfg.bottleneck[1] * factor != cfg.radial_bins or cfg.bottleneck[2] * factor != cfg.angular_bins:
            raise ShapeError(f"radial and angular bins must be divisible by {factor}")
        self.pose = PosePredictor(
            self.params, init_rng(seed, "init/pose"), cfg.radial_bins, cfg.angular_bins, cfg.radius,
            channels=cfg.pose_channels,
        )
        rng = init_rng(seed, "init/encoder")
        c_in = 1
        for i, c_out in enumerate(cfg.encoder_channels, start=1):
            self.params.add(f"encoder.conv{i}.weight", he_normal(rng, (c_out, c_in, 3, 3), 9 * c_in))
            self.params.add(f"encoder.conv{i}.bias", np.zeros(c_out))
            c_in = c_out
        flat = int(np.prod(cfg.bottleneck))
        d = cfg.latent_dim
        self.params.add("encoder.dense.weight", rng.standard_normal((2 * d, flat)) * np.sqrt(1.0 / flat))
        self.params.add("encoder.dense.bias", np.zeros(2 * d))

        rng = init_rng(seed, "init/decoder")
        self.params.add("decoder.dense.weight", he_normal(rng, (flat, d), d))
        self.params.add("decoder.dense.bias", np.zeros(flat))
        chans = list(cfg.encoder_channels[::-1][1:]) + [1]
        c_in = cfg.encoder_channels[-1]
        for i, c_out in enumerate(chans, start=1):
            self.params.add(f"decoder.conv{i}.weight", he_normal(rng, (c_out, c_in, 3, 3), 9 * c_in))
            self.params.add(f"decoder.conv{i}.bias", np.zeros(c_out))
            c_in = c_out

    # -- encoder -------------------------------------------------------------

    def _check_size(self, img: Tensor) -> None:
        s = self.config.image_size
        if img.shape[-2:] != (s, s):
            raise ShapeError(f"expected {s}x{s} images, got {img.shape}")

    def encode_polar(self, polar: Tensor) -> Tuple[Tensor, Tensor]:
        h = polar
        for i in range(1, len(self.config.encoder_channels) + 1):
            h = ad.relu(
                ad.conv2d(h, self.params[f"encoder.conv{i}.weight"], self.params[f"encoder.conv{i}.bias"],
                          stride=2, padding=1, padding_mode="circular_width")
            )
        h = ad.reshape(h, (h.shape[0], -1))
        out = ad.linear(h, self.params["encoder.dense.weight"], self.params["encoder.dense.bias"])
        d = self.config.latent_dim
        return out[:, :d], out[:, d:]

    def encode(self, img: Tensor, detach_pose: bool = False):
        """Return ``(mean, logvar, angle, canonical_polar)`` for a batch ``(N, 1, S, S)``."""
        self._check_size(img)
        if img.ndim == 3:
            img = ad.reshape(img, (1,) + img.shape)
        polar, angle = canonicalize(self.pose, img, detach_pose=detach_pose)
        mean_, logvar = self.encode_polar(polar)
        return mean_, logvar, angle, polar

    # -- decoder -------------------------------------------------------------

    def decoder_logits(self, z: Tensor) -> Tensor:
        cfg = self.config
        h = ad.relu(ad.linear(z, self.params["decoder.dense.weight"], self.params["decoder.dense.bias"]))
        h = ad.reshape(h, (z.shape[0],) + cfg.bottleneck)
        n_conv = len(cfg.encoder_channels)
        for i in range(1, n_conv + 1):
            h = ad.upsample2x(h)
            h = ad.conv2d(h, self.params[f"decoder.conv{i}.weight"], self.params[f"decoder.conv{i}.bias"],
                          stride=1, padding=1, padding_mode="circular_width")
            if i < n_conv:
                h = ad.relu(h)
        return h

    def decode_polar(self, z: Tensor) -> Tensor:
        return ad.sigmoid(self.decoder_logits(z))

    def decode(self, z: Tensor, angle) -> Tensor:
        """Cartesian reconstruction ``(N, 1, S, S)``: decoded polar image rotated back by ``angle``."""
        cfg = self.config
        return decanonicalize(self.decode_polar(z), angle, cfg.image_size, cfg.radius)

    # -- objective -----------------------------------------------------------

    def elbo(self, img: Tensor, rng: np.random.Generator, per_example: bool = False) -> Tensor:
        """Single-sample ELBO estimate, averaged over the batch unless ``per_example``.

        The pose is detached: it is a predicted transformation, not a latent
        with a prior, so the VAE objective does not train the pose network.
        """
        mean_, logvar, _, polar = self.encode(img, detach_pose=True)
        eps = rng.standard_normal(mean_.shape)
        z = reparameterize(mean_, logvar, eps)
        loglik = ad.bernoulli_log_likelihood(self.decoder_logits(z), polar.data, axis=(1, 2, 3))
        value = ad.sub(loglik, gaussian_kl(mean_, logvar, per_example=True))
        return value if per_example else ad.mean(value)


def reparameterize(mean_: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    """``z = mean + exp(0.5 * logvar) * eps`` with the noise held fixed."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mean_.shape or logvar.shape != mean_.shape:
        raise ShapeError(f"mean {mean_.shape}, logvar {logvar.shape}, noise {eps.shape} must match")
    return ad.add(mean_, ad.mul(ad.exp(ad.mul(logvar, 0.5)), Tensor(eps)))


def sample_latent(mean_: Tensor, logvar: Tensor, rng_seed) -> Tuple[Tensor, np.ndarray]:
    """Draw ``eps ~ N(0, I)`` from ``rng_seed`` and return ``(z, eps)``."""
    eps = np.random.default_rng(rng_seed).standard_normal(mean_.shape)
    return reparameterize(mean_, logvar, eps), eps


def gaussian_kl(mean_: Tensor, logvar: Tensor, per_example: bool = False) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over the last axis."""
    term = ad.sub(ad.add(ad.square(mean_), ad.exp(logvar)), ad.add(logvar, 1.0))
    kl = ad.mul(ad.sum(term, axis=-1), 0.5)
    return kl if per_example or kl.ndim == 0 else ad.sum(kl)


def gaussian_expected_log_likelihood(x: np.ndarray, mean_: Tensor, logvar: Tensor, noise_var: float = 1.0) -> Tensor:
    """Closed-form E_q[log N(x; z, noise_var)] for q = N(mean, exp(logvar)).

    Likelihood hook for the conjugate linear-Gaussian check of the bound.
    """
    x = Tensor(np.asarray(x, dtype=np.float64))
    sq = ad.add(ad.square(ad.sub(x, mean_)), ad.exp(logvar))
    per = ad.sub(ad.mul(sq, -0.5 / noise_var), 0.5 * (LOG_2PI + np.log(noise_var)))
    return ad.sum(per)


def elbo_from_terms(expected_loglik: Tensor, mean_: Tensor, logvar: Tensor) -> Tensor:
    return ad.sub(expected_loglik, gaussian_kl(mean_, logvar))


def importance_log_evidence(model: VaeModel, img: Tensor, n_samples: int, rng: np.random.Generator,
                            chunk: int = 1000) -> float:
    """log p(x) estimated by importance sampling with q(z|x) as proposal (single image)."""
    with ad.no_grad():
        mean_, logvar, _, polar = model.encode(img, detach_pose=True)
        mu, lv = mean_.data[0], logvar.data[0]
        std = np.exp(0.5 * lv)
        logw = []
        done = 0
        while done < n_samples:
            m = min(chunk, n_samples - done)
            eps = rng.standard_normal((m, mu.size))
            z = mu + std * eps
            logits = model.decoder_logits(Tensor(z))
            target = np.broadcast_to(polar.data, logits.shape)
            ll = ad.bernoulli_log_likelihood(logits, target, axis=(1, 2, 3)).data
            log_prior = -0.5 * (z**2 + LOG_2PI).sum(axis=1)
            log_q = -0.5 * (eps**2 + LOG_2PI + lv).sum(axis=1)
            logw.append(ll + log_prior - log_q)
            done += m
    logw = np.concatenate(logw)
    top = logw.max()
    return float(top + np.log(np.mean(np.exp(logw - top))))


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
# manifest {"config", "parameters": [{"name", "shape", "offset"}], "extra"},
# then the raw little-endian float64 arrays in manifest order.

MAGIC = b"ETVAECK1"


def save_checkpoint(params: ParameterStore, path, config: Optional[dict] = None, extra: Optional[dict] = None,
                    prefixes: Tuple[str, ...] = ("",)) -> None:
    names = [n for n in params.names() if any(n.startswith(p) for p in prefixes)]
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"config": config or {}, "parameters": entries, "extra": extra or {}},
                          sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(manifest)))
    buf.write(manifest)
    for b in blobs:
        buf.write(b)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + mlen].decode())
    base = 16 + mlen
    values = {}
    for e in manifest["parameters"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw[start : start + 8 * count], dtype="<f8")
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        values[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return manifest, values


def load_checkpoint(params: ParameterStore, path) -> dict:
    """Overwrite the stored parameters with the checkpoint's values; returns the manifest."""
    manifest, values = read_checkpoint(path)
    missing = [n for n in values if n not in params]
    if missing:
        raise CheckpointError(f"checkpoint has parameters unknown to the model: {missing}")
    try:
        params.load(values, strict=False)
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc
    return manifest
