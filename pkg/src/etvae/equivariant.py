"""Rotation-equivariant pose prediction and canonicalization.

The pose network sees the polar image, where rotating the input is a circular
shift of the angular axis.  Two circular convolutions commute with that shift,
and phase-weighted pooling

    (u, v) = sum_j w_j * (cos 2*pi*j/A, sin 2*pi*j/A)

turns a shift by ``k`` columns into a rotation of ``(u, v)`` by ``2*pi*k/A``.
The predicted angle ``atan2(v, u)`` is therefore equivariant for any weights.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import TWO_PI, from_polar, to_polar
from .optim import ParameterStore, he_normal


class PosePredictor:
    """Two circular-width conv layers followed by phase-weighted pooling.

    Parameters live in ``params`` under ``<prefix>.conv{1,2}.{weight,bias}``.
    """

    def __init__(
        self,
        params: ParameterStore,
        rng: np.random.Generator,
        radial_bins: int,
        angular_bins: int,
        r_max: float,
        channels: Sequence[int] = (8, 16),
        prefix: str = "pose",
    ):
        self.params = params
        self.prefix = prefix
        self.radial_bins = radial_bins
        self.angular_bins = angular_bins
        self.r_max = r_max
        c_in = 1
        for i, c_out in enumerate(channels, start=1):
            params.add(f"{prefix}.conv{i}.weight", he_normal(rng, (c_out, c_in, 3, 3), c_in * 9))
            params.add(f"{prefix}.conv{i}.bias", np.zeros(c_out))
            c_in = c_out
        self.n_layers = len(channels)
        phases = TWO_PI * np.arange(angular_bins) / angular_bins
        self._phase = np.stack([np.cos(phases), np.sin(phases)], axis=1)

    def column_weights(self, polar: Tensor) -> Tensor:
        """Per-column pooled response ``w_j`` of shape (N, A)."""
        h = polar if polar.ndim == 4 else ad.reshape(polar, (1,) + polar.shape)
        for i in range(1, self.n_layers + 1):
            h = ad.conv2d(
                h,
                self.params[f"{self.prefix}.conv{i}.weight"],
                self.params[f"{self.prefix}.conv{i}.bias"],
                stride=1,
                padding=1,
                padding_mode="circular_width",
            )
            if i < self.n_layers:
                h = ad.relu(h)
        return ad.mean(h, axis=(1, 2))

    def phase_vector(self, polar: Tensor) -> Tuple[Tensor, Tensor]:
        uv = ad.matmul(self.column_weights(polar), Tensor(self._phase))
        return uv[:, 0], uv[:, 1]

    def predict_pose(self, img: Tensor) -> Tensor:
        """Rotation angle in [0, 2*pi): shape (N,) for a batch, (1,) for one image."""
        polar = to_polar(img, self.radial_bins, self.angular_bins, self.r_max)
        u, v = self.phase_vector(polar)
        return ad.atan2(v, u)


def predict_pose(net: PosePredictor, img: Tensor) -> Tensor:
    return net.predict_pose(img)


def canonicalize(net: PosePredictor, img: Tensor, detach_pose: bool = False) -> Tuple[Tensor, Tensor]:
    """Polar image read relative to the predicted pose, plus the pose itself.

    Equivalent to ``to_polar(rotate_image(img, -angle))``.  With
    ``detach_pose`` the angle is treated as a constant when resampling.
    """
    angle = net.predict_pose(img)
    used = angle.detach() if detach_pose else angle
    if img.ndim == 3:
        used = ad.reshape(used, ())
    polar = to_polar(img, net.radial_bins, net.angular_bins, net.r_max, angle=used)
    return polar, angle


def decanonicalize(p: Tensor, angle: Tensor, S: int, r_max: float) -> Tensor:
    """Inverse of :func:`canonicalize`: ``rotate_image(from_polar(p), +angle)``."""
    if p.ndim == 3 and isinstance(angle, Tensor) and angle.size == 1:
        angle = ad.reshape(angle, ())
    return from_polar(p, S, r_max, angle=angle)
