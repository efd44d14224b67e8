"""Differentiable image resampling and polar canonical coordinates.

Images are tensors of shape ``(C, S, S)`` or batched ``(N, C, S, S)``; polar
images are ``(C, R, A)`` / ``(N, C, R, A)``.  Continuous coordinates put the
origin at the image centre: pixel ``(row i, col j)`` sits at
``x = j - (S-1)/2``, ``y = i - (S-1)/2``.  Polar bin ``(i, j)`` covers radius
``(i + 0.5) * r_max / R`` and angle ``2*pi*j / A``, so rotating the image by
``2*pi*k / A`` shifts the polar image by ``k`` columns.

Out-of-frame Cartesian samples read as 0 (galaxies sit on a dark sky).
"""
from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

TWO_PI = 2.0 * np.pi
Angle = Union[float, Tensor]


def _axis_corners(coord: np.ndarray, n: int, mode: str):
    """Lower/upper indices, fractional offset, validity masks and d(coord) mask."""
    if mode == "clamp":
        clipped = np.clip(coord, 0.0, n - 1.0)
        inside = (coord >= 0.0) & (coord <= n - 1.0)
        lo = np.minimum(np.floor(clipped), max(n - 2, 0)).astype(np.int64)
        frac = clipped - lo
        hi = np.minimum(lo + 1, n - 1)
        ok_lo = np.ones(coord.shape, dtype=bool)
        return lo, hi, frac, ok_lo, ok_lo, inside.astype(np.float64)
    if mode == "wrap":
        wrapped = np.mod(coord, n)
        lo = np.floor(wrapped).astype(np.int64)
        frac = wrapped - lo
        lo = lo % n
        hi = (lo + 1) % n
        ok = np.ones(coord.shape, dtype=bool)
        return lo, hi, frac, ok, ok, np.ones(coord.shape)
    lo = np.floor(coord).astype(np.int64)
    frac = coord - lo
    hi = lo + 1
    ok_lo = (lo >= 0) & (lo < n)
    ok_hi = (hi >= 0) & (hi < n)
    return np.clip(lo, 0, n - 1), np.clip(hi, 0, n - 1), frac, ok_lo, ok_hi, np.ones(coord.shape)


def grid_sample(
    img: Tensor,
    rows: Tensor,
    cols: Tensor,
    row_mode: str = "zero",
    col_mode: str = "zero",
) -> Tensor:
    """Bilinear lookup of ``img`` at fractional (row, col) index coordinates.

    For a single image ``(C, H, W)`` the coordinates may have any shape ``P``
    and the result is ``(C, *P)``.  For a batch ``(N, C, H, W)`` the
    coordinates are ``(N, *P)`` and the result ``(N, C, *P)``.  Each axis is
    handled as ``"zero"`` (outside reads 0), ``"clamp"`` (edge replicated,
    zero coordinate gradient outside) or ``"wrap"`` (periodic).
    """
    rows, cols = ad.as_tensor(rows), ad.as_tensor(cols)
    if rows.shape != cols.shape:
        raise ShapeError(f"coordinate shapes differ: {rows.shape} vs {cols.shape}")
    single = img.ndim == 3
    x = img.data[None] if single else img.data
    r = rows.data[None] if single else rows.data
    c = cols.data[None] if single else cols.data
    if x.ndim != 4 or r.shape[0] != x.shape[0]:
        raise ShapeError(f"grid_sample: image {img.shape} vs coordinates {rows.shape}")
    n, ch, h, w = x.shape
    pshape = r.shape[1:]
    r = r.reshape(n, -1)
    c = c.reshape(n, -1)

    r0, r1, fr, okr0, okr1, dr_mask = _axis_corners(r, h, row_mode)
    c0, c1, fc, okc0, okc1, dc_mask = _axis_corners(c, w, col_mode)
    flat = x.reshape(n, ch, h * w)
    bidx = np.arange(n)[:, None, None]
    cidx = np.arange(ch)[None, :, None]

    def gather(ri, ci, ok):
        v = flat[bidx, cidx, (ri * w + ci)[:, None, :]]
        return v * ok[:, None, :]

    v00 = gather(r0, c0, okr0 & okc0)
    v01 = gather(r0, c1, okr0 & okc1)
    v10 = gather(r1, c0, okr1 & okc0)
    v11 = gather(r1, c1, okr1 & okc1)
    fr_ = fr[:, None, :]
    fc_ = fc[:, None, :]
    w00 = (1 - fr_) * (1 - fc_)
    w01 = (1 - fr_) * fc_
    w10 = fr_ * (1 - fc_)
    w11 = fr_ * fc_
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g, needs):
        g = (g[None] if single else g).reshape(n, ch, -1)
        gi = grow = gcol = None
        if needs[0]:
            gi = np.zeros((n, ch, h * w))
            base = (np.arange(n) * (h * w))[:, None]
            for ri, ci, ok, wk in (
                (r0, c0, okr0 & okc0, w00),
                (r0, c1, okr0 & okc1, w01),
                (r1, c0, okr1 & okc0, w10),
                (r1, c1, okr1 & okc1, w11),
            ):
                idx = (base + ri * w + ci).reshape(-1)
                for k in range(ch):
                    contrib = (g[:, k] * wk[:, 0] * ok).reshape(-1)
                    gi[:, k] += np.bincount(idx, contrib, minlength=n * h * w).reshape(n, h * w)
            gi = gi.reshape(x.shape)
            if single:
                gi = gi[0]
        if needs[1]:
            d = (1 - fc_) * (v10 - v00) + fc_ * (v11 - v01)
            grow = (g * d).sum(axis=1) * dr_mask
            grow = grow.reshape((n,) + pshape)
            if single:
                grow = grow[0]
        if needs[2]:
            d = (1 - fr_) * (v01 - v00) + fr_ * (v11 - v10)
            gcol = (g * d).sum(axis=1) * dc_mask
            gcol = gcol.reshape((n,) + pshape)
            if single:
                gcol = gcol[0]
        return gi, grow, gcol

    out = out.reshape((n, ch) + pshape)
    return ad._make(out[0] if single else out, (img, rows, cols), bw, "grid_sample")


def bilinear_sample(img: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample ``img`` at centred continuous coordinates; outside the frame reads 0."""
    xs, ys = ad.as_tensor(xs), ad.as_tensor(ys)
    if xs.shape != ys.shape:
        raise ShapeError(f"xs shape {xs.shape} != ys shape {ys.shape}")
    half = (img.shape[-1] - 1) / 2.0
    return grid_sample(img, ad.add(ys, half), ad.add(xs, half))


def pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Centred (x, y) coordinates of every pixel, each of shape (size, size)."""
    offs = np.arange(size) - (size - 1) / 2.0
    y, x = np.meshgrid(offs, offs, indexing="ij")
    return x, y


def polar_grid(R: int, A: int, r_max: float) -> Tuple[np.ndarray, np.ndarray]:
    """Bin-centre radii and angles, each of shape (R, A)."""
    radii = (np.arange(R) + 0.5) * r_max / R
    angles = TWO_PI * np.arange(A) / A
    return np.meshgrid(radii, angles, indexing="ij")


def _batch_angle(angle: Tensor, n: Optional[int], shape: Tuple[int, ...]) -> Tensor:
    """Broadcast a per-image angle vector (or scalar) to ``(n, *shape)``."""
    if n is None:
        return ad.broadcast_to(ad.reshape(angle, (1,) * len(shape)), shape)
    return ad.broadcast_to(ad.reshape(angle, (n,) + (1,) * len(shape)), (n,) + shape)


def _expand(arr: np.ndarray, n: Optional[int]) -> np.ndarray:
    return arr if n is None else np.broadcast_to(arr, (n,) + arr.shape)


def _batch_size(img: Tensor) -> Optional[int]:
    return img.shape[0] if img.ndim == 4 else None


def rotate_image(img: Tensor, angle: Angle) -> Tensor:
    """Rotate about the image centre by ``angle`` radians.

    ``angle`` may be a float or a tensor (scalar, or one angle per batch
    entry); tensor angles are differentiated through the sample coordinates.
    """
    size = img.shape[-1]
    n = _batch_size(img)
    x, y = pixel_grid(size)
    if not isinstance(angle, Tensor):
        ca, sa = np.cos(angle), np.sin(angle)
        xs = _expand(x * ca + y * sa, n)
        ys = _expand(-x * sa + y * ca, n)
        return bilinear_sample(img, Tensor(xs), Tensor(ys))
    a = _batch_angle(angle, n, (size, size))
    ca, sa = ad.cos(a), ad.sin(a)
    xe, ye = Tensor(_expand(x, n)), Tensor(_expand(y, n))
    xs = ad.add(ad.mul(ca, xe), ad.mul(sa, ye))
    ys = ad.sub(ad.mul(ca, ye), ad.mul(sa, xe))
    return bilinear_sample(img, xs, ys)


def _check_r_max(size: int, r_max: float) -> None:
    if r_max > size / 2.0:
        raise ShapeError(f"r_max={r_max} exceeds half the image size ({size / 2.0})")
    if r_max <= 0:
        raise ShapeError("r_max must be positive")


def to_polar(img: Tensor, R: int, A: int, r_max: float, angle: Optional[Angle] = None) -> Tensor:
    """Resample onto the polar grid.

    With ``angle`` the grid is read at ``phi + angle``, which equals
    ``to_polar(rotate_image(img, -angle))`` in continuous coordinates but
    costs a single interpolation.
    """
    size = img.shape[-1]
    _check_r_max(size, r_max)
    n = _batch_size(img)
    radii, phis = polar_grid(R, A, r_max)
    if angle is None or not isinstance(angle, Tensor):
        off = 0.0 if angle is None else float(angle)
        xs = _expand(radii * np.cos(phis + off), n)
        ys = _expand(radii * np.sin(phis + off), n)
        return bilinear_sample(img, Tensor(xs), Tensor(ys))
    phi = ad.add(_batch_angle(angle, n, (R, A)), Tensor(_expand(phis, n)))
    rr = Tensor(_expand(radii, n))
    return bilinear_sample(img, ad.mul(rr, ad.cos(phi)), ad.mul(rr, ad.sin(phi)))


def from_polar(p: Tensor, S: int, r_max: float, angle: Optional[Angle] = None) -> Tensor:
    """Render a polar image back onto an ``S x S`` Cartesian grid.

    Pixels beyond ``r_max`` are 0.  Radii inside the first or beyond the last
    bin centre replicate the edge row; the angular axis is periodic.  With
    ``angle`` the result is additionally rotated by ``+angle`` (again a single
    interpolation).
    """
    _check_r_max(S, r_max)
    R, A = p.shape[-2], p.shape[-1]
    n = _batch_size(p)
    x, y = pixel_grid(S)
    r = np.hypot(x, y)
    phi = np.mod(np.arctan2(y, x), TWO_PI)
    rows = Tensor(_expand(r * R / r_max - 0.5, n))
    col_base = phi * A / TWO_PI
    if angle is None:
        cols = Tensor(_expand(col_base, n))
    elif not isinstance(angle, Tensor):
        cols = Tensor(_expand(col_base - float(angle) * A / TWO_PI, n))
    else:
        shift = ad.mul(_batch_angle(angle, n, (S, S)), -A / TWO_PI)
        cols = ad.add(shift, Tensor(_expand(col_base, n)))
    out = grid_sample(p, rows, cols, row_mode="clamp", col_mode="wrap")
    mask = (r <= r_max).astype(np.float64)
    return ad.mul(out, Tensor(np.broadcast_to(mask, out.shape)))


def shift_columns(polar: np.ndarray, k: int) -> np.ndarray:
    """Circularly shift the angular axis by ``k`` bins (rotation by 2*pi*k/A)."""
    return np.roll(polar, k, axis=-1)


def disc_mask(size: int, radius: float) -> np.ndarray:
    x, y = pixel_grid(size)
    return np.hypot(x, y) <= radius


def relative_l2(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """``||a - b|| / ||b||`` optionally restricted to ``mask``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        mask = np.broadcast_to(mask, a.shape)
        a, b = a[mask], b[mask]
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else float(np.linalg.norm(a - b))
