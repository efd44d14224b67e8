"""Synthetic galaxy corpus, simulated volunteer votes and dataset I/O.

On-disk layout of a dataset directory::

    manifest.json   sizes, seed, volunteers, per-image split tags
    images.bin      little-endian float32, row-major, one S x S image after another
    labels.csv      image_index,c_smooth,c_featured,c_artefact  (labelled rows only)
    truth.csv       generator ground truth (class, k) -- never read by the loader
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .geometry import pixel_grid

CLASSES = ("smooth", "featured", "artefact")
ARTEFACT_KINDS = ("stripe", "saturated", "dead_pixels")
SPLITS = ("train-labelled", "train-unlabelled", "validation", "test")
DEFAULT_FRACTIONS = {"train-labelled": 0.3, "train-unlabelled": 0.5, "validation": 0.05, "test": 0.15}
DEFAULT_VOLUNTEERS = 40
DEFAULT_AMBIGUITY = 0.2


@dataclass(frozen=True)
class GalaxySpec:
    """Parameters of one synthetic galaxy.

    Arm fields only matter for ``featured``; ``artefact_kind`` only for
    ``artefact``.  The off-centre clump breaks the 180-degree symmetry of
    ellipses and two-armed spirals so every galaxy has a definite orientation;
    set ``clump_flux=0`` for a rotationally symmetric render.
    """

    morph_class: str
    ellipticity: float = 0.0
    half_light_radius: float = 5.0
    orientation: float = 0.0
    arm_count: int = 2
    arm_winding: float = 0.4
    arm_strength: float = 0.8
    brightness: float = 0.9
    clump_flux: float = 0.0
    clump_distance: float = 6.0
    clump_angle: float = 0.0
    artefact_kind: str = "stripe"
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.morph_class not in CLASSES:
            raise ConfigError(f"unknown morph_class {self.morph_class!r}")
        if not 0.0 <= self.ellipticity <= 0.7:
            raise ConfigError(f"ellipticity {self.ellipticity} outside [0, 0.7]")
        if self.morph_class == "featured" and self.arm_count not in (2, 3, 4):
            raise ConfigError(f"arm_count must be 2, 3 or 4, got {self.arm_count}")
        if self.artefact_kind not in ARTEFACT_KINDS:
            raise ConfigError(f"unknown artefact_kind {self.artefact_kind!r}")


def sample_spec(morph_class: str, rng: np.random.Generator, noise_sigma: float = 0.05) -> GalaxySpec:
    """Draw a random spec of the given class."""
    hlr = rng.uniform(4.0, 8.0)
    brightness = rng.uniform(0.5, 1.0)
    return GalaxySpec(
        morph_class=morph_class,
        ellipticity=rng.uniform(0.0, 0.6),
        half_light_radius=hlr,
        orientation=rng.uniform(0.0, 2 * math.pi),
        arm_count=int(rng.integers(2, 5)),
        arm_winding=rng.uniform(0.5, 1.0),
        arm_strength=rng.uniform(0.6, 1.0),
        brightness=brightness,
        clump_flux=rng.uniform(0.25, 0.5),
        clump_distance=hlr * rng.uniform(0.8, 1.6),
        clump_angle=rng.uniform(0.0, 2 * math.pi),
        artefact_kind=ARTEFACT_KINDS[int(rng.integers(0, 3))],
        noise_sigma=noise_sigma,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _clump(xr, yr, spec: GalaxySpec, width: float = 2.0) -> np.ndarray:
    cx = spec.clump_distance * math.cos(spec.clump_angle)
    cy = spec.clump_distance * math.sin(spec.clump_angle)
    return np.exp(-((xr - cx) ** 2 + (yr - cy) ** 2) / (2 * width**2))


def render_galaxy(spec: GalaxySpec, S: int = 64) -> np.ndarray:
    """Render ``spec`` as an ``S x S`` float64 image with values in [0, 1].

    The profile is evaluated in the galaxy's own frame, so rendering with
    orientation ``psi`` matches rotating the ``psi = 0`` render by ``psi``.
    """
    if S < 32:
        raise ConfigError(f"image size must be at least 32, got {S}")
    rng = np.random.default_rng(spec.seed)
    x, y = pixel_grid(S)
    c, s = math.cos(spec.orientation), math.sin(spec.orientation)
    xr = x * c + y * s
    yr = -x * s + y * c
    q = 1.0 - spec.ellipticity
    scale = spec.half_light_radius / 1.678
    rad = np.hypot(xr, yr / q)
    # cored radius keeps the profile smooth at the pixel scale
    soft = np.sqrt(rad**2 + 1.5**2)

    if spec.morph_class == "smooth":
        img = np.exp(-soft / scale)
        img = img + spec.clump_flux * _clump(xr, yr, spec)
    elif spec.morph_class == "featured":
        bulge = 0.6 * np.exp(-soft / (0.5 * scale))
        theta = np.arctan2(yr / q, xr)
        phase = spec.arm_count * (theta - np.log(np.maximum(rad, 1.0)) / spec.arm_winding)
        arms = (1.0 + np.cos(phase)) / 2.0
        # arms fade into the bulge where the spiral would wind tighter than a pixel
        taper = 1.0 - np.exp(-((rad / (1.5 * scale)) ** 2))
        disk = np.exp(-soft / (1.6 * scale))
        img = bulge + disk * (1.0 - spec.arm_strength * taper + spec.arm_strength * taper * arms)
        img = img + spec.clump_flux * _clump(xr, yr, spec)
    else:
        img = _render_artefact(spec, xr, yr, rad, scale, rng)
    img = spec.brightness * img / max(img.max(), 1e-12)
    if spec.morph_class == "artefact" and spec.artefact_kind == "saturated":
        img = np.minimum(img * 1.6, 1.0)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_artefact(spec, xr, yr, rad, scale, rng) -> np.ndarray:
    if spec.artefact_kind == "stripe":
        # satellite trail: a straight band that misses the centre
        offset = 0.8 * spec.clump_distance
        width = 1.5 + 0.15 * spec.half_light_radius
        band = np.exp(-((xr - offset) ** 2) / (2 * width**2))
        return band + 0.4 * np.exp(-(rad / (0.5 * scale)) ** 2)
    if spec.artefact_kind == "saturated":
        # over-exposed star: flat top with a soft edge, plus a diffraction cross
        cx = 0.3 * spec.clump_distance * math.cos(spec.clump_angle)
        cy = 0.3 * spec.clump_distance * math.sin(spec.clump_angle)
        d = np.hypot(xr - cx, yr - cy)
        core = 1.0 / (1.0 + np.exp((d - 0.9 * scale) / 1.0))
        spikes = np.exp(-((xr - cx) ** 2) / 4.0 - np.abs(yr - cy) / (3 * scale)) + np.exp(
            -((yr - cy) ** 2) / 4.0 - np.abs(xr - cx) / (3 * scale)
        )
        return core + 0.5 * spikes
    # burst of hot pixels (bled into neighbours) on a faint compact source
    base = 0.3 * np.exp(-rad / (0.5 * scale))
    S = xr.shape[0]
    n_hot = int(rng.integers(15, 35))
    centre = rng.uniform(-S / 6, S / 6, size=2)
    spots = centre + rng.normal(0, S / 10, size=(n_hot, 2))
    amps = rng.uniform(0.6, 1.0, size=n_hot)
    hot = np.zeros_like(base)
    # spots are placed in the galaxy frame so the render rotates with orientation
    for (sx, sy), amp in zip(spots, amps):
        hot += amp * np.exp(-((xr - sx) ** 2 + (yr - sy) ** 2) / (2 * 1.5**2))
    return base + hot


def true_vote_probs(spec: GalaxySpec, ambiguity: float = DEFAULT_AMBIGUITY) -> np.ndarray:
    """Ground-truth answer probabilities ``k`` for a spec.

    The true class gets ``1 - ambiguity``; the remainder is split between the
    other two answers as ``(w, 1 - w)`` with ``w ~ Beta(2, 2)`` drawn from the
    spec seed.  ``ambiguity=0`` gives a one-hot vector.
    """
    k = np.zeros(3)
    idx = CLASSES.index(spec.morph_class)
    k[idx] = 1.0 - ambiguity
    w = np.random.default_rng([spec.seed, 1]).beta(2.0, 2.0)
    others = [i for i in range(3) if i != idx]
    k[others[0]] = ambiguity * w
    k[others[1]] = ambiguity * (1.0 - w)
    return k


def simulate_votes(k: Sequence[float], n_volunteers: int = DEFAULT_VOLUNTEERS, seed=0) -> np.ndarray:
    """One multinomial draw of ``n_volunteers`` answers."""
    if n_volunteers < 1:
        raise ConfigError("n_volunteers must be at least 1")
    k = np.asarray(k, dtype=np.float64)
    return np.random.default_rng(seed).multinomial(n_volunteers, k / k.sum()).astype(np.int64)


# ---------------------------------------------------------------------------
# datasets


class LabelledSplit:
    """Images with their vote counts."""

    def __init__(self, images: np.ndarray, counts: np.ndarray):
        self.images = images
        self.counts = counts

    def __len__(self) -> int:
        return len(self.images)


class UnlabelledSplit:
    """Images only; there is deliberately no ``counts`` attribute."""

    def __init__(self, images: np.ndarray):
        self.images = images

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Dataset:
    images: np.ndarray  # (n, S, S) float64
    labels: List[Optional[np.ndarray]]
    splits: List[str]
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise DataError("images, labels and splits must have equal length")
        for i, (tag, lab) in enumerate(zip(self.splits, self.labels)):
            if tag not in SPLITS:
                raise DataError(f"image {i}: unknown split {tag!r}")
            if tag == "train-unlabelled" and lab is not None:
                raise DataError(f"image {i}: train-unlabelled entries carry no counts")
            if tag != "train-unlabelled" and lab is None:
                raise DataError(f"image {i}: split {tag!r} requires vote counts")

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.splits) if t == split], dtype=np.int64)

    def labelled(self, split: str) -> LabelledSplit:
        if split == "train-unlabelled":
            raise DataError("train-unlabelled has no labels")
        idx = self.indices(split)
        counts = np.array([self.labels[i] for i in idx], dtype=np.int64).reshape(-1, 3)
        return LabelledSplit(self.images[idx], counts)

    def unlabelled(self) -> UnlabelledSplit:
        return UnlabelledSplit(self.images[self.indices("train-unlabelled")])

    def split_sizes(self) -> Dict[str, int]:
        return {s: int(len(self.indices(s))) for s in SPLITS}


def _split_counts(n_per_class: int, fractions: Mapping[str, float]) -> Dict[str, int]:
    raw = {s: fractions.get(s, 0.0) * n_per_class for s in SPLITS}
    counts = {s: int(math.floor(v)) for s, v in raw.items()}
    leftover = n_per_class - sum(counts.values())
    order = sorted(SPLITS, key=lambda s: (-(raw[s] - counts[s]), SPLITS.index(s)))
    for s in order[:leftover]:
        counts[s] += 1
    return counts


def check_fractions(fractions: Mapping[str, float]) -> None:
    unknown = set(fractions) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown splits {sorted(unknown)}")
    if any(v < 0 for v in fractions.values()) or abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {dict(fractions)}")


def build_dataset(
    n_per_class: int,
    S: int = 64,
    n_volunteers: int = DEFAULT_VOLUNTEERS,
    seed: int = 0,
    split_fractions: Optional[Mapping[str, float]] = None,
    noise_sigma: float = 0.05,
    ambiguity: float = DEFAULT_AMBIGUITY,
    split_sizes: Optional[Mapping[str, int]] = None,
) -> Dataset:
    """Render a class-balanced, stratified synthetic corpus.

    ``split_sizes`` (per class) overrides ``split_fractions`` when given.
    Images are stored at float32 precision so that a dataset loaded from disk
    equals the one built in memory.
    """
    if split_sizes is not None:
        per_class = {s: int(split_sizes.get(s, 0)) for s in SPLITS}
        n_per_class = sum(per_class.values())
        fractions = {s: per_class[s] / n_per_class for s in SPLITS}
    else:
        fractions = dict(DEFAULT_FRACTIONS if split_fractions is None else split_fractions)
        check_fractions(fractions)
        per_class = _split_counts(n_per_class, fractions)
    if n_per_class < 1:
        raise ConfigError("n_per_class must be positive")

    rng = np.random.default_rng(seed)
    entries = []
    for cls in CLASSES:
        tags = [s for s in SPLITS for _ in range(per_class[s])]
        for tag in tags:
            spec = sample_spec(cls, rng, noise_sigma=noise_sigma)
            entries.append((spec, tag))
    order = rng.permutation(len(entries))
    entries = [entries[i] for i in order]

    images = np.empty((len(entries), S, S))
    labels: List[Optional[np.ndarray]] = []
    splits: List[str] = []
    truth = []
    for i, (spec, tag) in enumerate(entries):
        images[i] = render_galaxy(spec, S).astype(np.float32)
        k = true_vote_probs(spec, ambiguity)
        counts = simulate_votes(k, n_volunteers, seed=[spec.seed, 2])
        labels.append(None if tag == "train-unlabelled" else counts)
        splits.append(tag)
        truth.append({"morph_class": spec.morph_class, "k": k.tolist(), "counts": counts.tolist()})
    meta = {
        "seed": seed,
        "n_per_class": n_per_class,
        "n_volunteers": n_volunteers,
        "noise_sigma": noise_sigma,
        "ambiguity": ambiguity,
        "split_fractions": fractions,
        "source": "synthetic",
    }
    ds = Dataset(images, labels, splits, meta)
    ds.meta["_truth"] = truth
    return ds


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {k: v for k, v in ds.meta.items() if not k.startswith("_")}
    manifest = {
        "format": "etvae-dataset/1",
        "image_size": ds.image_size,
        "n_images": len(ds.splits),
        "dtype": "<f4",
        "splits": ds.splits,
        "split_sizes": ds.split_sizes(),
        **meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "images.bin").write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_index", "c_smooth", "c_featured", "c_artefact"])
        for i, lab in enumerate(ds.labels):
            if lab is not None:
                w.writerow([i, *(int(c) for c in lab)])
    truth = ds.meta.get("_truth")
    if truth is not None:
        with open(out / "truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_index", "morph_class", "k_smooth", "k_featured", "k_artefact",
                        "c_smooth", "c_featured", "c_artefact"])
            for i, t in enumerate(truth):
                w.writerow([i, t["morph_class"], *(repr(v) for v in t["k"]), *t["counts"]])
    return out


def load_dataset(path) -> Dataset:
    """Read a dataset directory; ``truth.csv`` is ignored."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no dataset at {root} (manifest.json missing)")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc})") from exc
    S = int(manifest["image_size"])
    n = int(manifest["n_images"])
    raw = np.frombuffer((root / "images.bin").read_bytes(), dtype="<f4")
    if raw.size != n * S * S:
        raise DataError(f"images.bin holds {raw.size} values, expected {n * S * S}")
    images = raw.reshape(n, S, S).astype(np.float64)
    labels: List[Optional[np.ndarray]] = [None] * n
    with open(root / "labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_index", "c_smooth", "c_featured", "c_artefact"]:
            raise DataError(f"labels.csv: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                idx, *counts = (int(v) for v in row)
            except ValueError as exc:
                raise DataError(f"labels.csv line {lineno}: {exc}") from exc
            if len(counts) != 3 or not 0 <= idx < n:
                raise DataError(f"labels.csv line {lineno}: malformed row {row}")
            labels[idx] = np.array(counts, dtype=np.int64)
    meta = {k: v for k, v in manifest.items() if k not in ("splits", "split_sizes", "format", "dtype")}
    return Dataset(images, labels, list(manifest["splits"]), meta)


# ---------------------------------------------------------------------------
# external images


EXTERNAL_COLUMNS = ["image_id", "count_smooth", "count_featured", "count_artefact"]
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif")


def _load_external_image(path: Path, S: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    h, w = arr.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top : top + side, left : left + side]
    if side != S:
        arr = np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((S, S), Image.BILINEAR))
    return np.clip(arr / 255.0, 0.0, 1.0)


def ingest_external(
    image_dir,
    votes_csv,
    S: int = 64,
    seed: int = 0,
    split_fractions: Optional[Mapping[str, float]] = None,
) -> Dataset:
    """Build a dataset from a folder of images plus a vote-count CSV.

    Rows may carry an optional ``split`` column; otherwise labelled images are
    assigned to train-labelled / validation / test by a seeded permutation in
    proportion to ``split_fractions``.  Images without a row form the
    unlabelled pool.
    """
    image_dir = Path(image_dir)
    files = {p.stem: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in _IMAGE_SUFFIXES}
    rows: Dict[str, np.ndarray] = {}
    row_split: Dict[str, str] = {}
    with open(votes_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != EXTERNAL_COLUMNS:
            raise DataError(f"{votes_csv}: header must start with {','.join(EXTERNAL_COLUMNS)}")
        has_split = len(header) > 4 and header[4] == "split"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) < 4:
                    raise ValueError("too few columns")
                counts = np.array([int(v) for v in row[1:4]], dtype=np.int64)
                if np.any(counts < 0) or counts.sum() < 1:
                    raise ValueError("counts must be non-negative with a positive total")
            except ValueError as exc:
                raise DataError(f"{votes_csv} line {lineno}: malformed row ({exc})") from exc
            rows[row[0]] = counts
            if has_split and len(row) > 4 and row[4]:
                row_split[row[0]] = row[4]
    missing = sorted(set(rows) - set(files))
    if missing:
        raise DataError(f"images referenced by {votes_csv} not found: {', '.join(missing)}")

    ids = sorted(files)
    fractions = dict(split_fractions or {"train-labelled": 0.7, "validation": 0.1, "test": 0.2})
    labelled_ids = [i for i in ids if i in rows and i not in row_split]
    perm = np.random.default_rng(seed).permutation(len(labelled_ids))
    cuts = np.cumsum([fractions.get(s, 0.0) for s in ("train-labelled", "validation", "test")])
    assigned = {}
    for rank, j in enumerate(perm):
        pos = (rank + 0.5) / max(len(labelled_ids), 1)
        tag = ("train-labelled", "validation", "test")[int(np.searchsorted(cuts, pos * cuts[-1]))]
        assigned[labelled_ids[j]] = tag

    images = np.empty((len(ids), S, S))
    labels: List[Optional[np.ndarray]] = []
    splits: List[str] = []
    for n, image_id in enumerate(ids):
        images[n] = _load_external_image(files[image_id], S)
        if image_id in rows:
            labels.append(rows[image_id])
            splits.append(row_split.get(image_id, assigned.get(image_id)))
        else:
            labels.append(None)
            splits.append("train-unlabelled")
    meta = {"source": str(image_dir), "seed": seed, "image_ids": ids}
    return Dataset(images, labels, splits, meta)


def export_external(ds: Dataset, image_dir, votes_csv) -> None:
    """Write 8-bit PNGs and a vote CSV (with a ``split`` column) readable by :func:`ingest_external`."""
    from PIL import Image

    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(ds.splits))))
    with open(votes_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXTERNAL_COLUMNS + ["split"])
        for i, (img, lab, tag) in enumerate(zip(ds.images, ds.labels, ds.splits)):
            name = f"{i:0{width}d}"
            Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L").save(image_dir / f"{name}.png")
            if lab is not None:
                w.writerow([name, *(int(c) for c in lab), tag])


def spec_to_dict(spec: GalaxySpec) -> dict:
    return asdict(spec)
