"""Training regimes: fully supervised, alternating semi-supervised, two-step, frozen-encoder M1.

All regimes share one step budget for the classifier objective and select the
parameters with the best validation RMSE (evaluated every ``eval_every``
classifier steps).  The test split is scored once, with those parameters.

Random streams are derived from ``(seed, name)`` so that regimes consume them
identically: two-step training with zero pretraining steps reproduces the
fully supervised run bit for bit.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import ClassifierNet, multinomial_nll, predict_votes, rmse_votes
from .data import Dataset
from .errors import CheckpointError, ConfigError, DataError
from .optim import AdamState, adam_step
from .vae import ModelConfig, VaeModel, init_rng, load_checkpoint, save_checkpoint

REGIMES = ("supervised", "alternating", "two-step", "m1")
REGIME_NAMES = {
    "supervised": "FullySupervised",
    "alternating": "SemiSupervisedAlternating",
    "two-step": "SemiSupervisedTwoStep",
    "m1": "M1FrozenEncoder",
}


@dataclass
class TrainConfig:
    regime: str = "alternating"
    labelled_count: int = 100
    unlabelled_count: int = 2000
    steps: int = 600
    pretrain_steps: int = 600
    vae_steps_per_classifier_step: int = 1
    batch_size: int = 16
    vae_batch_size: int = 16
    lr: float = 1e-3
    vae_lr: float = 1e-3
    seed: int = 0
    eval_every: int = 25
    eval_batch_size: int = 64
    sample_latent: bool = False
    latent_dim: int = 16
    image_size: int = 64
    radial_bins: int = 32
    angular_bins: int = 64

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        for name in ("labelled_count", "batch_size", "vae_batch_size", "vae_steps_per_classifier_step",
                     "eval_every", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("steps", "pretrain_steps", "unlabelled_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, radial_bins=self.radial_bins,
                           angular_bins=self.angular_bins, latent_dim=self.latent_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def pretrain_key(self) -> dict:
        """Settings that determine the phase-1 VAE weights."""
        keys = ("seed", "unlabelled_count", "pretrain_steps", "vae_batch_size", "vae_lr", "latent_dim",
                "image_size", "radial_bins", "angular_bins")
        return {k: getattr(self, k) for k in keys}


@dataclass
class RunReport:
    regime: str
    labelled_count: int
    seed: int
    config: dict
    series: List[List[float]] = field(default_factory=list)  # [step, train_nll, val_rmse]
    vae_series: List[List[float]] = field(default_factory=list)  # [vae_step, mean negative ELBO]
    final_rmse: float = float("nan")
    best_step: int = 0
    best_val_rmse: float = float("nan")
    wall_seconds: Optional[float] = None

    def to_json(self, include_timing: bool = False) -> str:
        d = asdict(self)
        d["regime_name"] = REGIME_NAMES[self.regime]
        if not include_timing:
            d["wall_seconds"] = None
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        d.pop("regime_name", None)
        return cls(**d)


class BatchStream:
    """Shuffled mini-batches of indices, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _batch(images: np.ndarray, idx: np.ndarray) -> Tensor:
    return Tensor(images[idx][:, None])


def build_models(cfg: TrainConfig) -> Tuple[VaeModel, ClassifierNet]:
    model = VaeModel(cfg.model_config(), seed=cfg.seed)
    clf = ClassifierNet(model.params, init_rng(cfg.seed, "init/classifier"), cfg.latent_dim,
                        hidden=model.config.classifier_hidden)
    return model, clf


def predict(model: VaeModel, clf: ClassifierNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Answer probabilities from posterior-mean latents, in input order, without sampling."""
    if len(images) == 0:
        raise DataError("cannot evaluate an empty split")
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            mean_, _, _, _ = model.encode(Tensor(images[start : start + batch_size][:, None]))
            out.append(predict_votes(clf, mean_).data)
    return np.concatenate(out)


def evaluate(model: VaeModel, clf: ClassifierNet, images: np.ndarray, counts: np.ndarray,
             batch_size: int = 64) -> float:
    """Vote-fraction RMSE of the model on a labelled split."""
    return rmse_votes(predict(model, clf, images, batch_size), counts)


class Trainer:
    """Holds the data views, optimizers and bookkeeping for one run."""

    def __init__(self, model: VaeModel, clf: ClassifierNet, data: Dataset, cfg: TrainConfig):
        self.model = model
        self.clf = clf
        self.cfg = cfg
        if data.image_size != cfg.image_size:
            raise DataError(f"dataset images are {data.image_size}px, config expects {cfg.image_size}px")
        pool = data.labelled("train-labelled")
        if cfg.labelled_count > len(pool):
            raise ConfigError(f"labelled_count {cfg.labelled_count} exceeds the {len(pool)} labelled images")
        pick = init_rng(cfg.seed, "select/labelled").permutation(len(pool))[: cfg.labelled_count]
        self.lab_images = pool.images[pick]
        self.lab_counts = pool.counts[pick]
        unl = data.unlabelled()
        if cfg.unlabelled_count > len(unl):
            raise ConfigError(f"unlabelled_count {cfg.unlabelled_count} exceeds the {len(unl)} unlabelled images")
        pick = init_rng(cfg.seed, "select/unlabelled").permutation(len(unl))[: cfg.unlabelled_count]
        self.unl_images = unl.images[pick]
        val = data.labelled("validation")
        test = data.labelled("test")
        if len(val) == 0 or len(test) == 0:
            raise DataError("dataset needs non-empty validation and test splits")
        self.val_images, self.val_counts = val.images, val.counts
        self.test_images, self.test_counts = test.images, test.counts

        self.lab_stream = BatchStream(len(self.lab_images), cfg.batch_size, init_rng(cfg.seed, "batches/labelled"))
        self.unl_stream = (BatchStream(len(self.unl_images), cfg.vae_batch_size,
                                       init_rng(cfg.seed, "batches/unlabelled"))
                           if len(self.unl_images) else None)
        self.noise_rng = init_rng(cfg.seed, "noise/elbo")
        self.latent_rng = init_rng(cfg.seed, "noise/classifier")
        self.vae_opt = AdamState(lr=cfg.vae_lr)
        self.clf_opt = AdamState(lr=cfg.lr)
        self.vae_names = model.params.names("encoder.") + model.params.names("decoder.")
        self.clf_names = (model.params.names("pose.") + model.params.names("encoder.")
                          + model.params.names("classifier."))
        self.vae_series: List[List[float]] = []
        self.vae_steps_done = 0

    # -- single steps ----------------------------------------------------------------

    def vae_step(self) -> float:
        if self.unl_stream is None:
            raise DataError("the VAE objective needs unlabelled images")
        params = self.model.params
        params.zero_grad()
        x = _batch(self.unl_images, self.unl_stream.next())
        loss = ad.neg(self.model.elbo(x, self.noise_rng))
        ad.backward(loss)
        adam_step(params, self.vae_opt, self.vae_names)
        params.zero_grad()
        self.vae_steps_done += 1
        return loss.item()

    def classifier_loss(self, idx: np.ndarray, frozen_encoder: bool = False) -> Tensor:
        if frozen_encoder:
            with ad.no_grad():
                mean_, logvar, _, _ = self.model.encode(_batch(self.lab_images, idx))
        else:
            mean_, logvar, _, _ = self.model.encode(_batch(self.lab_images, idx))
        if self.cfg.sample_latent:
            eps = self.latent_rng.standard_normal(mean_.shape)
            mean_ = ad.add(mean_, ad.mul(ad.exp(ad.mul(logvar, 0.5)), Tensor(eps)))
        return multinomial_nll(self.clf.logits(mean_), self.lab_counts[idx])

    def classifier_step(self, names: Sequence[str]) -> float:
        params = self.model.params
        params.zero_grad()
        frozen = not any(n.startswith(("pose.", "encoder.")) for n in names)
        loss = self.classifier_loss(self.lab_stream.next(), frozen_encoder=frozen)
        ad.backward(loss)
        adam_step(params, self.clf_opt, names)
        params.zero_grad()
        return loss.item()

    # -- phases ----------------------------------------------------------------------

    def pretrain(self, steps: int) -> None:
        """VAE-only optimisation on unlabelled images."""
        window: List[float] = []
        for _ in range(steps):
            window.append(self.vae_step())
            if self.vae_steps_done % self.cfg.eval_every == 0:
                self.vae_series.append([self.vae_steps_done, float(np.mean(window))])
                window = []
        if window:
            self.vae_series.append([self.vae_steps_done, float(np.mean(window))])

    def run_classifier(self, names: Sequence[str], alternate: bool = False) -> RunReport:
        cfg = self.cfg
        params = self.model.params
        t0 = time.perf_counter()
        series: List[List[float]] = []
        best_rmse = self.validate()
        best_step = 0
        best = params.snapshot()
        series.append([0, float("nan"), best_rmse])
        nll_window: List[float] = []
        vae_window: List[float] = []
        for step in range(1, cfg.steps + 1):
            if alternate:
                for _ in range(cfg.vae_steps_per_classifier_step):
                    vae_window.append(self.vae_step())
            nll_window.append(self.classifier_step(names))
            if step % cfg.eval_every == 0 or step == cfg.steps:
                rmse = self.validate()
                series.append([step, float(np.mean(nll_window)), rmse])
                if vae_window:
                    self.vae_series.append([self.vae_steps_done, float(np.mean(vae_window))])
                nll_window, vae_window = [], []
                if rmse < best_rmse:
                    best_rmse, best_step, best = rmse, step, params.snapshot()
        params.load(best)
        final = evaluate(self.model, self.clf, self.test_images, self.test_counts, cfg.eval_batch_size)
        return RunReport(
            regime=cfg.regime,
            labelled_count=cfg.labelled_count,
            seed=cfg.seed,
            config=cfg.to_dict(),
            series=series,
            vae_series=list(self.vae_series),
            final_rmse=final,
            best_step=best_step,
            best_val_rmse=best_rmse,
            wall_seconds=time.perf_counter() - t0,
        )

    def validate(self) -> float:
        return evaluate(self.model, self.clf, self.val_images, self.val_counts, self.cfg.eval_batch_size)


def _finish(report: RunReport, t0: float) -> RunReport:
    report.wall_seconds = time.perf_counter() - t0
    return report


def train_fully_supervised(model: VaeModel, clf: ClassifierNet, data: Dataset, cfg: TrainConfig) -> RunReport:
    """Minimise the vote NLL through classifier, encoder and pose net; the decoder is not touched."""
    t0 = time.perf_counter()
    tr = Trainer(model, clf, data, cfg)
    return _finish(tr.run_classifier(tr.clf_names), t0)


def train_semisupervised_alternating(model: VaeModel, clf: ClassifierNet, data: Dataset,
                                     cfg: TrainConfig) -> RunReport:
    """Interleave negative-ELBO steps on unlabelled batches with NLL steps on labelled batches."""
    t0 = time.perf_counter()
    if cfg.unlabelled_count < 1:
        raise DataError("alternating training needs unlabelled images (unlabelled_count >= 1)")
    tr = Trainer(model, clf, data, cfg)
    return _finish(tr.run_classifier(tr.clf_names, alternate=True), t0)


def pretrain_vae(model: VaeModel, clf: ClassifierNet, data: Dataset, cfg: TrainConfig,
                 checkpoint: Optional[Path] = None) -> List[List[float]]:
    """Phase 1: VAE-only training.  Writes ``checkpoint`` when given; returns the loss series."""
    tr = Trainer(model, clf, data, cfg)
    if cfg.pretrain_steps and cfg.unlabelled_count < 1:
        raise DataError("pretraining needs unlabelled images (unlabelled_count >= 1)")
    tr.pretrain(cfg.pretrain_steps)
    if checkpoint is not None:
        save_checkpoint(model.params, checkpoint, config=cfg.pretrain_key(),
                        extra={"vae_series": tr.vae_series},
                        prefixes=("pose.", "encoder.", "decoder."))
    return tr.vae_series


def _load_pretrained(model: VaeModel, cfg: TrainConfig, checkpoint: Path, check_key: bool) -> List[List[float]]:
    manifest = load_checkpoint(model.params, checkpoint)
    if check_key and manifest.get("config") != cfg.pretrain_key():
        raise CheckpointError(f"{checkpoint} was produced with different pretraining settings")
    return manifest.get("extra", {}).get("vae_series", [])


def train_two_step(model: VaeModel, clf: ClassifierNet, data: Dataset, cfg: TrainConfig,
                   checkpoint: Optional[Path] = None) -> RunReport:
    """Pretrain the VAE, then fine-tune encoder, pose net and classifier on labels.

    If ``checkpoint`` exists and was produced with the same pretraining
    settings it is loaded instead of repeating phase 1 (the weights are
    identical either way); otherwise phase 1 runs and writes it.
    """
    t0 = time.perf_counter()
    checkpoint = Path(checkpoint) if checkpoint is not None else None
    if checkpoint is not None and checkpoint.is_file():
        try:
            vae_series = _load_pretrained(model, cfg, checkpoint, check_key=True)
        except CheckpointError:
            vae_series = pretrain_vae(model, clf, data, cfg, checkpoint)
    else:
        vae_series = pretrain_vae(model, clf, data, cfg, checkpoint)
    tr = Trainer(model, clf, data, cfg)
    tr.vae_series = list(vae_series)
    return _finish(tr.run_classifier(tr.clf_names), t0)


def train_m1_frozen(model: VaeModel, clf: ClassifierNet, data: Dataset, cfg: TrainConfig,
                    checkpoint: Optional[Path] = None) -> RunReport:
    """Classifier-only training on the latents of a pretrained, frozen VAE."""
    t0 = time.perf_counter()
    if checkpoint is None or not Path(checkpoint).is_file():
        raise CheckpointError(f"M1 training needs a pretrained VAE checkpoint (got {checkpoint})")
    vae_series = _load_pretrained(model, cfg, Path(checkpoint), check_key=False)
    tr = Trainer(model, clf, data, cfg)
    tr.vae_series = list(vae_series)
    return _finish(tr.run_classifier(model.params.names("classifier.")), t0)


def run_regime(cfg: TrainConfig, data: Dataset, checkpoint: Optional[Path] = None) -> RunReport:
    model, clf = build_models(cfg)
    if cfg.regime == "supervised":
        return train_fully_supervised(model, clf, data, cfg)
    if cfg.regime == "alternating":
        return train_semisupervised_alternating(model, clf, data, cfg)
    if cfg.regime == "two-step":
        return train_two_step(model, clf, data, cfg, checkpoint)
    return train_m1_frozen(model, clf, data, cfg, checkpoint)
