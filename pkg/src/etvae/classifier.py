"""Vote-fraction head: latent mean -> answer probabilities k, multinomial NLL, RMSE."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .optim import ParameterStore, he_normal

N_ANSWERS = 3


class ClassifierNet:
    """dense(d -> hidden) + relu + dense(hidden -> 3); softmax gives k."""

    def __init__(self, params: ParameterStore, rng: np.random.Generator, latent_dim: int, hidden: int = 32,
                 prefix: str = "classifier"):
        self.params = params
        self.prefix = prefix
        self.latent_dim = latent_dim
        params.add(f"{prefix}.dense1.weight", he_normal(rng, (hidden, latent_dim), latent_dim))
        params.add(f"{prefix}.dense1.bias", np.zeros(hidden))
        params.add(f"{prefix}.dense2.weight", rng.standard_normal((N_ANSWERS, hidden)) * np.sqrt(1.0 / hidden))
        params.add(f"{prefix}.dense2.bias", np.zeros(N_ANSWERS))

    def logits(self, latent_mean: Tensor) -> Tensor:
        if latent_mean.shape[-1] != self.latent_dim:
            raise ShapeError(f"classifier expects latent dimension {self.latent_dim}, got {latent_mean.shape}")
        x = latent_mean if latent_mean.ndim == 2 else ad.reshape(latent_mean, (1, -1))
        p = self.params
        h = ad.relu(ad.linear(x, p[f"{self.prefix}.dense1.weight"], p[f"{self.prefix}.dense1.bias"]))
        return ad.linear(h, p[f"{self.prefix}.dense2.weight"], p[f"{self.prefix}.dense2.bias"])


def predict_votes(net: ClassifierNet, latent_mean: Tensor) -> Tensor:
    """Answer probabilities, shape (N, 3); each row sums to 1."""
    return ad.softmax(net.logits(latent_mean))


def multinomial_nll(logits: Tensor, counts, reduction: str = "mean") -> Tensor:
    """``-sum_i counts_i * log k_i`` with ``k = softmax(logits)``.

    The multinomial coefficient is dropped; it does not depend on the model.
    """
    counts = np.asarray(counts, dtype=np.float64).reshape(-1, N_ANSWERS)
    if logits.shape[-1] != N_ANSWERS:
        raise ShapeError(f"expected {N_ANSWERS} logits per example, got {logits.shape}")
    logits = logits if logits.ndim == 2 else ad.reshape(logits, (1, -1))
    if logits.shape[0] != counts.shape[0]:
        raise ShapeError(f"{logits.shape[0]} predictions vs {counts.shape[0]} labels")
    per = ad.neg(ad.sum(ad.mul(ad.log_softmax(logits), Tensor(counts)), axis=1))
    if reduction == "none":
        return per
    if reduction == "sum":
        return ad.sum(per)
    return ad.mean(per)


def nll_floor(counts) -> float:
    """Mean over examples of the NLL at the empirical fractions (its minimum)."""
    c = np.asarray(counts, dtype=np.float64).reshape(-1, N_ANSWERS)
    frac = c / c.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(c > 0, c * np.log(frac), 0.0)
    return float(-terms.sum(axis=1).mean())


def vote_fractions(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64).reshape(-1, N_ANSWERS)
    totals = c.sum(axis=1, keepdims=True)
    if np.any(totals < 1):
        raise ValueError("every label needs at least one vote")
    return c / totals


def rmse_votes(preds: Sequence, labels: Sequence) -> float:
    """Root mean squared error between predicted k and empirical vote fractions."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, N_ANSWERS)
    if p.shape[0] == 0:
        raise ValueError("rmse_votes needs at least one example")
    f = vote_fractions(labels)
    if f.shape != p.shape:
        raise ShapeError(f"{p.shape[0]} predictions vs {f.shape[0]} labels")
    return float(np.sqrt(np.mean((p - f) ** 2)))
