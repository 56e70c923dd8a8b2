"""Objective terms: classification, class weights, domain confusion, centroid separation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor


@dataclass(frozen=True)
class ClassWeights:
    gamma: np.ndarray

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes))

    def __len__(self) -> int:
        return self.gamma.size

    def per_sample(self, labels) -> np.ndarray:
        return self.gamma[np.asarray(labels, dtype=np.intp)]


@dataclass
class CentroidBank:
    """Moving-average class centroids for each domain.

    ``source`` and ``target`` are C x F tensors.  Between training steps they
    are constants; :func:`update_centroids` returns a bank whose rows depend
    on the current batch so that the separation loss can back-propagate.
    """

    source: Tensor
    target: Tensor
    seen_source: np.ndarray
    seen_target: np.ndarray
    momentum: float = 0.7

    @classmethod
    def empty(cls, num_classes: int, dim: int, momentum: float = 0.7) -> "CentroidBank":
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"centroid momentum must lie in [0, 1), got {momentum}")
        return cls(
            Tensor(np.zeros((num_classes, dim))),
            Tensor(np.zeros((num_classes, dim))),
            np.zeros(num_classes, dtype=bool),
            np.zeros(num_classes, dtype=bool),
            momentum,
        )

    @property
    def num_classes(self) -> int:
        return self.seen_source.size

    def detached(self) -> "CentroidBank":
        return CentroidBank(
            self.source.detach(),
            self.target.detach(),
            self.seen_source.copy(),
            self.seen_target.copy(),
            self.momentum,
        )


@dataclass
class LossBreakdown:
    source: Tensor
    target: Tensor
    domain: Tensor
    separation: Tensor
    total: Tensor
    lambda1: float
    lambda2: float

    def values(self) -> dict[str, float]:
        return {
            "L_S": self.source.item(),
            "L_T": self.target.item(),
            "L_D": self.domain.item(),
            "L_CS": self.separation.item(),
            "total": self.total.item(),
        }


def _check_nonempty(logits: Tensor, name: str) -> None:
    if logits.shape[0] == 0:
        raise ContractError(f"{name}: empty source batch")


def loss_source(logits_s: Tensor, labels_s) -> Tensor:
    _check_nonempty(logits_s, "loss_source")
    return ad.softmax_cross_entropy(logits_s, labels_s)


def loss_target_weighted(logits_s: Tensor, labels_s, gamma: ClassWeights) -> Tensor:
    """Cross entropy with weight gamma[y_i]; still divided by n_s, not by sum(gamma)."""
    _check_nonempty(logits_s, "loss_target_weighted")
    if not np.all(np.isfinite(gamma.gamma)):
        raise NumericError("loss_target_weighted: non-finite class weights")
    y = np.asarray(labels_s, dtype=np.float64)
    weights = y @ gamma.gamma
    return ad.softmax_cross_entropy(logits_s, y, weights)


def estimate_gamma(target_probs, normalize: bool = True) -> ClassWeights:
    p = np.asarray(target_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"estimate_gamma: needs at least one target row, got shape {p.shape}")
    gamma = p.mean(axis=0)
    if normalize:
        gamma = gamma / gamma.max()
    return ClassWeights(gamma)


def loss_domain(domain_probs: Tensor, domain_labels, sample_weights) -> Tensor:
    """``(1/n_s) sum_src w_i BCE_i + (1/n_t) sum_tgt BCE_i`` with d = 1 for source rows.

    Target rows are expected to carry weight 1.  The discriminator minimises
    this value; the extractor and GCN head maximise it through the gradient
    reversal placed in front of the discriminator.
    """
    d, scale = _domain_scale(domain_labels, sample_weights)
    return ad.binary_cross_entropy(domain_probs, d, scale)


def _domain_scale(domain_labels, sample_weights) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(domain_labels, dtype=np.float64).reshape(-1)
    w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
    if w.shape != d.shape:
        raise ContractError(f"loss_domain: {d.size} labels but {w.size} weights")
    is_source = d == 1.0
    n_s, n_t = int(is_source.sum()), int((~is_source).sum())
    if n_s == 0 or n_t == 0:
        raise ContractError(f"loss_domain: needs both domains, got n_s={n_s}, n_t={n_t}")
    return d, np.where(is_source, w / n_s, w / n_t)


def loss_domain_logits(domain_logits: Tensor, domain_labels, sample_weights) -> Tensor:
    """:func:`loss_domain` evaluated on pre-sigmoid scores, without clamping."""
    d, scale = _domain_scale(domain_labels, sample_weights)
    return ad.binary_cross_entropy_with_logits(domain_logits, d, scale)


def update_centroids(bank: CentroidBank, feats: Tensor, labels, is_source) -> CentroidBank:
    """Blend per-class batch means into the bank: ``c <- m c + (1 - m) mean``.

    ``labels`` is an n x C matrix (one-hot, or all-zero for rows without a
    label).  A class seen for the first time takes the batch mean directly;
    classes absent from the batch keep their centroid.  The returned
    centroids are differentiable with respect to ``feats``.
    """
    y = np.asarray(labels, dtype=np.float64)
    src = np.asarray(is_source, dtype=bool).reshape(-1)
    m = bank.momentum
    out = []
    for mask, old, seen in ((src, bank.source, bank.seen_source), (~src, bank.target, bank.seen_target)):
        y_dom = y * mask[:, None]
        counts = y_dom.sum(axis=0)
        present = counts > 0
        new_weight = np.where(present, np.where(seen, 1.0 - m, 1.0), 0.0)
        keep_weight = np.where(present, np.where(seen, m, 0.0), 1.0)
        averaging = (new_weight / np.where(present, counts, 1.0))[:, None] * y_dom.T
        centroids = ad.add(ad.mul(old, keep_weight[:, None]), ad.matmul(averaging, feats))
        out.append((centroids, seen | present))
    (cs, seen_s), (ct, seen_t) = out
    return CentroidBank(cs, ct, seen_s, seen_t, m)


def loss_centroid_separation(bank: CentroidBank, offset: int) -> Tensor:
    """``-sum_k ||c_s[k] - c_t[(k + offset) mod C]||^2`` over pairs seen on both sides."""
    c = bank.num_classes
    if not 1 <= offset <= c - 1:
        raise ContractError(f"offset must lie in [1, {c - 1}], got {offset}")
    shifted = (np.arange(c) + offset) % c
    active = bank.seen_source & bank.seen_target[shifted]
    diff = ad.sub(bank.source, ad.take_rows(bank.target, shifted))
    masked = ad.mul(ad.square(diff), active.astype(np.float64)[:, None])
    return ad.mul(ad.total(masked), -1.0)


def total_loss(
    l_source: Tensor,
    l_target: Tensor,
    l_domain: Tensor,
    l_separation: Tensor,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
) -> LossBreakdown:
    parts = [ad.as_tensor(t) for t in (l_source, l_target, l_domain, l_separation)]
    value = parts[0] + parts[1] + ad.mul(parts[2], lambda1) + ad.mul(parts[3], lambda2)
    return LossBreakdown(*parts, total=value, lambda1=lambda1, lambda2=lambda2)
