"""Label relational graph over a joint source/target batch."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .autodiff import ContractError


class LabelKind(IntEnum):
    GROUND_TRUTH = 0
    PSEUDO = 1
    UNLABELED = 2


@dataclass(frozen=True)
class NodeLabels:
    rows: np.ndarray  # n x C
    kinds: np.ndarray  # n, LabelKind values

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ContractError(f"label rows must be n x C, got shape {self.rows.shape}")
        if self.kinds.shape != (self.rows.shape[0],):
            raise ContractError("one kind per label row is required")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def num_classes(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def ground_truth(cls, labels, num_classes: int) -> "NodeLabels":
        labels = np.asarray(labels, dtype=np.intp)
        rows = np.zeros((labels.size, num_classes))
        rows[np.arange(labels.size), labels] = 1.0
        return cls(rows, np.full(labels.size, LabelKind.GROUND_TRUTH, dtype=np.int8))

    @classmethod
    def concat(cls, *parts: "NodeLabels") -> "NodeLabels":
        return cls(np.vstack([p.rows for p in parts]), np.concatenate([p.kinds for p in parts]))


@dataclass(frozen=True)
class LabelGraph:
    adjacency: np.ndarray
    adjacency_tilde: np.ndarray
    degree_tilde: np.ndarray  # diagonal of D~ as a vector
    propagation: np.ndarray

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def identity(cls, n: int) -> "LabelGraph":
        """Graph without edges; propagation is the n x n identity."""
        return cls.from_adjacency(np.zeros((n, n)))

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "LabelGraph":
        a = np.asarray(adjacency, dtype=np.float64)
        a_tilde = a + np.eye(a.shape[0])
        deg = a_tilde.sum(axis=1)
        inv_sqrt = 1.0 / np.sqrt(deg)
        prop = inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]
        # Round-off can leave P off-symmetric by one ulp; the math says it is symmetric.
        prop = 0.5 * (prop + prop.T)
        return cls(a, a_tilde, deg, prop)


def build_adjacency(labels: NodeLabels) -> LabelGraph:
    """A_ij = sum_c y_ic y_jc, then self-loops and symmetric normalisation."""
    y = np.asarray(labels.rows, dtype=np.float64)
    if np.any(y < 0):
        raise ContractError("label rows must be non-negative")
    a = y @ y.T
    return LabelGraph.from_adjacency(0.5 * (a + a.T))


def assign_pseudo_labels(probs, threshold: float = 0.8) -> NodeLabels:
    """One-hot at the argmax where confidence reaches ``threshold``, else all-zero.

    ``np.argmax`` returns the first maximal index, so ties go to the lowest class.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ContractError(f"probabilities must be n x C, got shape {p.shape}")
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must lie in (0, 1], got {threshold}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("every probability row must lie on the simplex")
    n, c = p.shape
    rows = np.zeros((n, c))
    kinds = np.full(n, LabelKind.UNLABELED, dtype=np.int8)
    if n:
        best = p.argmax(axis=1)
        confident = p[np.arange(n), best] >= threshold
        rows[np.flatnonzero(confident), best[confident]] = 1.0
        kinds[confident] = LabelKind.PSEUDO
    return NodeLabels(rows, kinds)


def soft_pseudo_labels(probs) -> NodeLabels:
    """Keep the full softmax rows as soft labels (every row counts as pseudo)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("every probability row must lie on the simplex")
    return NodeLabels(p.copy(), np.full(p.shape[0], LabelKind.PSEUDO, dtype=np.int8))
