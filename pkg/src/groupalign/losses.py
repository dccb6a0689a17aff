"""Alignment losses over group embeddings, with exact input gradients.

Each loss returns its scalar value together with the gradient w.r.t. every
group vector it touched, so callers can scatter those gradients back onto
the features that produced the groups. Degenerate batches (no groups on one
side) are legal and yield zero loss and zero gradients rather than raising;
they are logged at debug level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .clustering import GroupEmbedding
from .nn import DenseNet, GrlSpec, bce_loss, grl

logger = logging.getLogger(__name__)

CLASS_MATCHED = "class_matched"
NEAREST_NEIGHBOR = "nearest_neighbor"
_CONTRASTIVE_MODES = (CLASS_MATCHED, NEAREST_NEIGHBOR)


@dataclass(frozen=True)
class ContrastiveSpec:
    """Margin, pairing mode and direction options for the max-margin losses.

    symmetrize adds the mirrored target-to-source term in nearest-neighbor
    mode; matching stays source-to-target by default.
    """

    mode: str
    margin: float = 1.0
    symmetrize: bool = False

    def __post_init__(self):
        if self.mode not in _CONTRASTIVE_MODES:
            raise ValueError(
                f"unknown contrastive mode {self.mode!r}, expected one of {_CONTRASTIVE_MODES}"
            )
        if self.margin <= 0.0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass(frozen=True)
class AlignmentBatch:
    """Everything one training step aligns: per-source and target groups,
    plus the image-level vectors for both sides."""

    source_groups: Tuple[Tuple[GroupEmbedding, ...], ...]
    target_groups: Tuple[GroupEmbedding, ...]
    source_image_feats: Tuple[np.ndarray, ...]
    target_image_feats: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "source_groups", tuple(tuple(gs) for gs in self.source_groups)
        )
        object.__setattr__(self, "target_groups", tuple(self.target_groups))
        object.__setattr__(
            self,
            "source_image_feats",
            tuple(np.asarray(v, dtype=np.float64) for v in self.source_image_feats),
        )
        object.__setattr__(
            self,
            "target_image_feats",
            tuple(np.asarray(v, dtype=np.float64) for v in self.target_image_feats),
        )
        dims = set()
        for gs in self.source_groups:
            dims.update(g.vector.shape[0] for g in gs)
        dims.update(g.vector.shape[0] for g in self.target_groups)
        dims.update(v.shape[0] for v in self.source_image_feats)
        dims.update(v.shape[0] for v in self.target_image_feats)
        if len(dims) > 1:
            raise ValueError(f"embedding dimensions disagree: {sorted(dims)}")

    @property
    def n_sources(self) -> int:
        return len(self.source_groups)


def _stack(groups: Sequence[GroupEmbedding]) -> np.ndarray:
    return np.stack([g.vector for g in groups])


def adversarial_loss(
    groups: Sequence[GroupEmbedding],
    domain_label: float,
    disc: DenseNet,
    grl_spec: GrlSpec,
) -> Tuple[float, np.ndarray, List[np.ndarray]]:
    """Mean BCE of a domain discriminator over group embeddings.

    domain_label is 0.0 for source groups and 1.0 for target groups.
    Returns (loss, embedding_grads, disc_grads): embedding_grads is the
    (n_groups, dim) gradient after reversal, -lam * dL/dembedding, the
    direction that makes the embeddings harder to classify; disc_grads is
    this call's descent contribution, ordered like disc.gradients(). The
    same contribution is also accumulated into the discriminator's buffers.
    """
    if domain_label not in (0.0, 1.0):
        raise ValueError(f"domain_label must be 0.0 or 1.0, got {domain_label}")
    if disc.out_dim != 1:
        raise ValueError("domain discriminator must have a single output unit")
    if len(groups) == 0:
        logger.debug("adversarial_loss on empty group list, returning zeros")
        return 0.0, np.zeros((0, disc.in_dim)), [np.zeros_like(g) for g in disc.gradients()]
    x = _stack(groups)
    out, tape = disc.forward(x)
    p = out[:, 0]
    targets = np.full(p.shape, domain_label)
    loss, dloss_dp = bce_loss(p, targets)
    before = [g.copy() for g in disc.gradients()]
    grads_in = disc.backward(tape, dloss_dp[:, None])
    disc_grads = [after - prev for after, prev in zip(disc.gradients(), before)]
    return loss, grl(grads_in, grl_spec), disc_grads


def _class_map(groups: Sequence[GroupEmbedding], side: str) -> dict:
    by_class = {}
    for idx, g in enumerate(groups):
        if g.class_tag is None:
            raise ValueError(f"class-matched loss needs class_tag on every {side} group")
        if g.class_tag in by_class:
            raise ValueError(f"duplicate class {g.class_tag} among {side} groups")
        by_class[g.class_tag] = idx
    return by_class


def _empty_like(groups: Sequence[GroupEmbedding]) -> np.ndarray:
    dim = groups[0].vector.shape[0] if groups else 0
    return np.zeros((len(groups), dim))


def contrastive_class_matched(
    source_groups: Sequence[GroupEmbedding],
    target_groups: Sequence[GroupEmbedding],
    spec: ContrastiveSpec,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Pull same-class pairs together, push different-class pairs apart.

    Over the classes present in both domains: squared distance to the
    same-class partner, plus a margin hinge max(0, m - ||.||^2) against
    every other common class. Classes seen on only one side are skipped.
    Returns (loss, source_grads, target_grads) aligned with the inputs.
    """
    if spec.mode != CLASS_MATCHED:
        raise ValueError(f"spec.mode is {spec.mode!r}, expected {CLASS_MATCHED!r}")
    if not source_groups or not target_groups:
        logger.debug("class-matched loss on empty side, returning zeros")
        return 0.0, _empty_like(source_groups), _empty_like(target_groups)
    f0 = _stack(source_groups)
    f1 = _stack(target_groups)
    if f0.shape[1] != f1.shape[1]:
        raise ValueError(f"dimension mismatch: {f0.shape[1]} vs {f1.shape[1]}")
    src_by_class = _class_map(source_groups, "source")
    tgt_by_class = _class_map(target_groups, "target")
    common = sorted(set(src_by_class) & set(tgt_by_class))
    skipped = (set(src_by_class) | set(tgt_by_class)) - set(common)
    if skipped:
        logger.debug("classes %s present in only one domain, skipped", sorted(skipped))

    loss = 0.0
    g0 = np.zeros_like(f0)
    g1 = np.zeros_like(f1)
    for ci in common:
        i0 = src_by_class[ci]
        for cj in common:
            j1 = tgt_by_class[cj]
            diff = f0[i0] - f1[j1]
            sq = float(diff @ diff)
            if ci == cj:
                loss += sq
                g0[i0] += 2.0 * diff
                g1[j1] -= 2.0 * diff
            elif spec.margin - sq > 0.0:
                loss += spec.margin - sq
                g0[i0] -= 2.0 * diff
                g1[j1] += 2.0 * diff
    return loss, g0, g1


def _nn_directed(
    f_a: np.ndarray, f_b: np.ndarray, margin: float, g_a: np.ndarray, g_b: np.ndarray
) -> float:
    """One direction of the nearest-neighbor loss, accumulating grads in place."""
    loss = 0.0
    for i in range(f_a.shape[0]):
        diffs = f_a[i] - f_b
        sq = (diffs * diffs).sum(axis=1)
        # Exact ties go to the lowest index; the match itself carries no
        # gradient, only the distances computed from it do.
        nn_j = int(np.argmin(sq))
        loss += float(sq[nn_j])
        g_a[i] += 2.0 * diffs[nn_j]
        g_b[nn_j] -= 2.0 * diffs[nn_j]
        for j in range(f_b.shape[0]):
            if j == nn_j:
                continue
            gap = margin - float(sq[j])
            if gap > 0.0:
                loss += gap
                g_a[i] -= 2.0 * diffs[j]
                g_b[j] += 2.0 * diffs[j]
    return loss


def contrastive_nn_matched(
    source_groups: Sequence[GroupEmbedding],
    target_groups: Sequence[GroupEmbedding],
    spec: ContrastiveSpec,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Nearest-neighbor pairing when no class correspondence is available.

    Each source group pulls toward its nearest target group (squared L2,
    exact ties to the lowest index) and pushes against all others via the
    margin hinge. The match is held fixed: no gradient flows through the
    argmin. With spec.symmetrize the mirrored target-to-source term is
    added as well. Returns (loss, source_grads, target_grads).
    """
    if spec.mode != NEAREST_NEIGHBOR:
        raise ValueError(f"spec.mode is {spec.mode!r}, expected {NEAREST_NEIGHBOR!r}")
    if not source_groups or not target_groups:
        logger.debug("nn-matched loss on empty side, returning zeros")
        return 0.0, _empty_like(source_groups), _empty_like(target_groups)
    f0 = _stack(source_groups)
    f1 = _stack(target_groups)
    if f0.shape[1] != f1.shape[1]:
        raise ValueError(f"dimension mismatch: {f0.shape[1]} vs {f1.shape[1]}")
    g0 = np.zeros_like(f0)
    g1 = np.zeros_like(f1)
    loss = _nn_directed(f0, f1, spec.margin, g0, g1)
    if spec.symmetrize:
        loss += _nn_directed(f1, f0, spec.margin, g1, g0)
    return loss, g0, g1


def composite_loss(det_loss: float, img_loss: float, inst_loss: float, lam1: float, lam2: float) -> float:
    """Total objective: task loss plus weighted image and instance alignment."""
    if lam1 < 0.0 or lam2 < 0.0:
        raise ValueError("loss weights must be >= 0")
    return float(det_loss + lam1 * img_loss + lam2 * inst_loss)
