"""Synthetic two-domain data: class-conditional Gaussian proposal features.

Every image holds a random number of proposals. A proposal's feature is its
class mean plus the domain's shift plus isotropic Gaussian noise, so the two
domains differ by a controlled translation of every class cloud. Pseudo
labels are true labels corrupted by uniform resampling. Boxes are rectangles
jittered around per-image class anchors; the overlap bias controls how
tightly same-class boxes stack, which is all the spatial-distance grouping
mode gets to see.

A linear-softmax proxy task stands in for the downstream predictor: its
cross-entropy on source proposals is the task loss, and its accuracy on
held-out target proposals is what alignment is supposed to rescue.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DomainId, ImageSample, Proposal, seeded_rng
from .nn import DenseNet

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1

# Anchor geometry for box generation: centers land in the middle of a unit
# frame, sizes are a fraction of it. Jitter scales with (1 - overlap_bias).
_ANCHOR_CENTER_LO, _ANCHOR_CENTER_HI = 0.15, 0.85
_ANCHOR_SIZE_LO, _ANCHOR_SIZE_HI = 0.10, 0.30
_CENTER_JITTER = 0.30
_SIZE_JITTER = 0.50


@dataclass(frozen=True)
class DomainSpec:
    """Distribution parameters for one domain's proposal features.

    class_means is (C, m); shift is added to every feature of this domain.
    label_noise is the probability a pseudo label is resampled uniformly
    over all C classes. box_overlap_bias in [0, 1] controls how much
    same-class boxes overlap (1 = identical, 0 = widely scattered).
    """

    class_means: np.ndarray
    class_cov_scale: float
    shift: np.ndarray
    proposals_per_image: Tuple[int, int]
    class_mix: np.ndarray
    label_noise: float = 0.0
    box_overlap_bias: float = 0.8

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        means.flags.writeable = False
        object.__setattr__(self, "class_means", means)
        if means.shape[0] < 1:
            raise ValueError("need at least one class mean")
        shift = np.asarray(self.shift, dtype=np.float64)
        shift.flags.writeable = False
        object.__setattr__(self, "shift", shift)
        if shift.shape != (means.shape[1],):
            raise ValueError(
                f"shift shape {shift.shape} does not match feature dim {means.shape[1]}"
            )
        if self.class_cov_scale < 0.0:
            raise ValueError(f"class_cov_scale must be >= 0, got {self.class_cov_scale}")
        lo, hi = (int(v) for v in self.proposals_per_image)
        object.__setattr__(self, "proposals_per_image", (lo, hi))
        if not (0 <= lo <= hi):
            raise ValueError(f"need 0 <= lo <= hi, got ({lo}, {hi})")
        mix = np.asarray(self.class_mix, dtype=np.float64)
        mix.flags.writeable = False
        object.__setattr__(self, "class_mix", mix)
        if mix.shape != (means.shape[0],):
            raise ValueError(f"class_mix length {mix.shape} does not match {means.shape[0]} classes")
        if (mix < 0.0).any() or abs(float(mix.sum()) - 1.0) > 1e-9:
            raise ValueError("class_mix must be nonnegative and sum to 1 within 1e-9")
        if not (0.0 <= self.label_noise < 1.0):
            raise ValueError(f"label_noise must be in [0, 1), got {self.label_noise}")
        if not (0.0 <= self.box_overlap_bias <= 1.0):
            raise ValueError(f"box_overlap_bias must be in [0, 1], got {self.box_overlap_bias}")

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]

    def to_dict(self) -> Dict:
        return {
            "class_means": self.class_means.tolist(),
            "class_cov_scale": self.class_cov_scale,
            "shift": self.shift.tolist(),
            "proposals_per_image": list(self.proposals_per_image),
            "class_mix": self.class_mix.tolist(),
            "label_noise": self.label_noise,
            "box_overlap_bias": self.box_overlap_bias,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "DomainSpec":
        return cls(
            class_means=np.array(payload["class_means"], dtype=np.float64),
            class_cov_scale=float(payload["class_cov_scale"]),
            shift=np.array(payload["shift"], dtype=np.float64),
            proposals_per_image=tuple(payload["proposals_per_image"]),
            class_mix=np.array(payload["class_mix"], dtype=np.float64),
            label_noise=float(payload["label_noise"]),
            box_overlap_bias=float(payload["box_overlap_bias"]),
        )


@dataclass(frozen=True)
class SyntheticDataset:
    """Images drawn from one DomainSpec; (spec, seed) regenerates it exactly."""

    samples: Tuple[ImageSample, ...]
    spec: DomainSpec
    seed: int
    domain: DomainId

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_proposals(self) -> int:
        return sum(len(s) for s in self.samples)

    def save_jsonl(self, path: str):
        """One header line, then one JSON object per image."""
        with open(path, "w") as fh:
            header = {
                "format_version": DATASET_FORMAT_VERSION,
                "kind": "synthetic_dataset",
                "seed": self.seed,
                "domain": str(self.domain),
                "spec": self.spec.to_dict(),
            }
            fh.write(json.dumps(header) + "\n")
            for sample in self.samples:
                row = {
                    "image_feature": sample.image_feature.tolist(),
                    "true_labels": list(sample.true_labels) if sample.true_labels is not None else None,
                    "proposals": [
                        {
                            "feature": p.feature.tolist(),
                            "pseudo_label": p.pseudo_label,
                            "box": list(p.box) if p.box is not None else None,
                        }
                        for p in sample.proposals
                    ],
                }
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load_jsonl(cls, path: str) -> "SyntheticDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format_version") != DATASET_FORMAT_VERSION:
                raise ValueError(f"unsupported dataset format {header.get('format_version')!r}")
            domain = DomainId.parse(header["domain"])
            spec = DomainSpec.from_dict(header["spec"])
            samples = []
            for line in fh:
                row = json.loads(line)
                proposals = tuple(
                    Proposal(
                        feature=np.array(p["feature"], dtype=np.float64),
                        pseudo_label=p["pseudo_label"],
                        box=tuple(p["box"]) if p["box"] is not None else None,
                        domain=domain,
                    )
                    for p in row["proposals"]
                )
                samples.append(
                    ImageSample(
                        image_feature=np.array(row["image_feature"], dtype=np.float64),
                        proposals=proposals,
                        domain=domain,
                        true_labels=tuple(row["true_labels"]) if row["true_labels"] is not None else None,
                    )
                )
        return cls(samples=tuple(samples), spec=spec, seed=header["seed"], domain=domain)


def _boxes_for(
    rng: np.random.Generator, classes: np.ndarray, n_classes: int, overlap_bias: float
) -> List[Tuple[float, float, float, float]]:
    """Rectangles jittered around one anchor per class; bias 1 pins them."""
    centers = rng.uniform(_ANCHOR_CENTER_LO, _ANCHOR_CENTER_HI, size=(n_classes, 2))
    sizes = rng.uniform(_ANCHOR_SIZE_LO, _ANCHOR_SIZE_HI, size=(n_classes, 2))
    spread = 1.0 - overlap_bias
    boxes = []
    for cls in classes:
        u = rng.uniform(-1.0, 1.0, size=4)
        cx = centers[cls, 0] + spread * _CENTER_JITTER * u[0]
        cy = centers[cls, 1] + spread * _CENTER_JITTER * u[1]
        # Size multipliers stay in [1 - _SIZE_JITTER, 1 + _SIZE_JITTER], so
        # widths and heights remain strictly positive without clamping.
        w = sizes[cls, 0] * (1.0 + spread * _SIZE_JITTER * u[2])
        h = sizes[cls, 1] * (1.0 + spread * _SIZE_JITTER * u[3])
        boxes.append((cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
    return boxes


def generate(spec: DomainSpec, n_images: int, seed: int, domain: DomainId) -> SyntheticDataset:
    """Draw a dataset; bit-identical for equal (spec, seed, domain).

    Each image consumes its own random substream keyed by image index, so
    the draw for image i never depends on how many proposals earlier images
    received.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    lo, hi = spec.proposals_per_image
    samples = []
    for img in range(n_images):
        rng = seeded_rng(seed, key=(img,))
        n = int(rng.integers(lo, hi + 1))
        if n == 0:
            samples.append(
                ImageSample(
                    image_feature=np.zeros(spec.feature_dim),
                    proposals=(),
                    domain=domain,
                    true_labels=(),
                )
            )
            continue
        classes = rng.choice(spec.n_classes, size=n, p=spec.class_mix)
        feats = (
            spec.class_means[classes]
            + spec.shift
            + spec.class_cov_scale * rng.standard_normal((n, spec.feature_dim))
        )
        flips = rng.random(n) < spec.label_noise
        resampled = rng.integers(0, spec.n_classes, size=n)
        pseudo = np.where(flips, resampled, classes)
        boxes = _boxes_for(rng, classes, spec.n_classes, spec.box_overlap_bias)
        proposals = tuple(
            Proposal(
                feature=feats[i],
                pseudo_label=int(pseudo[i]),
                box=boxes[i],
                domain=domain,
            )
            for i in range(n)
        )
        samples.append(
            ImageSample(
                image_feature=feats.mean(axis=0),
                proposals=proposals,
                domain=domain,
                true_labels=tuple(int(c) for c in classes),
            )
        )
    return SyntheticDataset(samples=tuple(samples), spec=spec, seed=seed, domain=domain)


def softmax_ce(classifier: DenseNet, feats: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows of feats.

    Returns (loss, dloss_dfeats); the classifier's parameter gradients
    accumulate in its own buffers, like every other loss here.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.shape[0] == 0:
        logger.debug("softmax_ce on empty batch, returning zeros")
        return 0.0, np.zeros_like(feats)
    logits, tape = classifier.forward(feats)
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = feats.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels]).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, classifier.backward(tape, dlogits)


def _gather(samples: Sequence[ImageSample], need_labels: bool) -> Tuple[np.ndarray, np.ndarray]:
    feats = []
    labels = []
    for s in samples:
        if not len(s):
            continue
        if need_labels and s.true_labels is None:
            raise ValueError("samples must carry true_labels")
        feats.append(np.stack([p.feature for p in s.proposals]))
        if need_labels:
            labels.extend(s.true_labels)
    if not feats:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.concatenate(feats), np.asarray(labels, dtype=np.int64)


def proxy_task_loss(classifier: DenseNet, samples: Sequence[ImageSample]) -> Tuple[float, np.ndarray]:
    """Stand-in task loss: softmax cross-entropy on labeled source proposals.

    Grads are w.r.t. the proposal features, stacked in traversal order
    (images, then proposals within each image).
    """
    feats, labels = _gather(samples, need_labels=True)
    return softmax_ce(classifier, feats, labels)


def classify_accuracy(classifier: DenseNet, feats: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax logit matches the label."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] == 0:
        raise ValueError("cannot score an empty batch")
    logits = classifier(feats)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def target_accuracy(
    classifier: DenseNet,
    samples: Sequence[ImageSample],
    adapter: Optional[DenseNet] = None,
) -> float:
    """Fraction of proposals classified into their hidden true class.

    With an adapter, features pass through it before classification,
    scoring the classifier on the representation it was trained in.
    """
    feats, labels = _gather(samples, need_labels=True)
    if feats.shape[0] == 0:
        raise ValueError("no proposals to score")
    if adapter is not None:
        feats = adapter(feats)
    return classify_accuracy(classifier, feats, labels)
