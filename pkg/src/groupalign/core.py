"""Shared domain types and deterministic numeric utilities.

Everything here is an immutable value type or a pure function. Feature
values are 64-bit floats throughout; randomness always flows through
:func:`seeded_rng` so a run is reproducible byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

Box = Tuple[float, float, float, float]


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DomainId:
    """Identifies which domain a sample belongs to.

    Source domains are indexed 0..n_sources-1; the (single) target domain
    has no index. Use :meth:`source` / :meth:`target` to construct.
    """

    kind: str  # "source" | "target"
    index: Optional[int] = None

    def __post_init__(self):
        if self.kind == "source":
            if self.index is None or self.index < 0:
                raise ValueError("source domain needs a nonnegative index")
        elif self.kind == "target":
            if self.index is not None:
                raise ValueError("target domain carries no index")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def source(cls, index: int) -> "DomainId":
        return cls("source", int(index))

    @classmethod
    def target(cls) -> "DomainId":
        return cls("target")

    @property
    def is_target(self) -> bool:
        return self.kind == "target"

    def __str__(self) -> str:
        return "target" if self.kind == "target" else f"source:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "DomainId":
        if text == "target":
            return cls.target()
        if text.startswith("source:"):
            return cls.source(int(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse domain id {text!r}")


@dataclass(frozen=True)
class Proposal:
    """One candidate region: a feature vector plus optional label and box.

    The unit of instance-level alignment. ``pseudo_label`` is the (possibly
    noisy) predicted class; ``box`` is an axis-aligned (x1, y1, x2, y2)
    rectangle in abstract units.
    """

    feature: np.ndarray
    pseudo_label: Optional[int] = None
    box: Optional[Box] = None
    domain: DomainId = field(default_factory=DomainId.target)

    def __post_init__(self):
        object.__setattr__(self, "feature", _frozen_vector(self.feature, "feature"))
        if self.box is not None:
            x1, y1, x2, y2 = (float(v) for v in self.box)
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"degenerate box {self.box}")
            object.__setattr__(self, "box", (x1, y1, x2, y2))
        if self.pseudo_label is not None and self.pseudo_label < 0:
            raise ValueError("pseudo_label must be nonnegative")

    @property
    def dim(self) -> int:
        return self.feature.shape[0]


@dataclass(frozen=True)
class ImageSample:
    """A bag of proposals plus one global image feature.

    ``true_labels`` is simulation ground truth; for target-domain samples it
    must never be visible to the alignment losses (only to evaluation).
    Proposal order is significant and preserved.
    """

    image_feature: np.ndarray
    proposals: Tuple[Proposal, ...]
    domain: DomainId
    true_labels: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(
            self, "image_feature", _frozen_vector(self.image_feature, "image_feature")
        )
        object.__setattr__(self, "proposals", tuple(self.proposals))
        for p in self.proposals:
            if p.domain != self.domain:
                raise ValueError(
                    f"proposal domain {p.domain} does not match sample domain {self.domain}"
                )
        if self.true_labels is not None:
            labels = tuple(int(v) for v in self.true_labels)
            if len(labels) != len(self.proposals):
                raise ValueError("true_labels length must match proposals")
            object.__setattr__(self, "true_labels", labels)

    def __len__(self) -> int:
        return len(self.proposals)


def l2_norm(v: Sequence[float]) -> float:
    """Euclidean norm of a vector."""
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def seeded_rng(seed: int, key: Tuple[int, ...] = ()) -> np.random.Generator:
    """Deterministic random stream for a 64-bit seed.

    Uses the Philox 4x64 counter-based generator (10 rounds), keyed from the
    seed through numpy's SeedSequence. Identical (seed, key) pairs give
    bit-identical streams on every platform for a fixed numpy version.
    ``key`` selects an independent substream, so components can draw from
    their own stream without perturbing one another.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, key: Sequence[int] = ()) -> int:
    """Deterministic 64-bit child seed for the given (seed, key) slot.

    Lets a component hand an independent integer seed to a sub-component
    (for example, one per dataset) without the collision risk of arithmetic
    on the parent seed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
