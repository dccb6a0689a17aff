"""Discriminator wiring for multi-source training.

Image-level and instance-level discriminators can each be shared across all
source-target pairs or dedicated per source. Routing sends source-k batches
to source k's discriminator and target batches to every discriminator at
that level, since each source-target pair trains its discriminator with the
target side as domain label 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

from .core import DomainId
from .nn import DenseNet

SHARED = "shared"
PER_SOURCE = "per_source"
_WIRINGS = (SHARED, PER_SOURCE)

IMAGE_LEVEL = "image"
INSTANCE_LEVEL = "instance"
_LEVELS = (IMAGE_LEVEL, INSTANCE_LEVEL)

# Config names pick the wiring of (image_disc, instance_disc).
TOPOLOGY_NAMES = {
    "shared": (SHARED, SHARED),
    "sep_img": (PER_SOURCE, SHARED),
    "sep_ins": (SHARED, PER_SOURCE),
    "separated": (PER_SOURCE, PER_SOURCE),
}

# Substream slots for discriminator init, keeping parameters independent of
# how many discriminators exist (disc i always draws from the same stream).
_IMAGE_DISC_SLOT = 6
_INSTANCE_DISC_SLOT = 7


@dataclass(frozen=True)
class TopologySpec:
    """How many sources there are and which discriminators they share."""

    n_sources: int = 1
    image_disc: str = SHARED
    instance_disc: str = SHARED

    def __post_init__(self):
        if self.n_sources < 1:
            raise ValueError(f"n_sources must be >= 1, got {self.n_sources}")
        for field in (self.image_disc, self.instance_disc):
            if field not in _WIRINGS:
                raise ValueError(f"unknown wiring {field!r}, expected one of {_WIRINGS}")

    @classmethod
    def from_name(cls, name: str, n_sources: int = 1) -> "TopologySpec":
        if name not in TOPOLOGY_NAMES:
            raise ValueError(f"unknown topology {name!r}, expected one of {sorted(TOPOLOGY_NAMES)}")
        image_disc, instance_disc = TOPOLOGY_NAMES[name]
        return cls(n_sources=n_sources, image_disc=image_disc, instance_disc=instance_disc)

    @property
    def name(self) -> str:
        for name, wiring in TOPOLOGY_NAMES.items():
            if wiring == (self.image_disc, self.instance_disc):
                return name
        raise AssertionError("unreachable: every wiring pair has a name")

    def n_discs(self, level: str) -> int:
        wiring = self.image_disc if level == IMAGE_LEVEL else self.instance_disc
        return self.n_sources if wiring == PER_SOURCE else 1


@dataclass
class DiscriminatorBank:
    """The discriminators themselves, one or n_sources per level."""

    image_discs: List[DenseNet]
    instance_discs: List[DenseNet]

    @classmethod
    def build(
        cls,
        spec: TopologySpec,
        in_dim: int,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
    ) -> "DiscriminatorBank":
        """Fresh sigmoid-output MLP discriminators sized to the topology.

        Discriminator i at each level always draws its parameters from the
        same substream, so a one-source run is initialized identically no
        matter which topology name selected it.
        """
        sizes = [in_dim] + list(hidden) + [1]
        acts = ["relu"] * len(hidden) + ["sigmoid"]
        return cls(
            image_discs=[
                DenseNet(sizes, acts, seed=seed, key=(_IMAGE_DISC_SLOT, i))
                for i in range(spec.n_discs(IMAGE_LEVEL))
            ],
            instance_discs=[
                DenseNet(sizes, acts, seed=seed, key=(_INSTANCE_DISC_SLOT, i))
                for i in range(spec.n_discs(INSTANCE_LEVEL))
            ],
        )


def route(
    spec: TopologySpec, bank: DiscriminatorBank, domain: DomainId, level: str
) -> List[DenseNet]:
    """Discriminators a batch from this domain must visit at this level.

    Source k goes to its dedicated discriminator (or the shared one);
    target batches go to every discriminator at the level. Callers that
    aggregate target gradients should average over the returned list so the
    target's gradient magnitude does not depend on the wiring.
    """
    if level not in _LEVELS:
        raise ValueError(f"unknown level {level!r}, expected one of {_LEVELS}")
    discs = bank.image_discs if level == IMAGE_LEVEL else bank.instance_discs
    expected = spec.n_discs(level)
    if len(discs) != expected:
        raise ValueError(f"bank holds {len(discs)} {level} discriminators, topology needs {expected}")
    if domain.kind == "target":
        return list(discs)
    k = domain.index
    if k is None or not (0 <= k < spec.n_sources):
        raise ValueError(f"source index {k} out of range for {spec.n_sources} sources")
    return [discs[k if expected > 1 else 0]]
