"""Experiment orchestration: config, training loop, metrics, sweeps, reports.

One training step samples one image per domain, adapts its proposal features
through a shared feature net, computes the proxy task loss on the source
side, builds groups per the configured aggregation mode, and applies the
configured alignment mechanism at the instance level and (optionally) the
image level. Task nets and discriminators take one SGD step each.

Everything is deterministic given the config: datasets, parameter init and
image sampling each draw from their own fixed substream of the config seed,
so changing one knob (say the alignment mechanism) never perturbs the
random draws of the others.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clustering import (
    COSINE,
    MODE_MG,
    MODE_MG_CA,
    MODE_PROPOSALS,
    MODE_SG,
    SPATIAL_IOU,
    FixedCount,
    GroupEmbedding,
    RadiusThreshold,
    StopRule,
    cluster_by_mode,
)
from .core import DomainId, ImageSample, Proposal, derive_seed, seeded_rng
from .losses import (
    CLASS_MATCHED,
    NEAREST_NEIGHBOR,
    ContrastiveSpec,
    adversarial_loss,
    composite_loss,
    contrastive_class_matched,
    contrastive_nn_matched,
)
from .nn import DenseNet, GrlSpec
from .simulate import DomainSpec, SyntheticDataset, classify_accuracy, generate, softmax_ce
from .topology import (
    IMAGE_LEVEL,
    INSTANCE_LEVEL,
    DiscriminatorBank,
    TopologySpec,
    route,
)

ADVERSARIAL = "adversarial"
CONTRASTIVE = "contrastive"
_ALIGNMENTS = (ADVERSARIAL, CONTRASTIVE)

_AGG_MODES = (MODE_PROPOSALS, MODE_SG, MODE_MG, MODE_MG_CA)

DEFAULT_SCHEDULE = ((2000, 1e-3), (500, 1e-4))

# Group-count smoothing: half-life of 50 steps.
SMOOTH_GAMMA = 0.5 ** (1.0 / 50.0)

SUMMARY_SCHEMA_VERSION = 1

# Substream slots, one per consumer of randomness. Dataset slots carry the
# source index so adding a source never reshuffles the others.
_SLOT_TRAIN_SOURCE = 0
_SLOT_TRAIN_TARGET = 1
_SLOT_EVAL_SOURCE = 2
_SLOT_EVAL_TARGET = 3
_SLOT_ADAPTER = 4
_SLOT_CLASSIFIER = 5
_SLOT_LOOP = 8


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of one run; validated on construction.

    max_steps defaults to the total length of lr_schedule; a longer run
    keeps the final rate. mode "proposals" skips clustering entirely, and
    the contrastive mechanism never touches the GRL coefficient.
    """

    source_specs: Tuple[DomainSpec, ...]
    target_spec: DomainSpec
    alignment: str = ADVERSARIAL
    mode: str = MODE_MG_CA
    metric: str = COSINE
    stop: StopRule = RadiusThreshold(0.8)
    image_level: bool = True
    lam1: float = 0.1
    lam2: float = 0.1
    margin: float = 1.0
    symmetrize_contrastive: bool = False
    grl_lam: float = 1.0
    lr_schedule: Tuple[Tuple[int, float], ...] = DEFAULT_SCHEDULE
    momentum: float = 0.9
    weight_decay: float = 0.0005
    topology: TopologySpec = TopologySpec()
    seed: int = 0
    max_steps: Optional[int] = None
    eval_every: int = 100
    n_train_images: int = 200
    n_eval_images: int = 64
    adapter_hidden: Tuple[int, ...] = (64,)
    disc_hidden: Tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "source_specs", tuple(self.source_specs))
        object.__setattr__(self, "adapter_hidden", tuple(int(h) for h in self.adapter_hidden))
        object.__setattr__(self, "disc_hidden", tuple(int(h) for h in self.disc_hidden))
        object.__setattr__(
            self, "lr_schedule", tuple((int(n), float(r)) for n, r in self.lr_schedule)
        )
        if self.alignment not in _ALIGNMENTS:
            raise ValueError(f"unknown alignment {self.alignment!r}, expected one of {_ALIGNMENTS}")
        if self.mode not in _AGG_MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {_AGG_MODES}")
        if self.metric not in (COSINE, SPATIAL_IOU):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not isinstance(self.stop, (RadiusThreshold, FixedCount)):
            raise TypeError(f"stop must be a RadiusThreshold or FixedCount, got {self.stop!r}")
        if self.lam1 < 0.0 or self.lam2 < 0.0:
            raise ValueError("lam1 and lam2 must be >= 0")
        if self.margin <= 0.0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.grl_lam < 0.0:
            raise ValueError(f"grl_lam must be >= 0, got {self.grl_lam}")
        if not self.lr_schedule or any(n < 1 or r <= 0.0 for n, r in self.lr_schedule):
            raise ValueError("lr_schedule needs positive phase lengths and rates")
        if len(self.source_specs) != self.topology.n_sources:
            raise ValueError(
                f"{len(self.source_specs)} source specs for a "
                f"{self.topology.n_sources}-source topology"
            )
        dims = {s.feature_dim for s in self.source_specs} | {self.target_spec.feature_dim}
        if len(dims) != 1:
            raise ValueError(f"feature dims disagree across domains: {sorted(dims)}")
        classes = {s.n_classes for s in self.source_specs} | {self.target_spec.n_classes}
        if len(classes) != 1:
            raise ValueError(f"class counts disagree across domains: {sorted(classes)}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.n_train_images < 1 or self.n_eval_images < 1:
            raise ValueError("need at least one training and one eval image per domain")

    @property
    def n_sources(self) -> int:
        return self.topology.n_sources

    @property
    def feature_dim(self) -> int:
        return self.target_spec.feature_dim

    @property
    def n_classes(self) -> int:
        return self.target_spec.n_classes

    @property
    def total_steps(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return sum(n for n, _ in self.lr_schedule)

    def lr_at(self, step: int) -> float:
        done = 0
        for n, rate in self.lr_schedule:
            done += n
            if step < done:
                return rate
        return self.lr_schedule[-1][1]

    def to_dict(self) -> Dict:
        if isinstance(self.stop, RadiusThreshold):
            stop = {"kind": "radius_threshold", "tau": self.stop.tau}
        else:
            stop = {"kind": "fixed_count", "k": self.stop.k}
        return {
            "source_specs": [s.to_dict() for s in self.source_specs],
            "target_spec": self.target_spec.to_dict(),
            "alignment": self.alignment,
            "mode": self.mode,
            "metric": self.metric,
            "stop": stop,
            "image_level": self.image_level,
            "lam1": self.lam1,
            "lam2": self.lam2,
            "margin": self.margin,
            "symmetrize_contrastive": self.symmetrize_contrastive,
            "grl_lam": self.grl_lam,
            "lr_schedule": [list(p) for p in self.lr_schedule],
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "topology": {
                "n_sources": self.topology.n_sources,
                "image_disc": self.topology.image_disc,
                "instance_disc": self.topology.instance_disc,
            },
            "seed": self.seed,
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
            "n_train_images": self.n_train_images,
            "n_eval_images": self.n_eval_images,
            "adapter_hidden": list(self.adapter_hidden),
            "disc_hidden": list(self.disc_hidden),
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "ExperimentConfig":
        payload = dict(payload)
        stop_d = payload.pop("stop", None)
        if stop_d is None:
            stop: StopRule = RadiusThreshold(0.8)
        elif stop_d["kind"] == "radius_threshold":
            stop = RadiusThreshold(float(stop_d["tau"]))
        elif stop_d["kind"] == "fixed_count":
            stop = FixedCount(int(stop_d["k"]))
        else:
            raise ValueError(f"unknown stop rule kind {stop_d['kind']!r}")
        topo_d = payload.pop("topology", None)
        topology = TopologySpec() if topo_d is None else TopologySpec(**topo_d)
        sources = tuple(DomainSpec.from_dict(s) for s in payload.pop("source_specs"))
        target = DomainSpec.from_dict(payload.pop("target_spec"))
        schedule = payload.pop("lr_schedule", None)
        kwargs = dict(payload)
        if schedule is not None:
            kwargs["lr_schedule"] = tuple((int(n), float(r)) for n, r in schedule)
        return cls(source_specs=sources, target_spec=target, stop=stop, topology=topology, **kwargs)


@dataclass(frozen=True)
class EvalRecord:
    """Metrics at one evaluation point; loss fields are from the step just run."""

    step: int
    lr: float
    loss_det: float
    loss_img: float
    loss_inst: float
    loss_total: float
    n_groups_source: Tuple[int, ...]
    n_groups_target: int
    smoothed_groups_source: Tuple[float, ...]
    smoothed_groups_target: float
    disc_acc_image: Tuple[float, ...]
    disc_acc_instance: Tuple[float, ...]
    source_accuracy: Tuple[float, ...]
    target_accuracy: float
    centroid_gaps: Tuple[float, ...]


@dataclass(frozen=True)
class MetricsTrace:
    """Eval records of one run plus the config that produced them."""

    config: ExperimentConfig
    records: Tuple[EvalRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        steps = [r.step for r in self.records]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("record steps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> EvalRecord:
        if not self.records:
            raise ValueError("trace has no records")
        return self.records[-1]

    def columns(self) -> List[str]:
        cols = ["step", "lr", "loss_det", "loss_img", "loss_inst", "loss_total"]
        cols += [f"n_groups_source_{k}" for k in range(self.config.n_sources)]
        cols += ["n_groups_target"]
        cols += [f"smoothed_groups_source_{k}" for k in range(self.config.n_sources)]
        cols += ["smoothed_groups_target"]
        cols += [f"disc_acc_image_{i}" for i in range(self.config.topology.n_discs(IMAGE_LEVEL))]
        cols += [f"disc_acc_instance_{i}" for i in range(self.config.topology.n_discs(INSTANCE_LEVEL))]
        cols += [f"source_accuracy_{k}" for k in range(self.config.n_sources)]
        cols += ["target_accuracy"]
        cols += [f"centroid_gap_{c}" for c in range(self.config.n_classes)]
        return cols

    def rows(self) -> List[List[float]]:
        out = []
        for r in self.records:
            row: List[float] = [r.step, r.lr, r.loss_det, r.loss_img, r.loss_inst, r.loss_total]
            row += list(r.n_groups_source) + [r.n_groups_target]
            row += list(r.smoothed_groups_source) + [r.smoothed_groups_target]
            row += list(r.disc_acc_image) + list(r.disc_acc_instance)
            row += list(r.source_accuracy) + [r.target_accuracy]
            row += list(r.centroid_gaps)
            out.append(row)
        return out


@dataclass(frozen=True)
class SweepRow:
    """Final metrics of one radius setting in a tau sweep."""

    tau: float
    target_accuracy: float
    mean_group_count: float


def _adapted_proposals(sample: ImageSample, adapted: np.ndarray) -> List[Proposal]:
    return [
        Proposal(feature=adapted[i], pseudo_label=p.pseudo_label, box=p.box, domain=p.domain)
        for i, p in enumerate(sample.proposals)
    ]


def _scatter(groups: Sequence[GroupEmbedding], grads: np.ndarray, out: np.ndarray, scale: float):
    """Distribute group-vector grads onto member rows of a mean pooling."""
    for g, grad in zip(groups, grads):
        out[list(g.members)] += (scale / g.member_count) * grad


def _image_group(adapted: np.ndarray) -> List[GroupEmbedding]:
    """The image-level 'group': one mean vector over every proposal."""
    n = adapted.shape[0]
    if n == 0:
        return []
    return [
        GroupEmbedding(
            vector=adapted.mean(axis=0), member_count=n, members=tuple(range(n))
        )
    ]


def _zeros_for(groups: Sequence[GroupEmbedding]) -> np.ndarray:
    return np.zeros((len(groups), groups[0].vector.shape[0] if groups else 0))


def _split_by_tag(groups: Sequence[GroupEmbedding]) -> Dict[int, List[int]]:
    by_tag: Dict[int, List[int]] = {}
    for i, g in enumerate(groups):
        by_tag.setdefault(g.class_tag, []).append(i)
    return by_tag


def _contrastive_pair(
    src_groups: Sequence[GroupEmbedding],
    tgt_groups: Sequence[GroupEmbedding],
    mode: str,
    cspec_cm: ContrastiveSpec,
    cspec_nn: ContrastiveSpec,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Contrastive loss of one source-target pair under an aggregation mode.

    SG pairs groups by class tag; MG runs nearest-neighbor matching within
    each class present on both sides; class-agnostic modes match globally.
    """
    if mode == MODE_SG:
        return contrastive_class_matched(src_groups, tgt_groups, cspec_cm)
    if mode == MODE_MG:
        g0 = _zeros_for(src_groups)
        g1 = _zeros_for(tgt_groups)
        loss = 0.0
        src_by_tag = _split_by_tag(src_groups)
        tgt_by_tag = _split_by_tag(tgt_groups)
        for tag in sorted(set(src_by_tag) & set(tgt_by_tag)):
            si = src_by_tag[tag]
            ti = tgt_by_tag[tag]
            sub_loss, sub_g0, sub_g1 = contrastive_nn_matched(
                [src_groups[i] for i in si], [tgt_groups[i] for i in ti], cspec_nn
            )
            loss += sub_loss
            g0[si] += sub_g0
            g1[ti] += sub_g1
        return loss, g0, g1
    return contrastive_nn_matched(src_groups, tgt_groups, cspec_nn)


class _DiscLedger:
    """Tracks which discriminators saw batches this step, for normalization."""

    def __init__(self):
        self._seen: Dict[int, Tuple[DenseNet, int]] = {}

    def add(self, disc: DenseNet):
        net, count = self._seen.get(id(disc), (disc, 0))
        self._seen[id(disc)] = (net, count + 1)

    def step_all(self, lr: float, momentum: float, weight_decay: float):
        for net, count in self._seen.values():
            net.scale_grads(1.0 / count)
            net.sgd_step(lr, momentum=momentum, weight_decay=weight_decay)
        self._seen.clear()


def _adversarial_level(
    src_groups_per_k: List[List[GroupEmbedding]],
    tgt_groups: List[GroupEmbedding],
    level: str,
    config: ExperimentConfig,
    bank: DiscriminatorBank,
    grl_spec: GrlSpec,
    ledger: _DiscLedger,
) -> Tuple[float, List[np.ndarray], np.ndarray]:
    """One level of adversarial alignment across all source-target pairs.

    The level loss averages every source presentation and the (routed-
    averaged) target presentation. Returned grads are reversed and carry
    those averaging factors but not the lam1/lam2 weights.
    """
    n_src = config.n_sources
    dim = config.feature_dim
    share = 1.0 / (n_src + 1)
    loss = 0.0
    src_grads = []
    for k, groups in enumerate(src_groups_per_k):
        discs = route(config.topology, bank, DomainId.source(k), level)
        l_k, emb_grads, _ = adversarial_loss(groups, 0.0, discs[0], grl_spec)
        if groups:
            ledger.add(discs[0])
        loss += share * l_k
        src_grads.append(share * emb_grads)
    routed = route(config.topology, bank, DomainId.target(), level)
    tgt_grads = np.zeros((len(tgt_groups), dim))
    tgt_loss = 0.0
    for disc in routed:
        l_t, emb_grads, _ = adversarial_loss(tgt_groups, 1.0, disc, grl_spec)
        if tgt_groups:
            ledger.add(disc)
        tgt_loss += l_t / len(routed)
        tgt_grads += emb_grads / len(routed)
    loss += share * tgt_loss
    return loss, src_grads, share * tgt_grads


def _contrastive_level(
    src_groups_per_k: List[List[GroupEmbedding]],
    tgt_groups: List[GroupEmbedding],
    mode: str,
    config: ExperimentConfig,
    cspec_cm: ContrastiveSpec,
    cspec_nn: ContrastiveSpec,
) -> Tuple[float, List[np.ndarray], np.ndarray]:
    """One level of contrastive alignment, averaged over source-target pairs."""
    n_src = config.n_sources
    dim = config.feature_dim
    loss = 0.0
    src_grads = []
    tgt_grads = np.zeros((len(tgt_groups), dim))
    for groups in src_groups_per_k:
        l_k, g0, g1 = _contrastive_pair(groups, tgt_groups, mode, cspec_cm, cspec_nn)
        loss += l_k / n_src
        src_grads.append(g0 / n_src)
        if len(tgt_groups):
            tgt_grads += g1 / n_src
    return loss, src_grads, tgt_grads


def train(config: ExperimentConfig) -> MetricsTrace:
    """Run one experiment to completion and return its metrics trace."""
    n_src = config.n_sources
    m = config.feature_dim

    train_src = [
        generate(spec, config.n_train_images, derive_seed(config.seed, (_SLOT_TRAIN_SOURCE, k)), DomainId.source(k))
        for k, spec in enumerate(config.source_specs)
    ]
    train_tgt = generate(
        config.target_spec, config.n_train_images, derive_seed(config.seed, (_SLOT_TRAIN_TARGET,)), DomainId.target()
    )
    eval_src = [
        generate(spec, config.n_eval_images, derive_seed(config.seed, (_SLOT_EVAL_SOURCE, k)), DomainId.source(k))
        for k, spec in enumerate(config.source_specs)
    ]
    eval_tgt = generate(
        config.target_spec, config.n_eval_images, derive_seed(config.seed, (_SLOT_EVAL_TARGET,)), DomainId.target()
    )
    if config.metric == SPATIAL_IOU:
        for ds in train_src + [train_tgt]:
            for s in ds.samples:
                if any(p.box is None for p in s.proposals):
                    raise ValueError("spatial metric requires boxes on every proposal")

    adapter = DenseNet(
        [m] + list(config.adapter_hidden) + [m],
        ["relu"] * len(config.adapter_hidden) + ["identity"],
        seed=config.seed,
        key=(_SLOT_ADAPTER,),
    )
    classifier = DenseNet([m, config.n_classes], ["identity"], seed=config.seed, key=(_SLOT_CLASSIFIER,))
    bank = DiscriminatorBank.build(config.topology, m, config.disc_hidden, seed=config.seed)
    rng_loop = seeded_rng(config.seed, (_SLOT_LOOP,))
    grl_spec = GrlSpec(config.grl_lam)
    cspec_cm = ContrastiveSpec(CLASS_MATCHED, config.margin, config.symmetrize_contrastive)
    cspec_nn = ContrastiveSpec(NEAREST_NEIGHBOR, config.margin, config.symmetrize_contrastive)
    ledger = _DiscLedger()

    sm_src: List[Optional[float]] = [None] * n_src
    sm_tgt: Optional[float] = None
    records: List[EvalRecord] = []
    total = config.total_steps

    for step in range(total):
        lr = config.lr_at(step)
        src_samples = [ds.samples[int(rng_loop.integers(0, len(ds)))] for ds in train_src]
        tgt_sample = train_tgt.samples[int(rng_loop.integers(0, len(train_tgt)))]

        adapted_src, tapes_src, dA_src = [], [], []
        for s in src_samples:
            raw = np.stack([p.feature for p in s.proposals]) if len(s) else np.zeros((0, m))
            a, tape = adapter.forward(raw)
            adapted_src.append(a)
            tapes_src.append(tape)
            dA_src.append(np.zeros_like(a))
        raw_t = (
            np.stack([p.feature for p in tgt_sample.proposals]) if len(tgt_sample) else np.zeros((0, m))
        )
        adapted_tgt, tape_tgt = adapter.forward(raw_t)
        dA_tgt = np.zeros_like(adapted_tgt)

        # Proxy task on the source side, every source weighted equally.
        det_loss = 0.0
        for k, s in enumerate(src_samples):
            labels = np.asarray(s.true_labels, dtype=np.int64)
            ce, dfeats = softmax_ce(classifier, adapted_src[k], labels)
            det_loss += ce / n_src
            dA_src[k] += dfeats / n_src

        # Instance groups per domain on the adapted features.
        groups_src: List[List[GroupEmbedding]] = []
        for k, s in enumerate(src_samples):
            groups_src.append(
                cluster_by_mode(_adapted_proposals(s, adapted_src[k]), config.mode, config.metric, config.stop)
                if len(s)
                else []
            )
        groups_tgt = (
            cluster_by_mode(_adapted_proposals(tgt_sample, adapted_tgt), config.mode, config.metric, config.stop)
            if len(tgt_sample)
            else []
        )

        for k in range(n_src):
            c = len(groups_src[k])
            sm_src[k] = float(c) if sm_src[k] is None else SMOOTH_GAMMA * sm_src[k] + (1 - SMOOTH_GAMMA) * c
        c = len(groups_tgt)
        sm_tgt = float(c) if sm_tgt is None else SMOOTH_GAMMA * sm_tgt + (1 - SMOOTH_GAMMA) * c

        inst_loss = 0.0
        if config.lam2 > 0.0:
            if config.alignment == ADVERSARIAL:
                inst_loss, g_src, g_tgt = _adversarial_level(
                    groups_src, groups_tgt, INSTANCE_LEVEL, config, bank, grl_spec, ledger
                )
            else:
                inst_loss, g_src, g_tgt = _contrastive_level(
                    groups_src, groups_tgt, config.mode, config, cspec_cm, cspec_nn
                )
            for k in range(n_src):
                _scatter(groups_src[k], g_src[k], dA_src[k], config.lam2)
            _scatter(groups_tgt, g_tgt, dA_tgt, config.lam2)

        img_loss = 0.0
        if config.image_level and config.lam1 > 0.0:
            img_src = [_image_group(a) for a in adapted_src]
            img_tgt = _image_group(adapted_tgt)
            if config.alignment == ADVERSARIAL:
                img_loss, gi_src, gi_tgt = _adversarial_level(
                    img_src, img_tgt, IMAGE_LEVEL, config, bank, grl_spec, ledger
                )
            else:
                img_loss, gi_src, gi_tgt = _contrastive_level(
                    img_src, img_tgt, MODE_MG_CA, config, cspec_cm, cspec_nn
                )
            for k in range(n_src):
                _scatter(img_src[k], gi_src[k], dA_src[k], config.lam1)
            _scatter(img_tgt, gi_tgt, dA_tgt, config.lam1)

        for k in range(n_src):
            adapter.backward(tapes_src[k], dA_src[k])
        adapter.backward(tape_tgt, dA_tgt)

        classifier.scale_grads(1.0 / n_src)
        classifier.sgd_step(lr, momentum=config.momentum, weight_decay=config.weight_decay)
        adapter.sgd_step(lr, momentum=config.momentum, weight_decay=config.weight_decay)
        ledger.step_all(lr, config.momentum, config.weight_decay)

        if (step + 1) % config.eval_every == 0 or step + 1 == total:
            records.append(
                _evaluate(
                    step + 1,
                    lr,
                    (det_loss, img_loss, inst_loss),
                    ([len(g) for g in groups_src], len(groups_tgt)),
                    (list(sm_src), sm_tgt),
                    config,
                    adapter,
                    classifier,
                    bank,
                    eval_src,
                    eval_tgt,
                )
            )

    return MetricsTrace(config=config, records=tuple(records))


def _eval_groups(
    dataset: SyntheticDataset, adapter: DenseNet, config: ExperimentConfig
) -> Tuple[List[GroupEmbedding], np.ndarray, np.ndarray]:
    """Groups, adapted features and labels over every image of a dataset."""
    groups: List[GroupEmbedding] = []
    feats: List[np.ndarray] = []
    labels: List[int] = []
    for s in dataset.samples:
        if not len(s):
            continue
        raw = np.stack([p.feature for p in s.proposals])
        adapted = adapter(raw)
        feats.append(adapted)
        labels.extend(s.true_labels)
        groups.extend(cluster_by_mode(_adapted_proposals(s, adapted), config.mode, config.metric, config.stop))
    stacked = np.concatenate(feats) if feats else np.zeros((0, config.feature_dim))
    return groups, stacked, np.asarray(labels, dtype=np.int64)


def _eval_image_groups(dataset: SyntheticDataset, adapter: DenseNet) -> List[GroupEmbedding]:
    out = []
    for s in dataset.samples:
        if not len(s):
            continue
        adapted = adapter(np.stack([p.feature for p in s.proposals]))
        out.extend(_image_group(adapted))
    return out


def _disc_accuracies(
    level: str,
    per_source_groups: List[List[GroupEmbedding]],
    tgt_groups: List[GroupEmbedding],
    config: ExperimentConfig,
    bank: DiscriminatorBank,
) -> Tuple[float, ...]:
    """Held-out accuracy of each discriminator on the groups routed to it."""
    n_discs = config.topology.n_discs(level)
    hits: List[List[bool]] = [[] for _ in range(n_discs)]
    discs = bank.image_discs if level == IMAGE_LEVEL else bank.instance_discs

    def collect(groups: List[GroupEmbedding], domain: DomainId, label: float):
        if not groups:
            return
        routed = route(config.topology, bank, domain, level)
        x = np.stack([g.vector for g in groups])
        for disc in routed:
            p = disc(x)[:, 0]
            idx = discs.index(disc)
            hits[idx].extend(((p > 0.5) == bool(label)).tolist())

    for k, groups in enumerate(per_source_groups):
        collect(groups, DomainId.source(k), 0.0)
    collect(tgt_groups, DomainId.target(), 1.0)
    return tuple(float(np.mean(h)) if h else float("nan") for h in hits)


def _evaluate(
    step: int,
    lr: float,
    losses: Tuple[float, float, float],
    counts: Tuple[List[int], int],
    smoothed: Tuple[List[float], float],
    config: ExperimentConfig,
    adapter: DenseNet,
    classifier: DenseNet,
    bank: DiscriminatorBank,
    eval_src: List[SyntheticDataset],
    eval_tgt: SyntheticDataset,
) -> EvalRecord:
    det_loss, img_loss, inst_loss = losses

    src_groups, src_feats, src_labels = [], [], []
    for ds in eval_src:
        g, f, l = _eval_groups(ds, adapter, config)
        src_groups.append(g)
        src_feats.append(f)
        src_labels.append(l)
    tgt_group_list, tgt_feats, tgt_labels = _eval_groups(eval_tgt, adapter, config)

    src_img_groups = [_eval_image_groups(ds, adapter) for ds in eval_src]
    tgt_img_groups = _eval_image_groups(eval_tgt, adapter)

    disc_img = _disc_accuracies(IMAGE_LEVEL, src_img_groups, tgt_img_groups, config, bank)
    disc_inst = _disc_accuracies(INSTANCE_LEVEL, src_groups, tgt_group_list, config, bank)

    source_acc = tuple(
        classify_accuracy(classifier, f, l) if f.shape[0] else float("nan")
        for f, l in zip(src_feats, src_labels)
    )
    target_acc = (
        classify_accuracy(classifier, tgt_feats, tgt_labels) if tgt_feats.shape[0] else float("nan")
    )

    all_src_feats = np.concatenate(src_feats) if src_feats else np.zeros((0, config.feature_dim))
    all_src_labels = np.concatenate(src_labels) if src_labels else np.zeros(0, dtype=np.int64)
    gaps = []
    for c in range(config.n_classes):
        s_mask = all_src_labels == c
        t_mask = tgt_labels == c
        if s_mask.any() and t_mask.any():
            gap = float(np.linalg.norm(all_src_feats[s_mask].mean(axis=0) - tgt_feats[t_mask].mean(axis=0)))
        else:
            gap = float("nan")
        gaps.append(gap)

    return EvalRecord(
        step=step,
        lr=lr,
        loss_det=det_loss,
        loss_img=img_loss,
        loss_inst=inst_loss,
        loss_total=composite_loss(det_loss, img_loss, inst_loss, config.lam1, config.lam2),
        n_groups_source=tuple(counts[0]),
        n_groups_target=counts[1],
        smoothed_groups_source=tuple(smoothed[0]),
        smoothed_groups_target=smoothed[1],
        disc_acc_image=disc_img,
        disc_acc_instance=disc_inst,
        source_accuracy=source_acc,
        target_accuracy=target_acc,
        centroid_gaps=tuple(gaps),
    )


def sweep_tau(base: ExperimentConfig, taus: Sequence[float]) -> List[SweepRow]:
    """Re-train at each radius and collect final accuracy and group counts.

    mean_group_count averages the final smoothed instance-level counts over
    all domains.
    """
    if not isinstance(base.stop, RadiusThreshold):
        raise ValueError("tau sweeps need a RadiusThreshold stop rule")
    if len(taus) == 0:
        raise ValueError("need at least one tau")
    rows = []
    for tau in taus:
        cfg = dataclasses.replace(base, stop=RadiusThreshold(float(tau)))
        trace = train(cfg)
        rec = trace.final
        mean_count = (sum(rec.smoothed_groups_source) + rec.smoothed_groups_target) / (
            base.n_sources + 1
        )
        rows.append(
            SweepRow(tau=float(tau), target_accuracy=rec.target_accuracy, mean_group_count=mean_count)
        )
    return rows


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def report(trace: MetricsTrace, out_dir: str) -> Tuple[str, str]:
    """Write metrics.csv and summary.json for one trace; returns their paths.

    CSV floats use repr formatting, so parsing a row back reproduces the
    recorded values exactly. The summary echoes the config and final record
    and validates against the shipped summary_schema.json.
    """
    if not trace.records:
        raise ValueError("cannot report an empty trace")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    cols = trace.columns()
    lines = [",".join(cols)]
    for row in trace.rows():
        lines.append(",".join(_fmt(v) for v in row))
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    final = {col: val for col, val in zip(cols, trace.rows()[-1])}
    for key, val in final.items():
        if isinstance(val, float) and np.isnan(val):
            final[key] = None
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "seed": trace.config.seed,
        "config": trace.config.to_dict(),
        "final": final,
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, summary_path


def write_sweep_csv(rows: Sequence[SweepRow], path: str) -> str:
    if not rows:
        raise ValueError("cannot write an empty sweep")
    lines = ["tau,target_accuracy,mean_group_count"]
    for r in rows:
        lines.append(f"{_fmt(r.tau)},{_fmt(r.target_accuracy)},{_fmt(r.mean_group_count)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _axis_means(n_classes: int, dim: int, scale: float) -> np.ndarray:
    means = np.zeros((n_classes, dim))
    for c in range(n_classes):
        means[c, c] = scale
    return means


def _paired_axis_means(n_classes: int, dim: int, scale: float) -> np.ndarray:
    # Classes come in +/- pairs on a shared axis, so a mislabeled proposal
    # can sit a full two scales away from its tag's true mean.
    means = np.zeros((n_classes, dim))
    for c in range(n_classes):
        means[c, c // 2] = scale if c % 2 == 0 else -scale
    return means


def _vec(dim: int, **components: float) -> np.ndarray:
    v = np.zeros(dim)
    for name, val in components.items():
        v[int(name[1:])] = val
    return v


def _alternating_shift(dim: int, n_axes: int, magnitude: float) -> np.ndarray:
    """+-magnitude on the first n_axes coordinates, alternating sign."""
    v = np.zeros(dim)
    for i in range(n_axes):
        v[i] = magnitude if i % 2 == 0 else -magnitude
    return v


_DIM = 64


def _efficacy_preset(seed: int) -> ExperimentConfig:
    # Two classes 3 sigma apart on axis 0; the target shift has norm 3 sigma
    # with a parallel part of 2 sigma, which pushes the shifted class-0 cloud
    # past the source decision boundary and costs an unadapted classifier
    # most of its accuracy on that class. The identity-initialized adapter
    # still recovers the correct correspondence: gradient descent deforms it
    # continuously toward the nearby shift-back map rather than a class swap.
    sigma = 1.0
    means = np.zeros((2, _DIM))
    means[1, 0] = 3.0
    base = dict(
        class_means=means,
        class_cov_scale=sigma,
        proposals_per_image=(8, 24),
        class_mix=np.array([0.5, 0.5]),
        label_noise=0.0,
        box_overlap_bias=0.8,
    )
    src = DomainSpec(shift=np.zeros(_DIM), **base)
    tgt = DomainSpec(shift=_vec(_DIM, e0=2.0, e1=float(np.sqrt(5.0))), **base)
    return ExperimentConfig(
        source_specs=(src,),
        target_spec=tgt,
        alignment=ADVERSARIAL,
        mode=MODE_MG_CA,
        metric=COSINE,
        stop=RadiusThreshold(0.8),
        lam1=0.2,
        lam2=0.4,
        lr_schedule=((2000, 1e-3), (1000, 1e-4)),
        seed=seed,
    )


def _eight_class_base(label_noise: float, box_overlap_bias: float) -> Dict:
    # Smaller sigma keeps within-class cosine distances clearly below the
    # between-class ones at this dimensionality, so radius grouping works.
    return dict(
        class_means=_axis_means(8, _DIM, 3.0),
        class_cov_scale=0.5,
        proposals_per_image=(8, 24),
        class_mix=np.full(8, 1.0 / 8.0),
        label_noise=label_noise,
        box_overlap_bias=box_overlap_bias,
    )


def _noisy_labels_preset(seed: int) -> ExperimentConfig:
    # Paired class poles make mislabeled proposals maximally misleading for
    # tag-driven grouping, and the heavy instance weight sits where the
    # unbounded contrastive pull turns unstable while the saturating
    # adversarial loss still trains cleanly.
    base = dict(
        class_means=_paired_axis_means(8, _DIM, 2.0),
        class_cov_scale=0.5,
        proposals_per_image=(8, 24),
        class_mix=np.full(8, 1.0 / 8.0),
        label_noise=0.2,
        box_overlap_bias=0.8,
    )
    shift = _alternating_shift(_DIM, 8, 0.8)
    src = DomainSpec(shift=np.zeros(_DIM), **base)
    tgt = DomainSpec(shift=shift, **base)
    return ExperimentConfig(
        source_specs=(src,),
        target_spec=tgt,
        alignment=ADVERSARIAL,
        mode=MODE_MG_CA,
        metric=COSINE,
        stop=RadiusThreshold(0.8),
        lam1=0.2,
        lam2=4.0,
        grl_lam=1.0,
        n_eval_images=256,
        lr_schedule=((1200, 1e-3), (600, 1e-4), (600, 3e-5)),
        seed=seed,
    )


def _dispersed_preset(seed: int) -> ExperimentConfig:
    # Same geometry as noisy_labels, but clean labels and nearly random boxes:
    # spatial grouping has no overlap signal to work with while feature
    # grouping is unaffected.
    cfg = _noisy_labels_preset(seed)
    src = dataclasses.replace(cfg.source_specs[0], label_noise=0.0, box_overlap_bias=0.15)
    tgt = dataclasses.replace(cfg.target_spec, label_noise=0.0, box_overlap_bias=0.15)
    return dataclasses.replace(cfg, source_specs=(src,), target_spec=tgt)


def _counts_preset(seed: int, n_classes: int) -> ExperimentConfig:
    if n_classes == 8:
        base = _eight_class_base(label_noise=0.0, box_overlap_bias=0.8)
        shift = _alternating_shift(_DIM, 8, 1.5 / np.sqrt(2.0))
    else:
        base = dict(
            class_means=_axis_means(1, _DIM, 3.0),
            class_cov_scale=0.5,
            proposals_per_image=(8, 24),
            class_mix=np.array([1.0]),
            label_noise=0.0,
            box_overlap_bias=0.8,
        )
        shift = _vec(_DIM, e1=1.5)
    src = DomainSpec(shift=np.zeros(_DIM), **base)
    tgt = DomainSpec(shift=shift, **base)
    return ExperimentConfig(
        source_specs=(src,),
        target_spec=tgt,
        alignment=ADVERSARIAL,
        mode=MODE_MG_CA,
        metric=COSINE,
        stop=RadiusThreshold(0.8),
        seed=seed,
    )


def _multisource_preset(seed: int) -> ExperimentConfig:
    # Target sits midway between the two sources, and each source
    # over-represents a complementary half of the classes, so no single
    # source covers the target's shift direction and class balance alone.
    base = _eight_class_base(label_noise=0.0, box_overlap_bias=0.8)
    mix0 = np.array([7.0] * 4 + [1.0] * 4)
    t_shift = _alternating_shift(_DIM, 8, 1.5 / np.sqrt(2.0))
    s0 = DomainSpec(shift=np.zeros(_DIM), **{**base, "class_mix": mix0 / mix0.sum()})
    s1 = DomainSpec(shift=2.0 * t_shift, **{**base, "class_mix": mix0[::-1] / mix0.sum()})
    tgt = DomainSpec(shift=t_shift, **base)
    return ExperimentConfig(
        source_specs=(s0, s1),
        target_spec=tgt,
        alignment=ADVERSARIAL,
        mode=MODE_MG_CA,
        metric=COSINE,
        stop=RadiusThreshold(0.8),
        topology=TopologySpec.from_name("shared", n_sources=2),
        seed=seed,
    )


PRESETS = {
    "efficacy": _efficacy_preset,
    "noisy_labels": _noisy_labels_preset,
    "dispersed": _dispersed_preset,
    "counts_c8": lambda seed: _counts_preset(seed, 8),
    "counts_c1": lambda seed: _counts_preset(seed, 1),
    "multisource": _multisource_preset,
}


def make_preset(name: str, seed: int = 0) -> ExperimentConfig:
    """A named, ready-to-train scenario; tweak fields with dataclasses.replace."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return PRESETS[name](seed)
