"""Similarity-grouped domain alignment on synthetic two-domain features.

Proposal features are grouped bottom-up by visual or spatial similarity,
pooled into group embeddings, and aligned across domains either
adversarially (domain discriminators behind a gradient-reversal layer) or
with a max-margin contrastive loss. A small synthetic data generator plus
a training runner exercise the machinery end to end at desk scale.
"""

from .clustering import (
    COSINE,
    MODE_MG,
    MODE_MG_CA,
    MODE_PROPOSALS,
    MODE_SG,
    SPATIAL_IOU,
    ClusterAssignment,
    FixedCount,
    GroupEmbedding,
    RadiusThreshold,
    agglomerate,
    cluster_by_mode,
    complete_linkage,
    cosine_distance,
    group_embeddings,
    iou_distance,
    pairwise_distances,
)
from .core import Box, DomainId, ImageSample, Proposal, derive_seed, l2_norm, seeded_rng
from .losses import (
    AlignmentBatch,
    ContrastiveSpec,
    adversarial_loss,
    composite_loss,
    contrastive_class_matched,
    contrastive_nn_matched,
)
from .nn import DenseNet, GrlSpec, bce_loss, grl
from .runner import (
    EvalRecord,
    ExperimentConfig,
    MetricsTrace,
    SweepRow,
    make_preset,
    report,
    sweep_tau,
    train,
    write_sweep_csv,
)
from .simulate import (
    DomainSpec,
    SyntheticDataset,
    classify_accuracy,
    generate,
    proxy_task_loss,
    softmax_ce,
    target_accuracy,
)
from .topology import DiscriminatorBank, TopologySpec, route

__version__ = "0.1.0"

__all__ = [
    "AlignmentBatch",
    "Box",
    "COSINE",
    "ClusterAssignment",
    "MODE_MG",
    "MODE_MG_CA",
    "MODE_PROPOSALS",
    "MODE_SG",
    "SPATIAL_IOU",
    "ContrastiveSpec",
    "DenseNet",
    "DiscriminatorBank",
    "DomainId",
    "DomainSpec",
    "EvalRecord",
    "ExperimentConfig",
    "FixedCount",
    "GroupEmbedding",
    "GrlSpec",
    "ImageSample",
    "MetricsTrace",
    "Proposal",
    "RadiusThreshold",
    "SweepRow",
    "SyntheticDataset",
    "TopologySpec",
    "adversarial_loss",
    "agglomerate",
    "bce_loss",
    "classify_accuracy",
    "cluster_by_mode",
    "complete_linkage",
    "composite_loss",
    "contrastive_class_matched",
    "contrastive_nn_matched",
    "cosine_distance",
    "derive_seed",
    "generate",
    "grl",
    "group_embeddings",
    "iou_distance",
    "l2_norm",
    "make_preset",
    "pairwise_distances",
    "proxy_task_loss",
    "report",
    "route",
    "seeded_rng",
    "softmax_ce",
    "sweep_tau",
    "target_accuracy",
    "train",
    "write_sweep_csv",
]
