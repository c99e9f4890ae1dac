"""Weakly-supervised part learning with anchor-induced geometry.

A toolkit that learns mid-level anchor detectors from image-level labels,
embeds region appearance and anchor-relative geometry in one joint space,
trains semantic part detectors by multiple-instance learning, and exports
a navigable atlas of parts and cross-image matches.
"""

__version__ = "0.1.0"

from .anchors import (
    AnchorBank,
    AnchorHyperParams,
    WeakImage,
    WeakImageSet,
    anchor_objective,
    anchor_objective_grad,
    detect_anchors,
    detect_anchors_all,
    train_anchors,
)
from .atlas import export_atlas
from .embeddings import (
    AnchorDetections,
    DescriptorStore,
    Detection,
    EmbeddingConfig,
    ImageRecord,
    context_region,
    embed,
    embed_all,
    embedding_dim,
    geometric_embed,
    joint_embed,
)
from .errors import (
    ConfigError,
    DataError,
    InvalidRegionError,
    MissingProposalError,
    NumericError,
    PartAtlasError,
)
from .evalbench import (
    GroundTruth,
    GTBox,
    average_precision,
    corloc,
    grid_encode,
    grid_search_lambda,
    match_benchmark,
    match_regions,
)
from .fileio import (
    AtlasEdge,
    AtlasGraph,
    AtlasNode,
    load_atlas,
    load_bank,
    load_dataset,
    load_descriptors,
    load_model,
    save_atlas,
    save_bank,
    save_dataset,
    save_descriptors,
    save_model,
)
from .geometry import OverlapConfig, Region, gram_matrix, iou, rho, smooth_inner
from .mil import (
    EmbeddedDataset,
    ExemplarSpec,
    MilConfig,
    PartModel,
    detect_part,
    embed_dataset,
    mil_objective,
    relocalize,
    train_part,
)
from .synth import (
    SyntheticDataset,
    SyntheticProfile,
    congruent_profile,
    generate_synthetic,
    nested_extent_profile,
    standard_profile,
    two_pattern_set,
)
