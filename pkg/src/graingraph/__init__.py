"""Grain-structure evolution on periodic graphs of triple junctions and grains."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DegeneracyError,
    DegenerateCollapseError,
    GrainGraphError,
    GuardedFlipError,
    InputError,
    NumericError,
    PartitionError,
    ReconstructionError,
    TopologyError,
    WeightLoadError,
)
from .evolution import BaselinePredictor, EventLog, Prediction, Thresholds, Trajectory, identity_predict, rollout, update_graph
from .graph import (
    DomainSpec,
    FeatureSet,
    GrainGraph,
    denormalize_features,
    load_graph,
    neighbors,
    normalize_features,
    periodic_relative,
    save_graph,
    validate,
)
from .gnn import GNNPredictor, WeightBundle, classify, load_weights, random_bundle, regress, save_weights
from .metrics import (
    QoIReport,
    bce_loss,
    f1_at,
    ks_critical,
    ks_statistic,
    l2_loss,
    misclassification_rate,
    pr_auc,
    pr_curve,
    qoi_from_trajectory,
    rrmse,
)
from .raster import IndexImage, IndexVolume, graph_to_image, image_to_graph, read_gidx, read_gvol, write_gidx, write_gvol
from .substrate import SubstrateSpec, generate_substrate, periodic_voronoi
from .topology import apply_edge_flip, delta_z_policy, eliminate_grain, match_graphs, remove_grain
