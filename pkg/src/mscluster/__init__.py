"""Cluster-coarsened multiscale reduced-order solver.

Realizations of a heterogeneous elliptic coefficient are grouped, per coarse
neighborhood, by a learned clustering of their local patches; each cluster
precomputes one set of spectral multiscale basis functions from its average
field, so new realizations are solved with a cheap feed-forward assignment
and a small Galerkin system instead of fresh local spectral problems.
"""

from .errors import (
    DimensionMismatchError,
    EigenError,
    MsclusterError,
    PretrainError,
    RankDeficiencyError,
    SolverError,
    TrainingError,
)
from .grid import (
    CoarseGrid,
    FineGrid,
    Neighborhood,
    PartitionOfUnity,
    all_neighborhoods,
    assemble_form,
    build_grids,
    load_vector,
    mass_matrix,
    neighborhood,
    partition_of_unity,
)
from .field import (
    ChannelTemplate,
    FieldConfig,
    Patch,
    PermeabilityField,
    mean_field,
    read_field,
    restrict,
    sample_field,
    write_field,
)
from .fem import Solution, error_ratio, read_solution, solve_fine, write_solution
from .gmsfem import (
    OfflineBasis,
    SnapshotSpace,
    offline_basis,
    offline_basis_calls,
    read_basis,
    reduced_solve,
    snapshot_space,
    solve_coarse,
    write_basis,
)
from .nn import (
    AdamState,
    Network,
    Tensor,
    adam_step,
    backward,
    forward,
    grad_check,
    load_model,
    save_model,
)
from .cluster import (
    ClusterModel,
    GenerativeModel,
    TrainingConfig,
    assign,
    kmeans,
    load_cluster_model,
    loss_cluster,
    loss_feature,
    loss_recon,
    pretrain_adversary,
    save_cluster_model,
    solve_clustered,
    train_generative,
    train_neighborhood,
)
from .pipeline import (
    ExperimentSpec,
    cmd_ablate,
    cmd_compare,
    cmd_generate,
    cmd_sweep_clusters,
    cmd_train,
    parse_config,
    spec_from_file,
)

__version__ = "0.1.0"
