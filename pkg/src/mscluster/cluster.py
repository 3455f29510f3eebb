"""Learned coarsening of the realization space, one model per coarse node.

An encoder compresses a local coefficient patch to a latent code; a
generator maps the code to that patch's first multiscale basis vector.  The
training loss combines within-cluster spread of generated bases, plain
reconstruction error against precomputed bases, and a perceptual term that
compares intermediate activations of a frozen pretrained adversary network.
K-means on the latent codes is re-run every epoch; training stops once the
assignment has been stable for a configured number of epochs.  Each final
cluster stores the average patch and its precomputed offline basis so test
realizations are solved without any new spectral problem.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, PretrainError, TrainingError
from .field import Patch, mean_field
from .gmsfem import OfflineBasis, offline_basis, reduced_solve, snapshot_space
from .grid import CoarseGrid, Neighborhood, PartitionOfUnity, neighborhood
from .nn import (
    AdamState,
    Conv2d,
    Dense,
    Flatten,
    LeakyReLU,
    Network,
    Reshape,
    Resize,
    adam_step,
    dumps_model,
    loads_model,
)

__all__ = [
    "TrainingConfig",
    "ClusterModel",
    "GenerativeModel",
    "build_encoder",
    "build_generator",
    "build_adversary",
    "pretrain_adversary",
    "loss_cluster",
    "loss_recon",
    "loss_feature",
    "kmeans",
    "train_neighborhood",
    "train_generative",
    "assign",
    "cluster_choices",
    "clustered_columns",
    "solve_clustered",
    "save_cluster_model",
    "load_cluster_model",
    "normalize_patches",
]

log = logging.getLogger(__name__)

ADVERSARY_TAPS = ("tap1", "tap2")


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one neighborhood training job."""

    n_clusters: int
    cluster_weight: float = 1.0
    recon_weight: float = 1.0
    feature_weight: float = 1.0
    max_epochs: int = 200
    stable_epochs: int = 25
    taps: tuple[str, ...] = ADVERSARY_TAPS
    batch: str = "full"
    seed: int = 0
    learning_rate: float = 1e-3
    latent_dim: int = 16

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")
        if min(self.cluster_weight, self.recon_weight, self.feature_weight) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.stable_epochs <= self.max_epochs:
            raise ValueError("stability window must fit within max_epochs")
        if self.batch != "full":
            raise ValueError("only full-batch training is supported")


@dataclass(eq=False)
class ClusterModel:
    """Trained per-neighborhood model plus its precomputed cluster bases."""

    coarse_node: int
    encoder: Network
    generator: Network
    centroids: np.ndarray
    assignment: np.ndarray
    norm_lo: float
    norm_hi: float
    mean_patches: dict[int, Patch]
    bases: dict[int, OfflineBasis]
    config: TrainingConfig
    nbhd: Neighborhood | None = None
    adversary: Network | None = None          # shared, frozen; not serialized
    history: list[dict] = dataclass_field(default_factory=list)  # not serialized

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]


# --------------------------------------------------------------------------
# networks


def build_encoder(cells_shape: tuple[int, int], latent_dim: int, seed: int) -> Network:
    """Two strided conv blocks then a dense map to the latent code."""
    rng = np.random.default_rng(seed)
    c1 = Conv2d(1, 8, ksize=3, stride=2, pad=1, rng=rng)
    c2 = Conv2d(8, 16, ksize=3, stride=2, pad=1, rng=rng)
    h = c2.out_size(c1.out_size(cells_shape[0]))
    w = c2.out_size(c1.out_size(cells_shape[1]))
    dense = Dense(16 * h * w, latent_dim, rng=rng)
    return Network([c1, LeakyReLU(), c2, LeakyReLU(), Flatten(), dense])


def build_generator(nodes_shape: tuple[int, int], latent_dim: int, seed: int) -> Network:
    """Dense seed then two resize-and-convolve blocks up to the basis shape."""
    rng = np.random.default_rng(seed)
    hn, wn = nodes_shape
    mid = ((hn + 1) // 2, (wn + 1) // 2)
    layers = [
        Dense(latent_dim, 16 * 3 * 3, rng=rng),
        LeakyReLU(),
        Reshape((16, 3, 3)),
        Resize(mid),
        Conv2d(16, 8, ksize=3, stride=1, pad=1, rng=rng),
        LeakyReLU(),
        Resize((hn, wn)),
        Conv2d(8, 1, ksize=3, stride=1, pad=1, rng=rng),
        Flatten(),
    ]
    return Network(layers)


def build_adversary(seed: int) -> Network:
    """Fully convolutional reconstruction net; taps export the activations
    after the first and second conv blocks."""
    rng = np.random.default_rng(seed)
    layers = [
        Conv2d(1, 8, ksize=3, stride=1, pad=1, rng=rng),
        LeakyReLU(),
        Conv2d(8, 16, ksize=3, stride=1, pad=1, rng=rng),
        LeakyReLU(),
        Conv2d(16, 8, ksize=3, stride=1, pad=1, rng=rng),
        LeakyReLU(),
        Conv2d(8, 1, ksize=3, stride=1, pad=1, rng=rng),
    ]
    return Network(layers, taps={"tap1": 1, "tap2": 3})


# --------------------------------------------------------------------------
# losses


def loss_cluster(learnt: np.ndarray, assignment: np.ndarray, n_clusters: int) -> float:
    """Mean within-cluster squared spread of the generated bases.

    Averages, over the configured number of clusters, the per-cluster mean
    squared distance to the cluster mean; empty clusters contribute zero.
    """
    learnt = np.asarray(learnt, dtype=float)
    assignment = np.asarray(assignment)
    total = 0.0
    for cid in range(n_clusters):
        members = learnt[assignment == cid]
        if len(members) == 0:
            continue
        centered = members - members.mean(axis=0)
        total += float(np.sum(centered**2)) / len(members)
    return total / n_clusters


def _loss_cluster_grad(learnt, assignment, n_clusters):
    value = 0.0
    grad = np.zeros_like(learnt)
    for cid in range(n_clusters):
        idx = np.nonzero(assignment == cid)[0]
        if len(idx) == 0:
            continue
        centered = learnt[idx] - learnt[idx].mean(axis=0)
        value += float(np.sum(centered**2)) / len(idx)
        grad[idx] = (2.0 / (n_clusters * len(idx))) * centered
    return value / n_clusters, grad


def loss_recon(learnt: np.ndarray, targets: np.ndarray) -> float:
    """Mean (over samples) squared error against the precomputed bases."""
    learnt = np.asarray(learnt, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if learnt.shape != targets.shape:
        raise DimensionMismatchError(f"shapes {learnt.shape} vs {targets.shape}")
    return float(np.sum((learnt - targets) ** 2)) / learnt.shape[0]


def _loss_recon_grad(learnt, targets):
    diff = learnt - targets
    m = learnt.shape[0]
    return float(np.sum(diff**2)) / m, (2.0 / m) * diff


def loss_feature(
    learnt_images: np.ndarray,
    target_images: np.ndarray,
    adversary: Network,
    taps: tuple[str, ...] = ADVERSARY_TAPS,
) -> float:
    """Summed tap-activation mismatch between generated and true bases,
    averaged over samples.  Gradients never reach the adversary weights."""
    if not taps:
        raise ValueError("tap set must not be empty")
    unknown = set(taps) - set(adversary.taps)
    if unknown:
        raise ValueError(f"adversary has no taps {sorted(unknown)}")
    m = learnt_images.shape[0]
    _, taps_true = adversary.forward(target_images)
    true_vals = {name: taps_true[name] for name in taps}
    _, taps_learnt = adversary.forward(learnt_images)
    total = 0.0
    for name in taps:
        total += float(np.sum((taps_learnt[name] - true_vals[name]) ** 2))
    return total / m


def _loss_feature_grad(learnt_images, target_taps, adversary, taps):
    """Value and gradient with respect to the generated images; the target
    tap activations are precomputed once per regrouping."""
    m = learnt_images.shape[0]
    _, tap_vals = adversary.forward(learnt_images)
    value = 0.0
    tap_grads = {}
    for name in taps:
        diff = tap_vals[name] - target_taps[name]
        value += float(np.sum(diff**2))
        tap_grads[name] = (2.0 / m) * diff
    dinput = adversary.backward(None, tap_grads)
    return value / m, dinput


# --------------------------------------------------------------------------
# k-means


def _repair_empty(points, assignment, centroids, counts):
    """Reseed each empty cluster from the point currently farthest from its
    own centroid (lowest point index wins ties)."""
    for cid in np.nonzero(counts == 0)[0]:
        dists = np.sum((points - centroids[assignment]) ** 2, axis=1)
        moved = int(np.argmax(dists))
        src = assignment[moved]
        counts[src] -= 1
        counts[cid] += 1
        assignment[moved] = cid
        centroids[cid] = points[moved]
    return assignment, centroids, counts


def _centroids_from_assignment(points, assignment, k):
    d = points.shape[1]
    centroids = np.zeros((k, d))
    counts = np.bincount(assignment, minlength=k)
    np.add.at(centroids, assignment, points)
    nonzero = counts > 0
    centroids[nonzero] /= counts[nonzero, None]
    assignment, centroids, counts = _repair_empty(points, assignment.copy(), centroids, counts)
    # means must reflect any repairs
    centroids = np.zeros((k, d))
    np.add.at(centroids, assignment, points)
    counts = np.bincount(assignment, minlength=k)
    centroids[counts > 0] /= counts[counts > 0, None]
    return assignment, centroids


def _plus_plus_init(points, k, rng):
    m = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(m))]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[int(rng.integers(m))]
            continue
        r = rng.random() * total
        centroids[j] = points[int(np.searchsorted(np.cumsum(d2), r))]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    init_assignment: np.ndarray | None = None,
    seed: int = 0,
    max_iter: int = 300,
    trace: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations until the assignment is a fixed point.

    Warm-startable from a previous assignment; otherwise seeded k-means++.
    Distance ties go to the lowest cluster id; empty clusters are reseeded
    from the farthest-from-centroid point during the update step.  ``trace``
    (if a list) receives the inertia after every assignment step.
    """
    points = np.asarray(points, dtype=float)
    m = len(points)
    if not 1 <= k <= m:
        raise ValueError(f"cluster count {k} not in 1..{m}")
    if init_assignment is not None:
        assignment = np.asarray(init_assignment, dtype=int).copy()
        if assignment.shape != (m,) or assignment.min() < 0 or assignment.max() >= k:
            raise ValueError("invalid warm-start assignment")
        assignment, centroids = _centroids_from_assignment(points, assignment, k)
    else:
        rng = np.random.default_rng(seed)
        centroids = _plus_plus_init(points, k, rng)
        assignment = None

    for _ in range(max_iter):
        d2 = (
            np.sum(points**2, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_assignment = np.argmin(d2, axis=1)
        if trace is not None:
            inertia = float(np.sum((points - centroids[new_assignment]) ** 2))
            trace.append(inertia)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        assignment, centroids = _centroids_from_assignment(points, assignment, k)
    return assignment, centroids


# --------------------------------------------------------------------------
# adversary pretraining


def reconstruction_mse(net: Network, images: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for lo in range(0, len(images), chunk):
        batch = images[lo : lo + chunk]
        out, _ = net.forward(batch)
        total += float(np.sum((out - batch) ** 2))
    return total / len(images)


def pretrain_adversary(
    bases: np.ndarray,
    epochs: int = 300,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 128,
) -> Network:
    """Train the adversary to reproduce precomputed bases, then freeze it.

    ``bases`` is (m, h, w); all samples share one shape.  Fails if the final
    reconstruction error has not at least halved.
    """
    bases = np.asarray(bases, dtype=float)
    if bases.ndim != 3 or len(bases) < 2:
        raise ValueError("need at least two equally-shaped bases, as (m, h, w)")
    images = bases[:, None, :, :]
    net = build_adversary(seed)
    params = net.parameters()
    state = AdamState.for_params(params, lr=learning_rate)
    rng = np.random.default_rng([seed, 17])
    initial = reconstruction_mse(net, images)
    epoch_losses = []
    m = len(images)
    for _ in range(epochs):
        order = rng.permutation(m)
        batch_losses = []
        for lo in range(0, m, batch_size):
            batch = images[order[lo : lo + batch_size]]
            out, _ = net.forward(batch)
            diff = out - batch
            batch_losses.append(float(np.sum(diff**2)) / len(batch))
            net.backward((2.0 / len(batch)) * diff)
            adam_step(state, params)
        epoch_losses.append(float(np.mean(batch_losses)))
    final = reconstruction_mse(net, images)
    if final > 0.5 * initial:
        raise PretrainError(
            f"adversary reconstruction error went {initial:.6g} -> {final:.6g}; "
            "expected at least a 50% decrease"
        )
    net.frozen = True
    net.meta = {"initial_mse": initial, "final_mse": final, "epoch_losses": epoch_losses}
    return net


# --------------------------------------------------------------------------
# normalization


def normalize_patches(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Log then min-max; constants fixed on the training set so the channel
    contrast does not dominate the encoder."""
    x = np.log(values)
    if hi > lo:
        return (x - lo) / (hi - lo)
    return np.zeros_like(x)


def _fit_normalization(values: np.ndarray) -> tuple[float, float]:
    x = np.log(values)
    return float(x.min()), float(x.max())


# --------------------------------------------------------------------------
# training


def _patch_matrix(patches: list[Patch]) -> np.ndarray:
    shape = patches[0].cells_shape
    if any(p.cells_shape != shape for p in patches):
        raise DimensionMismatchError("patches must share one shape")
    return np.stack([p.values for p in patches])


def train_neighborhood(
    patches: list[Patch],
    targets: np.ndarray,
    adversary: Network,
    config: TrainingConfig,
    *,
    nbhd: Neighborhood,
    pou: PartitionOfUnity,
    basis_counts: tuple[int, ...] = (2, 3, 4),
    init_from: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
) -> ClusterModel:
    """Alternate gradient epochs with latent k-means until the assignment is
    stable, then average each cluster's patches and precompute their bases.

    ``targets`` holds the per-realization first basis vectors, row per
    sample.  ``init_from`` optionally seeds encoder/generator parameters
    from another neighborhood's trained model (transfer mode).
    """
    if not adversary.frozen:
        raise ValueError("adversary must be pretrained and frozen")
    m = len(patches)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (m, nbhd.n_nodes):
        raise DimensionMismatchError(
            f"targets {targets.shape} do not match {m} samples x {nbhd.n_nodes} nodes"
        )
    if config.n_clusters > m:
        raise ValueError(f"{config.n_clusters} clusters for {m} samples")

    raw = _patch_matrix(patches)
    lo, hi = _fit_normalization(raw)
    cells = nbhd.cells_shape
    X = normalize_patches(raw, lo, hi).reshape(m, 1, *cells)
    nodes = nbhd.nodes_shape
    target_images = targets.reshape(m, 1, *nodes)

    ss = np.random.SeedSequence([config.seed, nbhd.coarse_node])
    enc_seed, gen_seed, km_seed = (int(s) for s in ss.generate_state(3))
    encoder = build_encoder(cells, config.latent_dim, enc_seed)
    generator = build_generator(nodes, config.latent_dim, gen_seed)
    if init_from is not None:
        encoder.load_parameter_values(init_from[0])
        generator.load_parameter_values(init_from[1])

    params = encoder.parameters() + generator.parameters()
    state = AdamState.for_params(params, lr=config.learning_rate)

    adversary_values_before = adversary.copy_parameter_values()
    use_feature = config.feature_weight > 0 and len(config.taps) > 0
    if use_feature:
        _, taps_true = adversary.forward(target_images)
        target_taps = {name: taps_true[name] for name in config.taps}

    # initial clustering of the precomputed output bases
    assignment, _ = kmeans(targets, config.n_clusters, seed=km_seed)

    history: list[dict] = []
    centroids = None
    stable = 0
    for epoch in range(config.max_epochs):
        z, _ = encoder.forward(X)
        learnt, _ = generator.forward(z)

        c_val, c_grad = _loss_cluster_grad(learnt, assignment, config.n_clusters)
        r_val, r_grad = _loss_recon_grad(learnt, targets)
        if use_feature:
            a_val, a_img_grad = _loss_feature_grad(
                learnt.reshape(m, 1, *nodes), target_taps, adversary, config.taps
            )
            a_grad = a_img_grad.reshape(m, -1)
        else:
            a_val, a_grad = 0.0, 0.0
        total = (
            config.cluster_weight * c_val
            + config.recon_weight * r_val
            + config.feature_weight * a_val
        )
        if not np.isfinite(total):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} on patch {nbhd.coarse_node}: "
                f"cluster={c_val:.3e} recon={r_val:.3e} feature={a_val:.3e}"
            )
        d_learnt = (
            config.cluster_weight * c_grad
            + config.recon_weight * r_grad
            + config.feature_weight * a_grad
        )
        dz = generator.backward(d_learnt)
        encoder.backward(dz)
        adam_step(state, params)

        z_new, _ = encoder.forward(X)
        new_assignment, centroids = kmeans(
            z_new, config.n_clusters, init_assignment=assignment, seed=km_seed
        )
        changes = int(np.sum(new_assignment != assignment))
        assignment = new_assignment
        history.append(
            {
                "epoch": epoch,
                "loss_cluster": c_val,
                "loss_recon": r_val,
                "loss_feature": a_val,
                "total": total,
                "changes": changes,
            }
        )
        stable = stable + 1 if changes == 0 else 0
        if config.stable_epochs > 0 and stable >= config.stable_epochs:
            break

    after = adversary.copy_parameter_values()
    if any(not np.array_equal(a, b) for a, b in zip(adversary_values_before, after)):
        raise TrainingError("adversary parameters changed during training")

    mean_patches: dict[int, Patch] = {}
    bases: dict[int, OfflineBasis] = {}
    l_max = max(basis_counts)
    for cid in range(config.n_clusters):
        members = np.nonzero(assignment == cid)[0]
        if len(members) == 0:
            continue
        averaged = mean_field([patches[i] for i in members])
        mean_patches[cid] = averaged
        snap = snapshot_space(averaged, nbhd)
        bases[cid] = offline_basis(snap, averaged, pou, l_max, apply_pou=True)

    return ClusterModel(
        coarse_node=nbhd.coarse_node,
        encoder=encoder,
        generator=generator,
        centroids=centroids,
        assignment=assignment,
        norm_lo=lo,
        norm_hi=hi,
        mean_patches=mean_patches,
        bases=bases,
        config=config,
        nbhd=nbhd,
        adversary=adversary,
        history=history,
    )


@dataclass(eq=False)
class GenerativeModel:
    """Encoder/generator pair fit without the clustering term."""

    coarse_node: int
    encoder: Network
    generator: Network
    norm_lo: float
    norm_hi: float
    nbhd: Neighborhood
    history: list[dict] = dataclass_field(default_factory=list)

    def generate(self, patch: Patch) -> np.ndarray:
        """Predicted first basis vector for one patch."""
        x = normalize_patches(patch.values, self.norm_lo, self.norm_hi)
        z, _ = self.encoder.forward(x.reshape(1, 1, *patch.cells_shape))
        out, _ = self.generator.forward(z)
        return out[0]


def train_generative(
    patches: list[Patch],
    targets: np.ndarray,
    adversary: Network,
    *,
    nbhd: Neighborhood,
    recon_weight: float,
    feature_weight: float,
    epochs: int,
    seed: int = 0,
    learning_rate: float = 1e-3,
    latent_dim: int = 16,
    taps: tuple[str, ...] = ADVERSARY_TAPS,
) -> GenerativeModel:
    """Plain generative fit of the basis (no clustering term, fixed epoch
    budget); used for the adversary-effect comparison."""
    m = len(patches)
    raw = _patch_matrix(patches)
    lo, hi = _fit_normalization(raw)
    cells = nbhd.cells_shape
    nodes = nbhd.nodes_shape
    X = normalize_patches(raw, lo, hi).reshape(m, 1, *cells)
    targets = np.asarray(targets, dtype=float)

    ss = np.random.SeedSequence([seed, nbhd.coarse_node])
    enc_seed, gen_seed = (int(s) for s in ss.generate_state(2))
    encoder = build_encoder(cells, latent_dim, enc_seed)
    generator = build_generator(nodes, latent_dim, gen_seed)
    params = encoder.parameters() + generator.parameters()
    state = AdamState.for_params(params, lr=learning_rate)

    use_feature = feature_weight > 0 and len(taps) > 0
    if use_feature:
        _, taps_true = adversary.forward(targets.reshape(m, 1, *nodes))
        target_taps = {name: taps_true[name] for name in taps}

    history = []
    for epoch in range(epochs):
        z, _ = encoder.forward(X)
        learnt, _ = generator.forward(z)
        r_val, r_grad = _loss_recon_grad(learnt, targets)
        if use_feature:
            a_val, a_img_grad = _loss_feature_grad(
                learnt.reshape(m, 1, *nodes), target_taps, adversary, taps
            )
            a_grad = a_img_grad.reshape(m, -1)
        else:
            a_val, a_grad = 0.0, 0.0
        total = recon_weight * r_val + feature_weight * a_val
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at epoch {epoch} on patch {nbhd.coarse_node}")
        generator_grad = recon_weight * r_grad + feature_weight * a_grad
        dz = generator.backward(generator_grad)
        encoder.backward(dz)
        adam_step(state, params)
        history.append({"epoch": epoch, "loss_recon": r_val, "loss_feature": a_val, "total": total})

    return GenerativeModel(
        coarse_node=nbhd.coarse_node,
        encoder=encoder,
        generator=generator,
        norm_lo=lo,
        norm_hi=hi,
        nbhd=nbhd,
        history=history,
    )


# --------------------------------------------------------------------------
# inference


def _encode(model: ClusterModel, patch: Patch) -> np.ndarray:
    if model.nbhd is not None and patch.cells_shape != model.nbhd.cells_shape:
        raise DimensionMismatchError(
            f"patch shape {patch.cells_shape} does not match model {model.nbhd.cells_shape}"
        )
    x = normalize_patches(patch.values, model.norm_lo, model.norm_hi)
    x = x.reshape(1, 1, *patch.cells_shape)
    z, _ = model.encoder.forward(x)
    return z[0]


def assign(model: ClusterModel, patch: Patch) -> int:
    """Nearest centroid of the encoded patch (lowest id wins ties)."""
    z = _encode(model, patch)
    d2 = np.sum((model.centroids - z) ** 2, axis=1)
    return int(np.argmin(d2))


def cluster_choices(
    models: dict[int, ClusterModel], grid: CoarseGrid, field
) -> dict[int, int]:
    """Resolved cluster id per coarse node for one realization.

    When the assigned cluster ended training empty (no stored basis), the
    nearest non-empty cluster by centroid distance substitutes, with a log
    line."""
    from .field import restrict

    choices: dict[int, int] = {}
    for node_id in range(grid.n_nodes):
        if node_id not in models:
            raise DimensionMismatchError(f"no model for coarse node {node_id}")
        model = models[node_id]
        nbhd = model.nbhd if model.nbhd is not None else neighborhood(grid, node_id)
        patch = restrict(field, nbhd)
        cid = assign(model, patch)
        if cid not in model.bases:
            z = _encode(model, patch)
            order = np.argsort(np.sum((model.centroids - z) ** 2, axis=1))
            replacement = next((int(c) for c in order if int(c) in model.bases), None)
            if replacement is None:
                raise TrainingError(f"model for coarse node {node_id} has no usable cluster")
            log.warning(
                "coarse node %d: empty cluster %d hit, using nearest cluster %d",
                node_id,
                cid,
                replacement,
            )
            cid = replacement
        choices[node_id] = cid
    return choices


def clustered_columns(
    models: dict[int, ClusterModel], choices: dict[int, int], n_basis: int
) -> dict[int, tuple[Neighborhood, np.ndarray]]:
    columns = {}
    for node_id, cid in choices.items():
        model = models[node_id]
        basis = model.bases[cid]
        if n_basis > basis.n_basis:
            raise ValueError(f"requested {n_basis} basis vectors, model stores {basis.n_basis}")
        columns[node_id] = (model.nbhd, basis.vectors[:, :n_basis])
    return columns


def solve_clustered(
    models: dict[int, ClusterModel],
    grid: CoarseGrid,
    field,
    source_cells,
    n_basis: int,
    choices: dict[int, int] | None = None,
):
    """Assign each neighborhood of the new realization to a cluster and solve
    in the span of the precomputed bases; no spectral problem is touched."""
    if choices is None:
        choices = cluster_choices(models, grid, field)
    columns = clustered_columns(models, choices, n_basis)
    return reduced_solve(columns, grid, field, source_cells)


# --------------------------------------------------------------------------
# serialization (magic CLM1)


def _pack_f64(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return struct.pack("<I", arr.size) + arr.tobytes()


def _unpack_f64(buf, offset):
    n = struct.unpack_from("<I", buf, offset)[0]
    offset += 4
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).copy()
    return arr, offset + 8 * n


def save_cluster_model(model: ClusterModel, path: str | Path) -> None:
    header = {
        "coarse_node": model.coarse_node,
        "norm_lo": model.norm_lo,
        "norm_hi": model.norm_hi,
        "n_clusters": int(model.n_clusters),
        "m": int(len(model.assignment)),
        "config": {
            "n_clusters": model.config.n_clusters,
            "cluster_weight": model.config.cluster_weight,
            "recon_weight": model.config.recon_weight,
            "feature_weight": model.config.feature_weight,
            "max_epochs": model.config.max_epochs,
            "stable_epochs": model.config.stable_epochs,
            "taps": list(model.config.taps),
            "batch": model.config.batch,
            "seed": model.config.seed,
            "learning_rate": model.config.learning_rate,
            "latent_dim": model.config.latent_dim,
        },
    }
    chunks = [b"CLM1"]
    hb = json.dumps(header).encode()
    chunks.append(struct.pack("<I", len(hb)) + hb)
    for net in (model.encoder, model.generator):
        blob = dumps_model(net)
        chunks.append(struct.pack("<Q", len(blob)) + blob)
    k, d = model.centroids.shape
    chunks.append(struct.pack("<II", k, d) + np.ascontiguousarray(model.centroids, dtype="<f8").tobytes())
    chunks.append(
        struct.pack("<I", len(model.assignment))
        + np.ascontiguousarray(model.assignment, dtype="<i4").tobytes()
    )
    chunks.append(struct.pack("<I", k))
    for cid in range(k):
        patch = model.mean_patches.get(cid)
        basis = model.bases.get(cid)
        chunks.append(struct.pack("<i?", cid, patch is not None))
        if patch is not None:
            chunks.append(struct.pack("<II", *patch.cells_shape))
            chunks.append(_pack_f64(patch.values))
            chunks.append(struct.pack("<II?", basis.nbhd.n_nodes, basis.n_basis, basis.pou_applied))
            chunks.append(_pack_f64(basis.eigenvalues))
            chunks.append(_pack_f64(basis.vectors))
    Path(path).write_bytes(b"".join(chunks))


def load_cluster_model(path: str | Path, grid: CoarseGrid) -> ClusterModel:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != b"CLM1":
        raise ValueError(f"{path}: not a cluster model file")
    offset = 4
    hlen = struct.unpack_from("<I", buf, offset)[0]
    offset += 4
    header = json.loads(bytes(buf[offset : offset + hlen]).decode())
    offset += hlen
    nets = []
    for _ in range(2):
        blen = struct.unpack_from("<Q", buf, offset)[0]
        offset += 8
        nets.append(loads_model(bytes(buf[offset : offset + blen])))
        offset += blen
    k, d = struct.unpack_from("<II", buf, offset)
    offset += 8
    centroids = np.frombuffer(buf, dtype="<f8", count=k * d, offset=offset).reshape(k, d).copy()
    offset += 8 * k * d
    m = struct.unpack_from("<I", buf, offset)[0]
    offset += 4
    assignment = np.frombuffer(buf, dtype="<i4", count=m, offset=offset).astype(int)
    offset += 4 * m
    nbhd = neighborhood(grid, header["coarse_node"])
    n_blocks = struct.unpack_from("<I", buf, offset)[0]
    offset += 4
    mean_patches: dict[int, Patch] = {}
    bases: dict[int, OfflineBasis] = {}
    for _ in range(n_blocks):
        cid, present = struct.unpack_from("<i?", buf, offset)
        offset += 5
        if not present:
            continue
        rows, cols = struct.unpack_from("<II", buf, offset)
        offset += 8
        values, offset = _unpack_f64(buf, offset)
        mean_patches[cid] = Patch(values=values, cells_shape=(rows, cols))
        n_nodes, n_basis, applied = struct.unpack_from("<II?", buf, offset)
        offset += 9
        eigs, offset = _unpack_f64(buf, offset)
        vecs, offset = _unpack_f64(buf, offset)
        bases[cid] = OfflineBasis(
            nbhd=nbhd,
            eigenvalues=eigs,
            vectors=vecs.reshape(n_nodes, n_basis),
            pou_applied=applied,
        )
    cfg = TrainingConfig(
        n_clusters=header["config"]["n_clusters"],
        cluster_weight=header["config"]["cluster_weight"],
        recon_weight=header["config"]["recon_weight"],
        feature_weight=header["config"]["feature_weight"],
        max_epochs=header["config"]["max_epochs"],
        stable_epochs=header["config"]["stable_epochs"],
        taps=tuple(header["config"]["taps"]),
        batch=header["config"]["batch"],
        seed=header["config"]["seed"],
        learning_rate=header["config"]["learning_rate"],
        latent_dim=header["config"]["latent_dim"],
    )
    return ClusterModel(
        coarse_node=header["coarse_node"],
        encoder=nets[0],
        generator=nets[1],
        centroids=centroids,
        assignment=assignment,
        norm_lo=header["norm_lo"],
        norm_hi=header["norm_hi"],
        mean_patches=mean_patches,
        bases=bases,
        config=cfg,
        nbhd=nbhd,
    )
