"""Experiment harness: data generation, training, sweeps, comparisons.

All commands are deterministic functions of an :class:`ExperimentSpec`;
seeds for every realization and every training job derive from the spec, so
reruns write identical artifacts.  Output is plain text: a manifest, field
files, binary model blobs, per-neighborhood training logs, and CSVs.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cluster as cl
from . import fem, gmsfem
from .errors import MsclusterError
from .field import FieldConfig, Patch, PermeabilityField, read_field, restrict, sample_field, write_field
from .grid import CoarseGrid, Neighborhood, all_neighborhoods, build_grids, partition_of_unity
from .nn import Network, load_model, save_model

__all__ = [
    "ExperimentSpec",
    "parse_config",
    "spec_from_file",
    "write_manifest",
    "parse_manifest",
    "write_csv",
    "read_csv",
    "cmd_generate",
    "cmd_train",
    "cmd_sweep_clusters",
    "cmd_compare",
    "cmd_ablate",
    "worker_count",
]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


@dataclass(frozen=True)
class ExperimentSpec:
    """Desk-scale defaults; the paper-scale setup is expressible by config."""

    fine_cells: int = 40
    coarse_factor: int = 5
    n_train: int = 100
    n_test: int = 50
    cluster_counts: tuple[int, ...] = (2, 4, 6, 8)
    basis_counts: tuple[int, ...] = (2, 3, 4)
    train_seed_base: int = 1000
    test_seed_base: int = 9000
    seed: int = 7
    amp_levels: int = 11
    channel_value: float = 1000.0
    latent_dim: int = 16
    learning_rate: float = 1e-3
    cluster_weight: float = 1.0
    recon_weight: float = 1.0
    feature_weight: float = 1.0
    max_epochs: int = 150
    stable_epochs: int = 20
    adversary_epochs: int = 300
    adversary_samples: int = 1000
    ablate_epochs: int = 200
    transfer_init: bool = False
    out_dir: str = "out"

    def __post_init__(self):
        if not self.cluster_counts or not self.basis_counts:
            raise ValueError("cluster and basis sweeps must be non-empty")
        if self.fine_cells % self.coarse_factor != 0:
            raise ValueError("coarse factor must divide the fine cell count")
        train = self.train_seeds()
        test = self.test_seeds()
        if set(train) & set(test):
            raise ValueError("training and test seed ranges overlap")

    def train_seeds(self) -> list[int]:
        return [self.train_seed_base + i for i in range(self.n_train)]

    def test_seeds(self) -> list[int]:
        return [self.test_seed_base + i for i in range(self.n_test)]

    def field_config(self) -> FieldConfig:
        grid = build_grids(self.fine_cells, self.coarse_factor)
        return FieldConfig(
            grid=grid.fine,
            amp_levels=self.amp_levels,
            channel_value=self.channel_value,
            base_seed=self.seed,
        )

    def grid(self) -> CoarseGrid:
        return build_grids(self.fine_cells, self.coarse_factor)


def _coerce(raw: str, type_hint):
    raw = raw.strip()
    if type_hint is int:
        return int(raw)
    if type_hint is float:
        return float(raw)
    if type_hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_hint is str:
        return raw
    if type_hint == tuple[int, ...]:
        return tuple(int(t) for t in raw.split(",") if t.strip())
    raise ValueError(f"unsupported config type {type_hint}")


def parse_config(path: str | Path) -> dict[str, str]:
    """key = value lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def spec_from_mapping(mapping: dict[str, str], **overrides) -> ExperimentSpec:
    hints = {f.name: f.type for f in dataclasses.fields(ExperimentSpec)}
    type_map = {
        "int": int,
        "float": float,
        "bool": bool,
        "str": str,
        "tuple[int, ...]": tuple[int, ...],
    }
    kwargs = {}
    for key, raw in mapping.items():
        if key not in hints:
            raise ValueError(f"unknown config key {key!r}")
        hint = hints[key]
        hint = type_map.get(hint, hint) if isinstance(hint, str) else hint
        kwargs[key] = _coerce(raw, hint)
    kwargs.update(overrides)
    return ExperimentSpec(**kwargs)


def spec_from_file(path: str | Path, **overrides) -> ExperimentSpec:
    return spec_from_mapping(parse_config(path), **overrides)


def write_spec(spec: ExperimentSpec, path: str | Path) -> None:
    lines = []
    for f in dataclasses.fields(ExperimentSpec):
        value = getattr(spec, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def worker_count() -> int:
    """Worker cap from MSC_THREADS (default 1, never above the CPU count)."""
    raw = os.environ.get("MSC_THREADS", "1")
    try:
        requested = max(1, int(raw))
    except ValueError:
        requested = 1
    return min(requested, os.cpu_count() or 1)


def _parallel_map(fn, items):
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# manifest and CSV


def write_manifest(spec: ExperimentSpec, path: str | Path) -> None:
    lines = [
        f"fine_cells = {spec.fine_cells}",
        f"coarse_factor = {spec.coarse_factor}",
        f"amp_levels = {spec.amp_levels}",
        f"channel_value = {spec.channel_value:.12g}",
        f"seed = {spec.seed}",
        f"n_train = {spec.n_train}",
        f"n_test = {spec.n_test}",
        f"train_seeds = {','.join(str(s) for s in spec.train_seeds())}",
        f"test_seeds = {','.join(str(s) for s in spec.test_seeds())}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_manifest(path: str | Path) -> dict:
    raw = parse_config(path)
    return {
        "fine_cells": int(raw["fine_cells"]),
        "coarse_factor": int(raw["coarse_factor"]),
        "amp_levels": int(raw["amp_levels"]),
        "channel_value": float(raw["channel_value"]),
        "seed": int(raw["seed"]),
        "n_train": int(raw["n_train"]),
        "n_test": int(raw["n_test"]),
        "train_seeds": [int(s) for s in raw["train_seeds"].split(",") if s],
        "test_seeds": [int(s) for s in raw["test_seeds"].split(",") if s],
    }


def write_csv(path: str | Path, header: list[str], rows: list[tuple]) -> None:
    """Comma-separated, 12 significant digits for floats."""
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.12g}"
        return str(v)

    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


# --------------------------------------------------------------------------
# generate


def _field_paths(spec: ExperimentSpec, out: Path) -> tuple[list[Path], list[Path]]:
    fields_dir = out / "fields"
    train = [fields_dir / f"train_{i:04d}.field" for i in range(spec.n_train)]
    test = [fields_dir / f"test_{i:04d}.field" for i in range(spec.n_test)]
    return train, test


def cmd_generate(spec: ExperimentSpec) -> int:
    """Sample and persist every training and test realization plus the
    manifest that records seeds and parameters."""
    out = Path(spec.out_dir)
    try:
        (out / "fields").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MsclusterError(f"cannot create output directory {out}: {exc}") from exc
    config = spec.field_config()
    train_paths, test_paths = _field_paths(spec, out)
    for path, seed in zip(train_paths, spec.train_seeds()):
        write_field(sample_field(config, seed), path)
    for path, seed in zip(test_paths, spec.test_seeds()):
        write_field(sample_field(config, seed), path)
    write_manifest(spec, out / "manifest.txt")
    log.info("generated %d train + %d test fields in %s", spec.n_train, spec.n_test, out)
    return EXIT_OK


def _load_fields(spec: ExperimentSpec, out: Path, which: str) -> list[PermeabilityField]:
    train_paths, test_paths = _field_paths(spec, out)
    paths = train_paths if which == "train" else test_paths
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MsclusterError(f"missing field files (run generate first), e.g. {missing[0]}")
    return [read_field(p) for p in paths]


# --------------------------------------------------------------------------
# training targets


def compute_targets(
    grid: CoarseGrid,
    pou,
    nbhds: list[Neighborhood],
    fields: list[PermeabilityField],
) -> dict[int, np.ndarray]:
    """Per-neighborhood matrix of first basis vectors, one row per field."""
    targets: dict[int, np.ndarray] = {}
    for nbhd in nbhds:
        rows = np.empty((len(fields), nbhd.n_nodes))
        for r, field in enumerate(fields):
            patch = restrict(field, nbhd)
            snap = gmsfem.snapshot_space(patch, nbhd)
            basis = gmsfem.offline_basis(snap, patch, pou, 1, apply_pou=True)
            rows[r] = basis.vectors[:, 0]
        targets[nbhd.coarse_node] = rows
    return targets


def _train_one_node(args):
    nbhd, patches, targets, adversary, config, basis_counts, init_from = args
    pou = partition_of_unity(nbhd.grid)
    model = cl.train_neighborhood(
        patches,
        targets,
        adversary,
        config,
        nbhd=nbhd,
        pou=pou,
        basis_counts=basis_counts,
        init_from=init_from,
    )
    return model


def _train_one_node_safe(args):
    """Module-level so process pools can pickle it; failures become values."""
    try:
        return _train_one_node(args)
    except MsclusterError as exc:
        return exc


def cmd_train(spec: ExperimentSpec) -> int:
    """Pretrain the adversary, then train one cluster model per coarse node
    for every cluster count in the sweep.  Failed neighborhoods are recorded
    and skipped; any failure turns the exit status into 'partial'."""
    out = Path(spec.out_dir)
    grid = spec.grid()
    pou = partition_of_unity(grid)
    nbhds = all_neighborhoods(grid)
    fields = _load_fields(spec, out, "train")

    log.info("computing per-realization first-basis targets (%d x %d)", len(nbhds), len(fields))
    targets = compute_targets(grid, pou, nbhds, fields)
    patches = {n.coarse_node: [restrict(f, n) for f in fields] for n in nbhds}

    interior_shape = (2 * grid.factor + 1, 2 * grid.factor + 1)
    stack = [
        targets[n.coarse_node].reshape(-1, *n.nodes_shape)
        for n in nbhds
        if n.nodes_shape == interior_shape
    ]
    if not stack:  # degenerate grids have no interior coarse node
        stack = [targets[nbhds[0].coarse_node].reshape(-1, *nbhds[0].nodes_shape)]
    pool = np.concatenate(stack)
    rng = np.random.default_rng([spec.seed, 23])
    if len(pool) > spec.adversary_samples:
        pool = pool[rng.choice(len(pool), size=spec.adversary_samples, replace=False)]
    log.info("pretraining adversary on %d basis images", len(pool))
    adversary = cl.pretrain_adversary(
        pool, epochs=spec.adversary_epochs, seed=spec.seed, learning_rate=spec.learning_rate
    )
    save_model(adversary, out / "adversary.nnm")

    failures: list[str] = []
    status_lines: list[str] = []
    for k in spec.cluster_counts:
        model_dir = out / "models" / f"k{k}"
        log_dir = out / "logs" / f"k{k}"
        model_dir.mkdir(parents=True, exist_ok=True)
        log_dir.mkdir(parents=True, exist_ok=True)

        donors: dict[tuple[int, int], tuple[list, list]] = {}
        jobs = []
        for nbhd in nbhds:
            config = cl.TrainingConfig(
                n_clusters=k,
                cluster_weight=spec.cluster_weight,
                recon_weight=spec.recon_weight,
                feature_weight=spec.feature_weight,
                max_epochs=spec.max_epochs,
                stable_epochs=spec.stable_epochs,
                seed=spec.seed + 100 * k,
                learning_rate=spec.learning_rate,
                latent_dim=spec.latent_dim,
            )
            jobs.append((nbhd, config))

        results: dict[int, cl.ClusterModel | Exception] = {}
        if spec.transfer_init:
            for nbhd, config in jobs:
                init = donors.get(nbhd.cells_shape)
                try:
                    model = _train_one_node(
                        (nbhd, patches[nbhd.coarse_node], targets[nbhd.coarse_node],
                         adversary, config, spec.basis_counts, init)
                    )
                    results[nbhd.coarse_node] = model
                    if init is None:
                        donors[nbhd.cells_shape] = (
                            model.encoder.copy_parameter_values(),
                            model.generator.copy_parameter_values(),
                        )
                except MsclusterError as exc:
                    results[nbhd.coarse_node] = exc
        else:
            payloads = [
                (nbhd, patches[nbhd.coarse_node], targets[nbhd.coarse_node],
                 adversary, config, spec.basis_counts, None)
                for nbhd, config in jobs
            ]
            for payload, outcome in zip(payloads, _parallel_map(_train_one_node_safe, payloads)):
                results[payload[0].coarse_node] = outcome

        for nbhd, _config in jobs:
            node = nbhd.coarse_node
            outcome = results[node]
            if isinstance(outcome, Exception):
                failures.append(f"k={k} node={node}: {outcome}")
                status_lines.append(f"k={k} node={node} failed: {outcome}")
                continue
            cl.save_cluster_model(outcome, model_dir / f"node_{node:03d}.clm")
            write_csv(
                log_dir / f"node_{node:03d}.csv",
                ["epoch", "loss_cluster", "loss_recon", "loss_feature", "total", "changes"],
                [
                    (
                        row["epoch"],
                        row["loss_cluster"],
                        row["loss_recon"],
                        row["loss_feature"],
                        row["total"],
                        row["changes"],
                    )
                    for row in outcome.history
                ],
            )
            status_lines.append(f"k={k} node={node} ok epochs={len(outcome.history)}")
        log.info("trained cluster models for k=%d (%d nodes)", k, len(nbhds))

    (out / "train_status.txt").write_text("\n".join(status_lines) + "\n")
    if failures:
        log.warning("%d neighborhood trainings failed", len(failures))
        return EXIT_PARTIAL
    return EXIT_OK


def _load_models(spec: ExperimentSpec, out: Path, k: int, grid: CoarseGrid) -> dict[int, cl.ClusterModel]:
    model_dir = out / "models" / f"k{k}"
    models = {}
    for node in range(grid.n_nodes):
        path = model_dir / f"node_{node:03d}.clm"
        if not path.exists():
            raise MsclusterError(f"missing model {path}; run train first")
        models[node] = cl.load_cluster_model(path, grid)
    return models


def cmd_sweep_clusters(spec: ExperimentSpec) -> int:
    """Mean test error per (cluster count, basis count); no spectral problem
    may be solved while the test set is processed."""
    out = Path(spec.out_dir)
    grid = spec.grid()
    test_fields = _load_fields(spec, out, "test")
    source = np.ones(grid.fine.n_cells)
    fine_solutions = [fem.solve_fine(f, source) for f in test_fields]

    calls_before = gmsfem.offline_basis_calls()
    rows = []
    for k in spec.cluster_counts:
        models = _load_models(spec, out, k, grid)
        errors = {L: [] for L in spec.basis_counts}
        for field, u_fine in zip(test_fields, fine_solutions):
            choices = cl.cluster_choices(models, grid, field)
            for L in spec.basis_counts:
                columns = cl.clustered_columns(models, choices, L)
                u_h = gmsfem.reduced_solve(columns, grid, field, source)
                errors[L].append(fem.error_ratio(u_fine, u_h))
        for L in spec.basis_counts:
            rows.append((k, L, float(np.mean(errors[L]))))
    calls_after = gmsfem.offline_basis_calls()
    if calls_after != calls_before:
        raise MsclusterError(
            f"test-time solves triggered {calls_after - calls_before} spectral problems"
        )
    write_csv(out / "sweep_clusters.csv", ["n_clusters", "n_basis", "mean_error_ratio"], rows)
    (out / "sweep_summary.txt").write_text(
        f"offline_basis_calls_during_solves = {calls_after - calls_before}\n"
        f"n_test = {len(test_fields)}\n"
    )
    return EXIT_OK


def cmd_compare(spec: ExperimentSpec) -> int:
    """Cluster-based solve versus per-realization offline bases, mean error
    per basis count, at the largest cluster count of the sweep."""
    out = Path(spec.out_dir)
    grid = spec.grid()
    pou = partition_of_unity(grid)
    nbhds = all_neighborhoods(grid)
    k = max(spec.cluster_counts)
    models = _load_models(spec, out, k, grid)
    test_fields = _load_fields(spec, out, "test")
    source = np.ones(grid.fine.n_cells)
    fine_solutions = [fem.solve_fine(f, source) for f in test_fields]
    l_max = max(spec.basis_counts)

    # cluster arm first; it must not touch the spectral solver
    calls_before = gmsfem.offline_basis_calls()
    cluster_errors = {L: [] for L in spec.basis_counts}
    for field, u_fine in zip(test_fields, fine_solutions):
        choices = cl.cluster_choices(models, grid, field)
        for L in spec.basis_counts:
            u_h = gmsfem.reduced_solve(cl.clustered_columns(models, choices, L), grid, field, source)
            cluster_errors[L].append(fem.error_ratio(u_fine, u_h))
    cluster_calls = gmsfem.offline_basis_calls() - calls_before
    if cluster_calls:
        raise MsclusterError(f"cluster arm triggered {cluster_calls} spectral problems")

    direct_errors = {L: [] for L in spec.basis_counts}
    for field, u_fine in zip(test_fields, fine_solutions):
        per_node = {}
        for nbhd in nbhds:
            patch = restrict(field, nbhd)
            snap = gmsfem.snapshot_space(patch, nbhd)
            per_node[nbhd.coarse_node] = gmsfem.offline_basis(snap, patch, pou, l_max)
        for L in spec.basis_counts:
            columns = {
                node: (b.nbhd, b.vectors[:, :L]) for node, b in per_node.items()
            }
            u_h = gmsfem.reduced_solve(columns, grid, field, source)
            direct_errors[L].append(fem.error_ratio(u_fine, u_h))

    rows = [
        (L, float(np.mean(cluster_errors[L])), float(np.mean(direct_errors[L])))
        for L in spec.basis_counts
    ]
    write_csv(out / "compare.csv", ["n_basis", "cluster_error", "direct_error"], rows)
    (out / "compare_summary.txt").write_text(
        f"n_clusters = {k}\noffline_basis_calls_cluster_arm = {cluster_calls}\n"
    )
    return EXIT_OK


def cmd_ablate(spec: ExperimentSpec) -> int:
    """Adversary-effect study with the clustering term disabled: a
    reconstruction-only arm against reconstruction plus the feature loss."""
    out = Path(spec.out_dir)
    grid = spec.grid()
    pou = partition_of_unity(grid)
    nbhds = all_neighborhoods(grid)
    train_fields = _load_fields(spec, out, "train")
    test_fields = _load_fields(spec, out, "test")
    source = np.ones(grid.fine.n_cells)

    adversary_path = out / "adversary.nnm"
    if not adversary_path.exists():
        raise MsclusterError(f"missing {adversary_path}; run train first")
    adversary = load_model(adversary_path)

    targets = compute_targets(grid, pou, nbhds, train_fields)
    test_targets = compute_targets(grid, pou, nbhds, test_fields)
    train_patches = {n.coarse_node: [restrict(f, n) for f in train_fields] for n in nbhds}

    arms = [
        ("recon_only", 1.0, 0.0),
        ("recon_adversary", 1.0, 1.0),
    ]
    (out / "ablate_arms.txt").write_text(
        "\n".join(
            f"{name}: cluster_weight=0 recon_weight={rw:g} feature_weight={fw:g} "
            f"epochs={spec.ablate_epochs}"
            for name, rw, fw in arms
        )
        + "\n"
    )

    fine_solutions = [fem.solve_fine(f, source) for f in test_fields]
    rows = []
    for name, recon_w, feature_w in arms:
        models: dict[int, cl.GenerativeModel] = {}
        for nbhd in nbhds:
            models[nbhd.coarse_node] = cl.train_generative(
                train_patches[nbhd.coarse_node],
                targets[nbhd.coarse_node],
                adversary,
                nbhd=nbhd,
                recon_weight=recon_w,
                feature_weight=feature_w,
                epochs=spec.ablate_epochs,
                seed=spec.seed + 555,
                learning_rate=spec.learning_rate,
                latent_dim=spec.latent_dim,
            )

        sq_err = 0.0
        ratios = []
        for t, field in enumerate(test_fields):
            columns = {}
            for nbhd in nbhds:
                node = nbhd.coarse_node
                model = models[node]
                predicted = model.generate(restrict(field, nbhd))
                sq_err += float(np.sum((predicted - test_targets[node][t]) ** 2))
                vec = predicted.copy()
                vec[nbhd.boundary_local] = 0.0
                vec[nbhd.dirichlet_local()] = 0.0
                columns[node] = (nbhd, vec[:, None])
            u_h = gmsfem.reduced_solve(columns, grid, field, source)
            ratios.append(fem.error_ratio(fine_solutions[t], u_h))
        basis_mse = sq_err / (len(test_fields) * len(nbhds))
        rows.append((name, basis_mse, float(np.mean(ratios))))
        log.info("ablation arm %s: basis mse %.6g, mean error %.6g", name, rows[-1][1], rows[-1][2])

    write_csv(out / "ablate.csv", ["arm", "held_out_basis_mse", "mean_error_ratio"], rows)
    return EXIT_OK
