"""Four-phase guided training pipeline.

1. Train a fitness model on randomly grid-mixed batches (full combined
   objective).
2. Search mask/pair genomes against the frozen fitness model, scored on
   a seeded fraction of the validation set.
3. Materialize a guided augmented set from the best genome (one sample
   per draw: uniform active slot, one training image per class side).
4. Train the final model on batches composed of original, randomly
   mixed, and guided samples — minimizing only the image-level loss.

Each phase writes its artifact into the run directory; re-running with
an existing phase-1 checkpoint skips phase 1 and produces identical
downstream results for the same seeds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, one_hot
from .errors import ConfigError, FormatError
from .evolution import (
    Individual,
    SearchConfig,
    evaluate_fitness,
    index_to_pair,
    run_search,
    save_history,
    save_individual,
)
from .masks import PatchMask, sample_random_mask
from .mixing import MixedSample, patchmix
from .model import (
    EpochMetrics,
    ReferenceModel,
    TrainConfig,
    _train_loop,
    load_model,
    save_metrics,
    save_model,
    train_random_patchmix,
)
from .rng import RngKey

log = logging.getLogger("patchmix.workflow")

FITNESS_MODEL_FILE = "f_t_model.pmxm"
FITNESS_METRICS_FILE = "f_t_metrics.csv"
SEARCH_HISTORY_FILE = "search_history.csv"
BEST_INDIVIDUAL_FILE = "best_individual.txt"
GUIDED_MANIFEST_FILE = "guided_set.txt"
FINAL_MODEL_FILE = "f_o_model.pmxm"
FINAL_METRICS_FILE = "f_o_metrics.csv"

DEFAULT_BATCH_RATIO = (1, 1, 1)


@dataclass
class GuidedPlan:
    """Search outcome handed from phase 2 to phases 3 and 4."""

    best_individual: Individual
    sampling_weight: float = 1.0 / 3.0  # guided share of a composed batch

    def __post_init__(self):
        if not 0.0 <= self.sampling_weight <= 1.0:
            raise ConfigError("sampling_weight must lie in [0, 1]")


@dataclass
class PipelineResult:
    fitness_model: ReferenceModel
    fitness_metrics: list[EpochMetrics] | None
    plan: GuidedPlan
    history: list
    final_model: ReferenceModel
    final_metrics: list[EpochMetrics]
    run_dir: Path


def draw_guided_recipe(
    individual: Individual, train: Dataset, count: int, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """(slot, image index for the mask-1 class, image index for the other).

    Each draw picks an active slot uniformly, then one training image per
    class side uniformly.
    """
    active = individual.active_slots()
    if len(active) == 0:
        raise ConfigError("individual has no active pairs")
    if count < 0:
        raise ConfigError("count must be non-negative")
    per_class = train.class_indices()
    for slot in active:
        ci, cj = index_to_pair(int(slot), train.class_count)
        for cls in (ci, cj):
            if len(per_class[cls]) == 0:
                raise ConfigError(f"training set has no samples of class {cls}")
    recipe = []
    for _ in range(count):
        slot = int(active[rng.integers(len(active))])
        ci, cj = index_to_pair(slot, train.class_count)
        i = int(per_class[ci][rng.integers(len(per_class[ci]))])
        j = int(per_class[cj][rng.integers(len(per_class[cj]))])
        recipe.append((slot, i, j))
    return recipe


def materialize_guided(
    individual: Individual, train: Dataset, recipe: Sequence[tuple[int, int, int]]
) -> list[MixedSample]:
    samples = []
    for slot, i, j in recipe:
        ci, cj = index_to_pair(int(slot), train.class_count)
        samples.append(
            patchmix(
                train.images[i],
                ci,
                train.images[j],
                cj,
                PatchMask(individual.masks[slot]),
                train.class_count,
            )
        )
    return samples


def generate_guided_set(
    individual: Individual, train: Dataset, count: int, rng: np.random.Generator
) -> list[MixedSample]:
    """Materialized guided augmented set (see :func:`draw_guided_recipe`)."""
    return materialize_guided(
        individual, train, draw_guided_recipe(individual, train, count, rng)
    )


def save_guided_manifest(recipe: Sequence[tuple[int, int, int]], path) -> None:
    """Text manifest: a count header then one ``slot,i,j`` line per sample."""
    lines = [f"count={len(recipe)}"]
    lines.extend(f"{slot},{i},{j}" for slot, i, j in recipe)
    Path(path).write_text("\n".join(lines) + "\n")


def load_guided_manifest(path) -> list[tuple[int, int, int]]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("count="):
        raise FormatError(f"{path}: missing count header")
    try:
        count = int(lines[0].split("=", 1)[1])
    except ValueError as err:
        raise FormatError(f"{path}: bad count header {lines[0]!r}") from err
    if len(lines) - 1 != count:
        raise FormatError(f"{path}: expected {count} entries, found {len(lines) - 1}")
    recipe = []
    for line in lines[1:]:
        parts = line.strip().split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}: bad manifest line {line!r}")
        recipe.append(tuple(int(p) for p in parts))
    return recipe


def split_batch(batch_size: int, ratio: tuple[int, int, int]) -> tuple[int, int, int]:
    """Original/random/guided counts for one batch; remainder goes to original."""
    if len(ratio) != 3 or any(r < 0 for r in ratio):
        raise ConfigError(f"ratio must be three non-negative integers, got {ratio}")
    total = sum(ratio)
    if total == 0:
        raise ConfigError("ratio must not be all zeros")
    n_random = batch_size * ratio[1] // total
    n_guided = batch_size * ratio[2] // total
    n_original = batch_size - n_random - n_guided
    return n_original, n_random, n_guided


def _cycled_order(n: int, rng: np.random.Generator):
    while True:
        for i in rng.permutation(n):
            yield int(i)


def guided_batch_composer(
    train: Dataset,
    random_mixer,
    guided_set: Sequence[MixedSample],
    ratio: tuple[int, int, int],
    batch_size: int,
    batches: int,
    rng: np.random.Generator,
    grid_size: int,
) -> Iterable[list[MixedSample]]:
    """Yield batches of original : randomly-mixed : guided samples.

    Originals cycle through epoch-shuffled training permutations; guided
    samples cycle through shuffled guided-set permutations;
    ``random_mixer(rng, count)`` supplies fresh randomly mixed samples.
    """
    n_original, n_random, n_guided = split_batch(batch_size, ratio)
    if n_guided and not guided_set:
        raise ConfigError("batch ratio requires guided samples but the set is empty")
    if len(train) == 0:
        raise ConfigError("empty training set")
    originals = _cycled_order(len(train), rng)
    guided_order = _cycled_order(len(guided_set), rng) if guided_set else None
    patch_fill = grid_size * grid_size
    for _ in range(batches):
        batch: list[MixedSample] = []
        for _ in range(n_original):
            i = next(originals)
            label = int(train.labels[i])
            batch.append(
                MixedSample(
                    train.images[i].astype(np.float64),
                    one_hot(label, train.class_count),
                    np.full(patch_fill, label, dtype=np.int64),
                    1.0,
                )
            )
        if n_random:
            batch.extend(random_mixer(rng, n_random))
        for _ in range(n_guided):
            batch.append(guided_set[next(guided_order)])
        yield batch


def train_final(
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    guided_set: Sequence[MixedSample],
    ratio: tuple[int, int, int] = DEFAULT_BATCH_RATIO,
):
    """Phase-4 trainer: composed batches, image-level objective only."""
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    p = cfg.grid_size
    if train.height % p or train.width % p:
        raise ConfigError(
            f"images {train.width}x{train.height} not divisible by grid size {p}"
        )
    n_batches = math.ceil(len(train) / cfg.batch_size)

    def random_mixer(rng: np.random.Generator, count: int) -> list[MixedSample]:
        out = []
        for _ in range(count):
            i = int(rng.integers(len(train)))
            j = int(rng.integers(len(train)))
            mask = sample_random_mask(p, cfg.alpha, rng)
            out.append(
                patchmix(
                    train.images[i],
                    int(train.labels[i]),
                    train.images[j],
                    int(train.labels[j]),
                    mask,
                    train.class_count,
                )
            )
        return out

    def batches(epoch: int, rng: np.random.Generator):
        yield from guided_batch_composer(
            train, random_mixer, guided_set, ratio, cfg.batch_size, n_batches, rng, p
        )

    ppc = (train.height // p) * (train.width // p) * train.channels
    model = ReferenceModel.initialize(
        p,
        train.class_count,
        cfg.hidden_dim,
        ppc,
        RngKey(cfg.seed).child("final-train", "init").generator(),
    )
    metrics = _train_loop(model, cfg, val, batches, "final-train")
    return model, metrics


def fitness_val_subset(val: Dataset, cfg: SearchConfig) -> Dataset:
    """Seeded stratified subset of the validation set (fraction per class)."""
    if len(val) == 0:
        raise ConfigError("empty validation set")
    rng = RngKey(cfg.seed).child("val-subset").generator()
    picked = []
    for indices in val.class_indices():
        if len(indices) == 0:
            continue
        take = max(1, math.ceil(cfg.val_fraction * len(indices)))
        picked.append(rng.choice(indices, size=take, replace=False))
    chosen = np.sort(np.concatenate(picked))
    return val.subset(chosen)


def run_guided_pipeline(
    train: Dataset,
    val: Dataset,
    train_cfg: TrainConfig,
    search_cfg: SearchConfig,
    run_dir,
    threads: int = 1,
    ratio: tuple[int, int, int] = DEFAULT_BATCH_RATIO,
) -> PipelineResult:
    """Run all four phases, writing artifacts into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    # Phase 1: fitness model on random grid mixing.
    fitness_path = run_dir / FITNESS_MODEL_FILE
    fitness_metrics: list[EpochMetrics] | None = None
    if fitness_path.exists():
        fitness_model = load_model(fitness_path)
        log.info("phase 1 skipped: reusing fitness model checkpoint %s", fitness_path)
    else:
        fitness_model, fitness_metrics = train_random_patchmix(train, val, train_cfg)
        save_model(fitness_model, fitness_path)
        save_metrics(fitness_metrics, run_dir / FITNESS_METRICS_FILE)
        log.info("phase 1 done: fitness model saved to %s", fitness_path)

    # Phase 2: genetic search on a seeded validation fraction.
    subset = fitness_val_subset(val, search_cfg)

    def fitness_fn(individual: Individual, generation: int) -> float:
        return evaluate_fitness(individual, fitness_model, subset, search_cfg, generation)

    best, history = run_search(
        search_cfg, train.class_count, train_cfg.grid_size, fitness_fn, threads
    )
    max_active = search_cfg.resolve_max_active(train.class_count)
    save_history(history, run_dir / SEARCH_HISTORY_FILE)
    save_individual(best, max_active, run_dir / BEST_INDIVIDUAL_FILE)
    log.info(
        "phase 2 done: best score %.6f after %d generations",
        best.fitness if best.fitness is not None else float("nan"),
        history[-1].generation,
    )

    # Phase 3: materialize the guided augmented set.
    guided_rng = RngKey(train_cfg.seed).child("guided-set").generator()
    recipe = draw_guided_recipe(best, train, len(train), guided_rng)
    save_guided_manifest(recipe, run_dir / GUIDED_MANIFEST_FILE)
    guided_set = materialize_guided(best, train, recipe)
    log.info("phase 3 done: %d guided samples", len(guided_set))

    # Phase 4: final model, image-level objective only.
    final_cfg = replace(train_cfg, loss_mode="image_only")
    final_model, final_metrics = train_final(train, val, final_cfg, guided_set, ratio)
    save_model(final_model, run_dir / FINAL_MODEL_FILE)
    save_metrics(final_metrics, run_dir / FINAL_METRICS_FILE)
    log.info("phase 4 done: final model saved to %s", run_dir / FINAL_MODEL_FILE)

    guided_share = ratio[2] / sum(ratio)
    return PipelineResult(
        fitness_model=fitness_model,
        fitness_metrics=fitness_metrics,
        plan=GuidedPlan(best, guided_share),
        history=history,
        final_model=final_model,
        final_metrics=final_metrics,
        run_dir=run_dir,
    )


@dataclass
class AblationRow:
    grid_size: int
    loss_mode: str
    train_loss: float
    val_top1: float
    val_patch_acc: float


def ablation_grid(
    train: Dataset,
    val: Dataset,
    base_cfg: TrainConfig,
    grid_sizes: Sequence[int] = (2, 4, 8),
    loss_modes: Sequence[str] = ("both", "image_only", "patch_only"),
) -> list[AblationRow]:
    """Train one model per (grid size, loss mode) cell and report final metrics."""
    rows = []
    for grid_size in grid_sizes:
        for loss_mode in loss_modes:
            cfg = replace(base_cfg, grid_size=grid_size, loss_mode=loss_mode)
            _, metrics = train_random_patchmix(train, val, cfg)
            last = metrics[-1]
            rows.append(
                AblationRow(grid_size, loss_mode, last.train_loss, last.val_top1, last.val_patch_acc)
            )
    return rows


def ablation_csv_lines(rows: Sequence[AblationRow]) -> list[str]:
    lines = ["grid_size,loss_mode,train_loss,val_top1,val_patch_acc"]
    lines.extend(
        f"{r.grid_size},{r.loss_mode},{r.train_loss!r},{r.val_top1!r},{r.val_patch_acc!r}"
        for r in rows
    )
    return lines
