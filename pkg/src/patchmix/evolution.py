"""Genetic search over class-pair activations and their grid masks.

A genome ("individual") owns one activation bit per unordered class pair
(i <= j, row-major upper-triangular order) and one grid mask per pair
slot.  At most ``max_active_pairs`` slots may be active at once; optional
same-class forcing keeps every (c, c) slot switched on.

Fitness scores are minimized.  They come from mixing frozen-model
validation images per active pair and averaging a patch-level metric;
"max" objectives are sign-flipped so that lower always means fitter.
The image pairs drawn for a slot depend only on (seed, generation, slot),
so every individual in a generation is scored against identical data and
thread count cannot change any result.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from .data import Dataset
from .errors import ConfigError, FormatError, NumericError
from .masks import parse_mask_rows
from .model import ReferenceModel, forward_batch
from .rng import RngKey

OBJECTIVES = ("min_patch_acc", "max_patch_acc", "min_lp", "max_lp")

RANDOM_TAIL_FLIP_PROB = 0.1


def pair_count(class_count: int) -> int:
    """Number of unordered class pairs, same-class pairs included."""
    return class_count * (class_count + 1) // 2


def all_pairs(class_count: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(class_count) for j in range(i, class_count)]


def pair_to_index(i: int, j: int, class_count: int) -> int:
    if not 0 <= i <= j < class_count:
        raise ConfigError(f"bad class pair ({i}, {j}) for {class_count} classes")
    return i * class_count - i * (i - 1) // 2 + (j - i)


def index_to_pair(index: int, class_count: int) -> tuple[int, int]:
    if not 0 <= index < pair_count(class_count):
        raise ConfigError(f"pair index {index} outside [0, {pair_count(class_count)})")
    return all_pairs(class_count)[index]


def class_count_for_pairs(n_pairs: int) -> int:
    c = int((np.sqrt(8 * n_pairs + 1) - 1) // 2)
    if pair_count(c) != n_pairs:
        raise ConfigError(f"{n_pairs} is not a valid pair count")
    return c


def same_class_slots(class_count: int) -> np.ndarray:
    return np.asarray(
        [pair_to_index(c, c, class_count) for c in range(class_count)], dtype=np.int64
    )


@dataclass
class Individual:
    """Genome: active-pair bits plus one mask per pair slot.

    Masks are allocated for every slot; only active ones are meaningful.
    ``fitness`` caches the last score (None = needs evaluation).
    """

    head: np.ndarray   # (n_pairs,) uint8
    masks: np.ndarray  # (n_pairs, P, P) uint8
    fitness: float | None = None

    def __post_init__(self):
        self.head = np.ascontiguousarray(self.head, dtype=np.uint8)
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
        if self.head.ndim != 1:
            raise ConfigError("head must be one-dimensional")
        if (
            self.masks.ndim != 3
            or self.masks.shape[0] != len(self.head)
            or self.masks.shape[1] != self.masks.shape[2]
        ):
            raise ConfigError(
                f"masks shape {self.masks.shape} does not match {len(self.head)} slots"
            )
        class_count_for_pairs(len(self.head))

    @property
    def n_pairs(self) -> int:
        return len(self.head)

    @property
    def class_count(self) -> int:
        return class_count_for_pairs(len(self.head))

    @property
    def grid_size(self) -> int:
        return self.masks.shape[1]

    def active_slots(self) -> np.ndarray:
        return np.flatnonzero(self.head)

    def copy(self) -> "Individual":
        return Individual(self.head.copy(), self.masks.copy(), self.fitness)


@dataclass
class SearchConfig:
    population_size: int = 500
    generations: int = 60        # desk scale; full-scale runs use 250
    crossover_prob: float = 0.5
    mutation_prob: float = 0.3
    tournament_size: int = 3
    max_active_pairs: int | None = None  # None = one per class
    force_same_class: bool = False
    objective: str = "min_patch_acc"
    pairs_per_combo: int = 32
    val_fraction: float = 0.25
    patience: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.population_size < 2:
            raise ConfigError("population_size must be at least 2")
        if self.generations < 0:
            raise ConfigError("generations must be non-negative")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ConfigError("crossover_prob must lie in [0, 1]")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("mutation_prob must lie in [0, 1]")
        if self.tournament_size < 2:
            raise ConfigError("tournament_size must be at least 2")
        if self.max_active_pairs is not None and self.max_active_pairs < 1:
            raise ConfigError("max_active_pairs must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.pairs_per_combo < 1:
            raise ConfigError("pairs_per_combo must be at least 1")
        if not 0.0 < self.val_fraction <= 1.0:
            raise ConfigError("val_fraction must lie in (0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def resolve_max_active(self, class_count: int) -> int:
        limit = self.max_active_pairs if self.max_active_pairs is not None else class_count
        if limit > pair_count(class_count):
            raise ConfigError(
                f"max_active_pairs {limit} exceeds {pair_count(class_count)} pair slots"
            )
        if self.force_same_class and limit < class_count:
            raise ConfigError(
                "force_same_class needs max_active_pairs >= class_count "
                f"({limit} < {class_count})"
            )
        return limit


def init_population(
    cfg: SearchConfig, class_count: int, grid_size: int, rng: np.random.Generator
) -> list[Individual]:
    """Uniformly random masks everywhere; exactly the allowed number of
    active slots per genome (forced same-class slots counted within it)."""
    n_pairs = pair_count(class_count)
    limit = cfg.resolve_max_active(class_count)
    forced = same_class_slots(class_count) if cfg.force_same_class else np.empty(0, np.int64)
    candidates = np.setdiff1d(np.arange(n_pairs), forced)
    population = []
    for _ in range(cfg.population_size):
        head = np.zeros(n_pairs, dtype=np.uint8)
        head[forced] = 1
        extra = limit - len(forced)
        if extra:
            head[rng.choice(candidates, size=extra, replace=False)] = 1
        masks = rng.integers(0, 2, size=(n_pairs, grid_size, grid_size), dtype=np.uint8)
        population.append(Individual(head, masks))
    return population


def evaluate_fitness(
    individual: Individual,
    model: ReferenceModel,
    val: Dataset,
    cfg: SearchConfig,
    generation: int,
) -> float:
    """Score a genome against the frozen model; lower is fitter.

    For each active pair (c_i, c_j) the stream keyed by (seed,
    generation, slot) draws ``pairs_per_combo`` image pairs — c_i images
    take the mask-1 side — so identical genomes in the same generation
    always receive identical scores.
    """
    active = individual.active_slots()
    if len(active) == 0:
        raise ConfigError("individual has no active pairs")
    if individual.class_count != val.class_count:
        raise ConfigError(
            f"genome covers {individual.class_count} classes, "
            f"dataset has {val.class_count}"
        )
    p = individual.grid_size
    if val.height % p or val.width % p:
        raise ConfigError(
            f"images {val.width}x{val.height} not divisible by grid size {p}"
        )
    key = RngKey(cfg.seed).child("fitness", generation)
    per_class = val.class_indices()
    images, labels = [], []
    for slot in active:
        ci, cj = index_to_pair(int(slot), val.class_count)
        for cls in (ci, cj):
            if len(per_class[cls]) == 0:
                raise ConfigError(f"validation set has no samples of class {cls}")
        srng = key.child(int(slot)).generator()
        ii = srng.choice(per_class[ci], size=cfg.pairs_per_combo)
        jj = srng.choice(per_class[cj], size=cfg.pairs_per_combo)
        bits = individual.masks[slot]
        pixel = np.repeat(np.repeat(bits, val.height // p, axis=0), val.width // p, axis=1)
        keep = pixel.astype(bool)[None, :, :, None]
        images.append(np.where(keep, val.images[ii], val.images[jj]))
        slot_labels = np.where(bits.reshape(-1) == 1, ci, cj).astype(np.int64)
        labels.append(np.tile(slot_labels, (cfg.pairs_per_combo, 1)))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    patch_logits, _ = forward_batch(model, images)
    if cfg.objective in ("min_patch_acc", "max_patch_acc"):
        preds = np.argmax(patch_logits, axis=2)
        metric = (preds == labels).mean(axis=1)
    else:
        logp = losses.log_softmax(patch_logits)
        picked = np.take_along_axis(logp, labels[..., None], axis=2)
        metric = -picked[..., 0].sum(axis=1)
        losses.record_loss_eval("patch", len(images))
    score = float(metric.mean())
    if not np.isfinite(score):
        raise NumericError(f"non-finite fitness score {score}")
    return -score if cfg.objective.startswith("max") else score


def tournament_select(
    population: list[Individual], k: int, rng: np.random.Generator
) -> Individual:
    """Draw k genomes uniformly with replacement; fittest wins, first-drawn
    breaks ties."""
    if not population:
        raise ConfigError("empty population")
    if k < 1:
        raise ConfigError("tournament size must be at least 1")
    best = None
    for draw in rng.integers(0, len(population), size=k):
        candidate = population[int(draw)]
        if candidate.fitness is None:
            raise ConfigError("tournament requires cached fitness values")
        if best is None or candidate.fitness < best.fitness:
            best = candidate
    return best


def crossover(
    a: Individual, b: Individual, rng: np.random.Generator, cfg: SearchConfig
) -> tuple[Individual, Individual]:
    """Column-split mask recombination plus one-point head crossover.

    Offspring 1 takes mask columns [0, P/2) from ``a`` and the rest from
    ``b`` on every slot; offspring 2 takes the complementary assignment.
    Heads cross over at one uniformly drawn cut; both children are then
    repaired.  Parents are left untouched.
    """
    if a.head.shape != b.head.shape or a.masks.shape != b.masks.shape:
        raise ConfigError("crossover parents must have matching shapes")
    child1, child2 = a.copy(), b.copy()
    half = a.grid_size // 2
    child1.masks[:, :, half:] = b.masks[:, :, half:]
    child2.masks[:, :, half:] = a.masks[:, :, half:]
    if a.n_pairs >= 2:
        cut = int(rng.integers(1, a.n_pairs))
        child1.head = np.concatenate([a.head[:cut], b.head[cut:]])
        child2.head = np.concatenate([b.head[:cut], a.head[cut:]])
    child1.fitness = None
    child2.fitness = None
    return repair(child1, cfg, rng), repair(child2, cfg, rng)


def flip_tails(individual: Individual) -> Individual:
    """Invert every bit of every active mask (self-inverse)."""
    out = individual.copy()
    active = out.active_slots()
    out.masks[active] = 1 - out.masks[active]
    out.fitness = None
    return out


def transpose_tails(individual: Individual) -> Individual:
    """Transpose every active mask (self-inverse)."""
    out = individual.copy()
    active = out.active_slots()
    out.masks[active] = out.masks[active].transpose(0, 2, 1)
    out.fitness = None
    return out


def flip_heads(
    individual: Individual, rng: np.random.Generator, cfg: SearchConfig
) -> Individual:
    """Redraw which non-forced slots are active, preserving their count."""
    out = individual.copy()
    class_count = out.class_count
    forced = (
        same_class_slots(class_count) if cfg.force_same_class else np.empty(0, np.int64)
    )
    candidates = np.setdiff1d(np.arange(out.n_pairs), forced)
    movable = np.setdiff1d(out.active_slots(), forced)
    head = np.zeros_like(out.head)
    head[forced] = 1
    if len(movable):
        head[rng.choice(candidates, size=len(movable), replace=False)] = 1
    out.head = head
    out.fitness = None
    return out


def random_tails(
    individual: Individual, rng: np.random.Generator, flip_prob: float = RANDOM_TAIL_FLIP_PROB
) -> Individual:
    """Flip each active-mask bit independently with the given probability."""
    out = individual.copy()
    active = out.active_slots()
    flips = rng.random(out.masks[active].shape) < flip_prob
    out.masks[active] = np.where(flips, 1 - out.masks[active], out.masks[active])
    out.fitness = None
    return out


def mutate(
    individual: Individual, rng: np.random.Generator, cfg: SearchConfig
) -> Individual:
    """Apply one of the four operators, chosen uniformly, then repair."""
    op = int(rng.integers(4))
    if op == 0:
        out = flip_tails(individual)
    elif op == 1:
        out = transpose_tails(individual)
    elif op == 2:
        out = flip_heads(individual, rng, cfg)
    else:
        out = random_tails(individual, rng)
    return repair(out, cfg, rng)


def repair(
    individual: Individual, cfg: SearchConfig, rng: np.random.Generator
) -> Individual:
    """Restore genome validity; valid genomes pass through unchanged.

    Forced same-class slots are switched on, then uniformly chosen
    non-forced slots are deactivated until the active count fits the
    limit.  Fewer active slots than the limit is legal, but a genome with
    no active slot at all cannot be scored, so one uniformly chosen slot
    is switched on in that case.
    """
    out = individual.copy()
    class_count = out.class_count
    limit = cfg.resolve_max_active(class_count)
    forced = (
        same_class_slots(class_count) if cfg.force_same_class else np.empty(0, np.int64)
    )
    changed = False
    if len(forced) and not out.head[forced].all():
        out.head[forced] = 1
        changed = True
    active = out.active_slots()
    if len(active) > limit:
        removable = np.setdiff1d(active, forced)
        excess = len(active) - limit
        if excess > len(removable):
            raise ConfigError("cannot satisfy active-pair limit with forced slots")
        drop = rng.choice(removable, size=excess, replace=False)
        out.head[drop] = 0
        changed = True
    if not out.head.any():
        out.head[int(rng.integers(out.n_pairs))] = 1
        changed = True
    if changed:
        out.fitness = None
    return out


@dataclass
class GenerationStats:
    generation: int
    best: float                       # best score ever seen (monotone)
    mean: float                       # population mean this generation
    census: list[tuple[tuple[int, int], int]] = field(default_factory=list)


FitnessFn = Callable[[Individual, int], float]


def _evaluate_population(
    population: list[Individual], fitness_fn: FitnessFn, generation: int, threads: int
) -> None:
    """Fill in missing fitness values, keyed by population index."""
    pending = [i for i, ind in enumerate(population) if ind.fitness is None]

    def score(index: int) -> float:
        try:
            value = float(fitness_fn(population[index], generation))
        except (ConfigError, FormatError) as err:
            raise type(err)(
                f"generation {generation}, individual {index}: {err}"
            ) from err
        except Exception as err:
            raise NumericError(
                f"generation {generation}, individual {index}: {err}"
            ) from err
        if not np.isfinite(value):
            raise NumericError(
                f"generation {generation}, individual {index}: non-finite fitness {value}"
            )
        return value

    if threads > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, pending))
    else:
        results = [score(i) for i in pending]
    for index, value in zip(pending, results):
        population[index].fitness = value


def _census(population: list[Individual]) -> list[tuple[tuple[int, int], int]]:
    counts = np.zeros(population[0].n_pairs, dtype=np.int64)
    for ind in population:
        counts += ind.head
    class_count = population[0].class_count
    return [
        (index_to_pair(k, class_count), int(counts[k]))
        for k in np.flatnonzero(counts)
    ]


def run_search(
    cfg: SearchConfig,
    class_count: int,
    grid_size: int,
    fitness_fn: FitnessFn,
    threads: int = 1,
):
    """Tournament GA with the best genome ever seen retained.

    Per generation: select population-size parents by tournament, cross
    over adjacent pairs with ``crossover_prob``, mutate each child with
    ``mutation_prob``, then score only genomes whose cache was
    invalidated.  Stops early after ``patience`` generations without a
    strictly better best score.  Returns ``(best, history)``; the best
    score column of the history is monotone non-increasing.
    """
    cfg.validate()
    if class_count < 1:
        raise ConfigError("class_count must be positive")
    if grid_size < 1:
        raise ConfigError("grid_size must be at least 1")
    cfg.resolve_max_active(class_count)
    if threads < 1:
        raise ConfigError("threads must be at least 1")
    key = RngKey(cfg.seed)
    population = init_population(cfg, class_count, grid_size, key.child("init").generator())
    _evaluate_population(population, fitness_fn, 0, threads)
    best = min(population, key=lambda ind: ind.fitness).copy()
    history = [
        GenerationStats(
            0,
            best.fitness,
            float(np.mean([ind.fitness for ind in population])),
            _census(population),
        )
    ]
    stall = 0
    for generation in range(1, cfg.generations + 1):
        grng = key.child("generation", generation).generator()
        parents = [
            tournament_select(population, cfg.tournament_size, grng)
            for _ in range(cfg.population_size)
        ]
        offspring = [parent.copy() for parent in parents]
        for i in range(1, len(offspring), 2):
            if grng.random() < cfg.crossover_prob:
                offspring[i - 1], offspring[i] = crossover(
                    offspring[i - 1], offspring[i], grng, cfg
                )
        for i in range(len(offspring)):
            if grng.random() < cfg.mutation_prob:
                offspring[i] = mutate(offspring[i], grng, cfg)
        _evaluate_population(offspring, fitness_fn, generation, threads)
        population = offspring
        generation_best = min(population, key=lambda ind: ind.fitness)
        if generation_best.fitness < best.fitness:
            best = generation_best.copy()
            stall = 0
        else:
            stall += 1
        history.append(
            GenerationStats(
                generation,
                best.fitness,
                float(np.mean([ind.fitness for ind in population])),
                _census(population),
            )
        )
        if stall >= cfg.patience:
            break
    return best, history


# --- text formats -----------------------------------------------------------

_INDIVIDUAL_HEADER_RE = re.compile(r"^C=(\d+) P=(\d+) N=(\d+)$")
_PAIR_RE = re.compile(r"^\((\d+),(\d+)\)$")


def format_individual(individual: Individual, max_active: int) -> str:
    """Genome text: header, head bits, then each active slot's pair and rows."""
    lines = [
        f"C={individual.class_count} P={individual.grid_size} N={max_active}",
        "".join(str(int(v)) for v in individual.head),
    ]
    for slot in individual.active_slots():
        i, j = index_to_pair(int(slot), individual.class_count)
        lines.append(f"({i},{j})")
        lines.extend(
            "".join(str(int(v)) for v in row) for row in individual.masks[slot]
        )
    return "\n".join(lines)


def _parse_individual_lines(lines: list[str], pos: int) -> tuple[Individual, int, int]:
    header = _INDIVIDUAL_HEADER_RE.match(lines[pos].strip())
    if not header:
        raise FormatError(f"bad genome header {lines[pos]!r}")
    class_count, grid_size, max_active = (int(g) for g in header.groups())
    n_pairs = pair_count(class_count)
    pos += 1
    if pos >= len(lines):
        raise FormatError("missing head bits")
    head_text = lines[pos].strip()
    if len(head_text) != n_pairs or any(ch not in "01" for ch in head_text):
        raise FormatError(f"bad head bits {head_text!r}")
    head = np.asarray([int(ch) for ch in head_text], dtype=np.uint8)
    if int(head.sum()) > max_active:
        raise FormatError(f"{int(head.sum())} active pairs exceed the limit {max_active}")
    pos += 1
    masks = np.zeros((n_pairs, grid_size, grid_size), dtype=np.uint8)
    for slot in np.flatnonzero(head):
        if pos >= len(lines):
            raise FormatError("missing pair block")
        pair = _PAIR_RE.match(lines[pos].strip())
        expected = index_to_pair(int(slot), class_count)
        if not pair or (int(pair.group(1)), int(pair.group(2))) != expected:
            raise FormatError(
                f"expected pair {expected} at line {pos + 1}, found {lines[pos]!r}"
            )
        pos += 1
        if pos + grid_size > len(lines):
            raise FormatError("missing mask rows")
        try:
            masks[slot] = parse_mask_rows(lines[pos : pos + grid_size], grid_size)
        except FormatError as err:
            raise FormatError(f"slot {expected}: {err}") from err
        pos += grid_size
    return Individual(head, masks), max_active, pos


def parse_individual(text: str) -> tuple[Individual, int]:
    """Inverse of :func:`format_individual`; returns (genome, active limit)."""
    lines = [ln for ln in text.strip().splitlines()]
    if not lines:
        raise FormatError("empty genome text")
    individual, max_active, pos = _parse_individual_lines(lines, 0)
    if pos != len(lines):
        raise FormatError(f"{len(lines) - pos} unexpected trailing lines")
    return individual, max_active


def save_individual(individual: Individual, max_active: int, path) -> None:
    Path(path).write_text(format_individual(individual, max_active) + "\n")


def load_individual(path) -> tuple[Individual, int]:
    return parse_individual(Path(path).read_text())


def save_population(population: list[Individual], max_active: int, path) -> None:
    """Count header line, then concatenated genome blocks."""
    blocks = [str(len(population))]
    blocks.extend(format_individual(ind, max_active) for ind in population)
    Path(path).write_text("\n".join(blocks) + "\n")


def load_population(path) -> tuple[list[Individual], int]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise FormatError("empty population file")
    try:
        count = int(lines[0].strip())
    except ValueError as err:
        raise FormatError(f"bad population count {lines[0]!r}") from err
    population = []
    pos = 1
    max_active = 0
    for _ in range(count):
        if pos >= len(lines):
            raise FormatError(f"expected {count} genomes, found {len(population)}")
        individual, max_active, pos = _parse_individual_lines(lines, pos)
        population.append(individual)
    if pos != len(lines):
        raise FormatError(f"{len(lines) - pos} unexpected trailing lines")
    return population, max_active


def history_csv_lines(history: list[GenerationStats]) -> list[str]:
    """Comma-separated: generation, best, mean, active-pair census."""
    lines = []
    for stats in history:
        census = " ".join(f"{i}-{j}:{count}" for (i, j), count in stats.census)
        lines.append(f"{stats.generation},{stats.best!r},{stats.mean!r},{census}")
    return lines


def save_history(history: list[GenerationStats], path) -> None:
    Path(path).write_text("\n".join(history_csv_lines(history)) + "\n")
