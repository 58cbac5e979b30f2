"""Command line interface.

Commands: train-random, search, generate, train-guided, pipeline, eval,
boundary-demo.  Exit codes: 0 success, 2 configuration/format error,
3 numeric failure.

Runs are driven by a JSON config with four top-level sections —
``dataset``, ``train``, ``search`` — plus ``output_dir`` and ``threads``.
Unknown keys are rejected by name.  The config snapshot written into the
run directory normalizes ``output_dir`` to "." so that two runs of the
same config into different directories stay byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    load_cifar_binary,
    sniff_and_load,
    synth_shapes,
    toy_2d_three_class,
)
from .errors import ConfigError, FormatError, NumericError
from .evolution import SearchConfig, evaluate_fitness, run_search, save_history, save_individual, load_individual
from .mixing import cutmix, mixup
from .model import (
    ReferenceModel,
    TrainConfig,
    _train_loop,
    adversarial_accuracy,
    evaluate_model,
    forward_batch,
    load_model,
    save_metrics,
    save_model,
    train_random_patchmix,
)
from .rng import RngKey
from .workflow import (
    BEST_INDIVIDUAL_FILE,
    FINAL_METRICS_FILE,
    FINAL_MODEL_FILE,
    FITNESS_METRICS_FILE,
    FITNESS_MODEL_FILE,
    GUIDED_MANIFEST_FILE,
    SEARCH_HISTORY_FILE,
    draw_guided_recipe,
    fitness_val_subset,
    load_guided_manifest,
    materialize_guided,
    run_guided_pipeline,
    save_guided_manifest,
    train_final,
)

log = logging.getLogger("patchmix.cli")

DATASET_KINDS = ("synth", "cifar", "toy")
DEMO_METHODS = ("none", "mixup", "cutmix", "patchmix", "guided")
GRID_RESOLUTION = 200
CONFIG_SNAPSHOT_FILE = "config.json"


@dataclass
class DatasetConfig:
    kind: str = "synth"
    class_count: int = 3
    image_size: int = 16
    train_per_class: int = 200
    val_per_class: int = 50
    seed: int = 1
    val_seed: int | None = None  # defaults to seed + 1
    train_path: str | None = None
    val_path: str | None = None

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "cifar":
            if not self.train_path:
                raise ConfigError("missing config key dataset.train_path (required for cifar)")
            if not self.val_path:
                raise ConfigError("missing config key dataset.val_path (required for cifar)")


@dataclass
class RunConfig:
    dataset: DatasetConfig
    train: TrainConfig
    search: SearchConfig
    output_dir: str = "runs/out"
    threads: int = 1

    def validate(self) -> None:
        self.dataset.validate()
        self.train.validate()
        self.search.validate()
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


_SECTION_TYPES = {"dataset": DatasetConfig, "train": TrainConfig, "search": SearchConfig}


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key {section}.{key}")
    return cls(**data)


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section {name} must be an object")
        sections[name] = _build_section(cls, raw, name)
    cfg = RunConfig(
        dataset=sections["dataset"],
        train=sections["train"],
        search=sections["search"],
        output_dir=data.get("output_dir", RunConfig.output_dir),
        threads=data.get("threads", RunConfig.threads),
    )
    cfg.validate()
    return cfg


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "dataset": dataclasses.asdict(cfg.dataset),
        "train": dataclasses.asdict(cfg.train),
        "search": dataclasses.asdict(cfg.search),
        "output_dir": cfg.output_dir,
        "threads": cfg.threads,
    }


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from err
    return run_config_from_dict(data)


def save_config_snapshot(cfg: RunConfig, run_dir: Path) -> None:
    snapshot = run_config_to_dict(cfg)
    snapshot["output_dir"] = "."
    (run_dir / CONFIG_SNAPSHOT_FILE).write_text(
        json.dumps(snapshot, indent=2, sort_keys=True) + "\n"
    )


def build_datasets(dc: DatasetConfig) -> tuple[Dataset, Dataset]:
    dc.validate()
    val_seed = dc.val_seed if dc.val_seed is not None else dc.seed + 1
    if dc.kind == "synth":
        train = synth_shapes(dc.class_count, dc.image_size, dc.train_per_class, dc.seed, "train")
        val = synth_shapes(dc.class_count, dc.image_size, dc.val_per_class, val_seed, "validation")
    elif dc.kind == "toy":
        train = toy_2d_three_class(dc.train_per_class, dc.seed, "train")
        val = toy_2d_three_class(dc.val_per_class, val_seed, "validation")
    else:
        train = load_cifar_binary(dc.train_path, "train")
        val = load_cifar_binary(dc.val_path, "validation")
    return train, val


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.search = dataclasses.replace(cfg.search, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
        cfg.validate()
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return cfg, run_dir


def cmd_train_random(args) -> int:
    cfg, run_dir = _prepare(args)
    train, val = build_datasets(cfg.dataset)
    model, metrics = train_random_patchmix(train, val, cfg.train)
    save_model(model, run_dir / FITNESS_MODEL_FILE)
    save_metrics(metrics, run_dir / FITNESS_METRICS_FILE)
    save_config_snapshot(cfg, run_dir)
    last = metrics[-1]
    print(f"val_top1,{last.val_top1!r}")
    print(f"val_patch_acc,{last.val_patch_acc!r}")
    return 0


def cmd_search(args) -> int:
    cfg, run_dir = _prepare(args)
    model_path = run_dir / FITNESS_MODEL_FILE
    if not model_path.exists():
        raise ConfigError(f"missing fitness model {model_path}; run train-random first")
    model = load_model(model_path)
    _, val = build_datasets(cfg.dataset)
    subset = fitness_val_subset(val, cfg.search)

    def fitness_fn(individual, generation):
        return evaluate_fitness(individual, model, subset, cfg.search, generation)

    best, history = run_search(
        cfg.search, val.class_count, model.grid_size, fitness_fn, cfg.threads
    )
    max_active = cfg.search.resolve_max_active(val.class_count)
    save_history(history, run_dir / SEARCH_HISTORY_FILE)
    save_individual(best, max_active, run_dir / BEST_INDIVIDUAL_FILE)
    save_config_snapshot(cfg, run_dir)
    print(f"best_score,{best.fitness!r}")
    print(f"generations,{history[-1].generation}")
    return 0


def cmd_generate(args) -> int:
    cfg, run_dir = _prepare(args)
    best_path = run_dir / BEST_INDIVIDUAL_FILE
    if not best_path.exists():
        raise ConfigError(f"missing best individual {best_path}; run search first")
    best, _ = load_individual(best_path)
    train, _ = build_datasets(cfg.dataset)
    rng = RngKey(cfg.train.seed).child("guided-set").generator()
    recipe = draw_guided_recipe(best, train, len(train), rng)
    save_guided_manifest(recipe, run_dir / GUIDED_MANIFEST_FILE)
    print(f"guided_samples,{len(recipe)}")
    return 0


def cmd_train_guided(args) -> int:
    cfg, run_dir = _prepare(args)
    best_path = run_dir / BEST_INDIVIDUAL_FILE
    manifest_path = run_dir / GUIDED_MANIFEST_FILE
    if not best_path.exists():
        raise ConfigError(f"missing best individual {best_path}; run search first")
    if not manifest_path.exists():
        raise ConfigError(f"missing guided manifest {manifest_path}; run generate first")
    best, _ = load_individual(best_path)
    train, val = build_datasets(cfg.dataset)
    recipe = load_guided_manifest(manifest_path)
    guided = materialize_guided(best, train, recipe)
    final_cfg = dataclasses.replace(cfg.train, loss_mode="image_only")
    model, metrics = train_final(train, val, final_cfg, guided)
    save_model(model, run_dir / FINAL_MODEL_FILE)
    save_metrics(metrics, run_dir / FINAL_METRICS_FILE)
    last = metrics[-1]
    print(f"val_top1,{last.val_top1!r}")
    return 0


def cmd_pipeline(args) -> int:
    cfg, run_dir = _prepare(args)
    train, val = build_datasets(cfg.dataset)
    result = run_guided_pipeline(
        train, val, cfg.train, cfg.search, run_dir, threads=cfg.threads
    )
    save_config_snapshot(cfg, run_dir)
    last = result.final_metrics[-1]
    print(f"best_score,{result.plan.best_individual.fitness!r}")
    print(f"val_top1,{last.val_top1!r}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = sniff_and_load(args.dataset)
    top1, patch_acc = evaluate_model(model, dataset)
    print(f"clean_top1,{top1!r}")
    print(f"clean_patch_acc,{patch_acc!r}")
    if args.attack is not None:
        if args.attack != "fgsm":
            raise ConfigError(f"unknown attack {args.attack!r}")
        epsilons = args.epsilon if args.epsilon else [0.1, 0.2, 0.3]
        print("epsilon,adversarial_top1")
        for eps in epsilons:
            adv = adversarial_accuracy(model, dataset, eps)
            print(f"{eps!r},{adv!r}")
    return 0


# --- boundary demo ----------------------------------------------------------
#
# The three-cluster toy stores each 2-feature point as a 1x2x1 image, and
# the demo model uses grid size 1: the single patch covers both features,
# so the encoder is an ordinary two-layer network over the point.  Grid
# masks at this size have exactly two choices (keep or swap the whole
# point); the rectangle-transplant baseline moves a 1x1 region, i.e. one
# feature.  A finer grid is no better here: single-pixel patches through
# the shared encoder cannot tell the two features apart.


def _demo_train(method: str, train: Dataset, val: Dataset, cfg: TrainConfig, threads: int):
    if method == "none":
        plain = dataclasses.replace(cfg, mix_probability=0.0)
        model, _ = train_random_patchmix(train, val, plain)
        return model
    if method == "patchmix":
        model, _ = train_random_patchmix(train, val, cfg)
        return model
    if method in ("mixup", "cutmix"):
        image_cfg = dataclasses.replace(cfg, loss_mode="image_only")

        def batches(epoch: int, rng: np.random.Generator):
            order = rng.permutation(len(train))
            for start in range(0, len(order), image_cfg.batch_size):
                idx = order[start : start + image_cfg.batch_size]
                partner = rng.permutation(len(idx))
                batch = []
                for pos, i in enumerate(idx):
                    j = int(idx[partner[pos]])
                    xi, yi = train.images[i], int(train.labels[i])
                    xj, yj = train.images[j], int(train.labels[j])
                    if method == "mixup":
                        lam = float(rng.beta(image_cfg.alpha, image_cfg.alpha))
                        batch.append(mixup(xi, yi, xj, yj, lam, train.class_count))
                    else:
                        batch.append(
                            cutmix(xi, yi, xj, yj, rng, 1, 1, train.class_count)
                        )
                yield batch

        ppc = (train.height // cfg.grid_size) * (train.width // cfg.grid_size) * train.channels
        model = ReferenceModel.initialize(
            cfg.grid_size,
            train.class_count,
            cfg.hidden_dim,
            ppc,
            RngKey(cfg.seed).child("rand-train", "init").generator(),
        )
        _train_loop(model, image_cfg, val, batches, "rand-train")
        return model
    if method == "guided":
        search_cfg = SearchConfig(
            population_size=60,
            generations=15,
            pairs_per_combo=16,
            patience=15,
            seed=cfg.seed,
        )
        with tempfile.TemporaryDirectory(prefix="pmx-demo-") as tmp:
            result = run_guided_pipeline(
                train, val, cfg, search_cfg, Path(tmp), threads=threads
            )
        return result.final_model
    raise ConfigError(f"unknown method {method!r}")


def cmd_boundary_demo(args) -> int:
    if args.method not in DEMO_METHODS:
        raise ConfigError(f"method must be one of {DEMO_METHODS}, got {args.method!r}")
    out_path = Path(args.out)
    rows = run_boundary_demo(
        args.method,
        seed=args.seed,
        samples_per_class=args.samples_per_class,
        epochs=args.epochs,
    )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(rows) + "\n")
    print(f"grid_rows,{len(rows) - 1}")
    return 0


def run_boundary_demo(
    method: str,
    seed: int = 0,
    samples_per_class: int = 100,
    epochs: int = 200,
) -> list[str]:
    """Train on the three-cluster toy and rasterize the decision regions.

    Returns CSV lines ("x,y,class" header plus 200x200 grid rows over the
    data bounding box).
    """
    if method not in DEMO_METHODS:
        raise ConfigError(f"method must be one of {DEMO_METHODS}, got {method!r}")
    train = toy_2d_three_class(samples_per_class, seed, "train")
    val = toy_2d_three_class(max(20, samples_per_class // 4), seed + 1, "validation")
    cfg = TrainConfig(epochs=epochs, grid_size=1, hidden_dim=32, seed=seed)
    model = _demo_train(method, train, val, cfg, threads=1)

    feats = train.images.reshape(len(train), 2).astype(np.float64)
    xs = np.linspace(feats[:, 0].min(), feats[:, 0].max(), GRID_RESOLUTION)
    ys = np.linspace(feats[:, 1].min(), feats[:, 1].max(), GRID_RESOLUTION)
    lines = ["x,y,class"]
    for y in ys:
        grid = np.stack([xs, np.full_like(xs, y)], axis=1)
        points = grid.astype(np.float32).reshape(-1, 1, 2, 1)
        _, image_logits = forward_batch(model, points)
        preds = np.argmax(image_logits, axis=1)
        lines.extend(f"{float(x)!r},{float(y)!r},{int(p)}" for x, p in zip(xs, preds))
    return lines


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchmix",
        description="Grid-mask pairwise interpolation with patch supervision and guided mask search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name, func, help_text):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="JSON run config")
        cmd.add_argument("--seed", type=int, default=None, help="override train/search seeds")
        cmd.add_argument("--threads", type=int, default=None, help="parallel fitness evaluations")
        cmd.set_defaults(func=func)
        return cmd

    add_config_command("train-random", cmd_train_random, "phase 1: train on randomly mixed batches")
    add_config_command("search", cmd_search, "phase 2: genetic mask/pair search")
    add_config_command("generate", cmd_generate, "phase 3: write the guided set manifest")
    add_config_command("train-guided", cmd_train_guided, "phase 4: train the final model")
    add_config_command("pipeline", cmd_pipeline, "all four phases")

    ev = sub.add_parser("eval", help="evaluate a model checkpoint on a dataset file")
    ev.add_argument("--model", required=True)
    ev.add_argument("--dataset", required=True, help="dataset checkpoint or CIFAR binary batch")
    ev.add_argument("--attack", default=None, choices=["fgsm"])
    ev.add_argument(
        "--epsilon", type=float, action="append", default=None,
        help="attack strength; repeat for several values (default 0.1 0.2 0.3)",
    )
    ev.set_defaults(func=cmd_eval)

    demo = sub.add_parser("boundary-demo", help="decision-region raster on the 2-D toy data")
    demo.add_argument("--method", required=True, choices=DEMO_METHODS)
    demo.add_argument("--out", required=True, help="output CSV path")
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--samples-per-class", type=int, default=100)
    demo.add_argument("--epochs", type=int, default=200)
    demo.set_defaults(func=cmd_boundary_demo)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
