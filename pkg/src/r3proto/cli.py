"""Command-line pipeline: dataset generation through R3 fine-tuning and reports.

Configuration comes from a TOML file (``--config``) overridden by flags; the
output root can also be set with the R3PROTO_OUT environment variable. Outputs
are never overwritten silently: an existing file is rotated to a numbered
sibling first.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from . import core, data, evaluation, feedback, r3, reward, train
from .errors import ConfigurationError, ContractError, IngestionError

log = logging.getLogger(__name__)


@dataclass
class DatasetParams:
    classes: int = 10
    per_class: int = 30
    size: int = 64
    seed: int = 7
    augment: bool = False


@dataclass
class ModelParams:
    protos_per_class: int = 5
    depth: int = 64
    eps: float = 1e-4
    seed: int = 0


@dataclass
class PipelineConfig:
    out: Path = Path("runs/default")
    port: int = 8321
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelParams = field(default_factory=ModelParams)
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    reward: reward.RewardTrainConfig = field(default_factory=reward.RewardTrainConfig)
    r3: r3.R3Config = field(default_factory=r3.R3Config)


_SECTIONS = {
    "dataset": "dataset",
    "model": "model",
    "train": "train",
    "reward": "reward",
    "r3": "r3",
}


def load_config(path: Path | None, out_flag: str | None) -> PipelineConfig:
    cfg = PipelineConfig()
    doc: dict = {}
    if path is not None:
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "rb") as f:
            doc = tomli.load(f)
    for section, attr in _SECTIONS.items():
        sub = getattr(cfg, attr)
        for key, value in doc.get(section, {}).items():
            if not hasattr(sub, key):
                raise ConfigurationError(f"unknown config key [{section}] {key}")
            setattr(sub, key, value)
    pipeline = doc.get("pipeline", {})
    if "out" in pipeline:
        cfg.out = Path(pipeline["out"])
    if "port" in pipeline:
        cfg.port = int(pipeline["port"])
    # precedence: env var beats file, explicit flag beats both
    env_out = os.environ.get("R3PROTO_OUT")
    if env_out:
        cfg.out = Path(env_out)
    if out_flag:
        cfg.out = Path(out_flag)
    return cfg


def apply_overrides(obj, args: argparse.Namespace, names: dict[str, str]) -> None:
    """Copy non-None parsed flags onto a config dataclass."""
    for arg_name, attr in names.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(obj, attr, value)


def rotate_existing(path: Path) -> None:
    """Move an existing output aside to <name>.<n> instead of overwriting."""
    if not path.exists():
        return
    n = 1
    while True:
        backup = path.with_name(f"{path.name}.{n}")
        if not backup.exists():
            break
        n += 1
    path.rename(backup)
    print(f"note: existing {path} rotated to {backup}", file=sys.stderr)


def _declare(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    rotate_existing(path)
    return path


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigurationError(f"{what} not found: {path}")
    return path


def _dataset_path(cfg: PipelineConfig, args) -> Path:
    p = Path(args.data) if getattr(args, "data", None) else cfg.out / "dataset" / "manifest.json"
    return _require_file(p, "dataset manifest (--data)")


def _load_model(path: Path):
    return core.load_checkpoint(_require_file(path, "model checkpoint (--model)"))


# ---------------------------------------------------------------- subcommands


def cmd_synth_gen(cfg: PipelineConfig, args) -> None:
    d = cfg.dataset
    manifest = data.generate_synthetic(d.classes, d.per_class, d.size, d.seed)
    if d.augment:
        manifest = data.augment(manifest, d.seed)
    out_dir = cfg.out / "dataset"
    _declare(out_dir / "manifest.json")
    path = data.save_dataset(manifest, out_dir)
    print(f"wrote {path} ({len(manifest.images)} images, K={manifest.num_classes})")


def cmd_train(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    m = cfg.model
    model = core.new_model(
        manifest.num_classes, m.protos_per_class, m.depth, manifest.image_size(), m.eps, m.seed
    )
    result = train.train(model, manifest, cfg.train)
    model_path = _declare(Path(args.save) if args.save else cfg.out / "model_base.pt")
    log_path = _declare(model_path.with_name(model_path.stem + "_train_log.jsonl"))
    core.save_checkpoint(result.model, model_path, model_id=model_path.stem,
                         hparams=dataclasses.asdict(cfg.train))
    train.write_metrics(result.log, log_path)
    acc = evaluation.test_accuracy(result.model, manifest)
    print(f"wrote {model_path} (test accuracy {acc:.4f}) and {log_path}")


def cmd_serve_ratings(cfg: PipelineConfig, args) -> None:
    from . import service

    manifest = data.load_dataset(_dataset_path(cfg, args))
    model, meta = _load_model(Path(args.model) if args.model else cfg.out / "model_base.pt")
    store = feedback.RatingStore(
        Path(args.ratings) if args.ratings else cfg.out / "ratings.jsonl"
    )
    ui_dir = Path(args.ui) if args.ui else None
    app = service.create_app(model, meta["model_id"], manifest, store, ui_dir)
    port = args.port if args.port else cfg.port
    print(f"serving ratings for {meta['model_id']} on http://127.0.0.1:{port}")
    service.serve(app, port)


def cmd_oracle_rate(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    if not manifest.masks:
        raise ContractError("oracle rating needs a synthetic dataset with object masks")
    model, meta = _load_model(Path(args.model) if args.model else cfg.out / "model_base.pt")
    store = feedback.RatingStore(
        Path(args.ratings) if args.ratings else cfg.out / "ratings.jsonl"
    )
    pool = feedback.TaskPool(feedback.pool_from_model(model, manifest), meta["model_id"])
    rater = args.rater or "oracle"
    n_rated = 0
    for _ in range(args.n):
        task = pool.next_task(rater, store)
        if task is None:
            break
        amap = core.activation_map(model, task.prototype_id, manifest.image(task.image_id))
        rating = feedback.oracle_rate(manifest.sample(task.image_id), amap)
        store.add(
            feedback.RatingRecord(
                rating_id=str(uuid.uuid4()),
                image_id=task.image_id,
                prototype_id=task.prototype_id,
                model_id=meta["model_id"],
                rating=rating,
                rater_id=rater,
                timestamp=time.time(),
            )
        )
        n_rated += 1
    print(f"oracle rated {n_rated} tasks into {store.path}")


def cmd_build_comparisons(cfg: PipelineConfig, args) -> None:
    ratings_path = _require_file(
        Path(args.ratings) if args.ratings else cfg.out / "ratings.jsonl", "ratings file"
    )
    store = feedback.RatingStore(ratings_path)
    train_pairs, test_pairs = feedback.build_comparisons(
        store.all(), split_seed=args.seed, test_fraction=args.test_fraction
    )
    train_path = _declare(cfg.out / "comparisons_train.jsonl")
    test_path = _declare(cfg.out / "comparisons_test.jsonl")
    feedback.save_comparisons(train_pairs, train_path)
    feedback.save_comparisons(test_pairs, test_path)
    print(f"wrote {len(train_pairs)} train / {len(test_pairs)} test comparisons")


def cmd_train_reward(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    model, _ = _load_model(Path(args.model) if args.model else cfg.out / "model_base.pt")
    train_pairs = feedback.load_comparisons(
        _require_file(cfg.out / "comparisons_train.jsonl", "train comparisons")
    )
    test_pairs = feedback.load_comparisons(
        _require_file(cfg.out / "comparisons_test.jsonl", "test comparisons")
    )
    keys = sorted({p.left for p in train_pairs + test_pairs} | {p.right for p in train_pairs + test_pairs})
    bank = reward.ItemBank.from_model(model, manifest, keys)
    net, curve = reward.train_reward(train_pairs, test_pairs, bank, cfg.reward)
    net_path = _declare(Path(args.save) if args.save else cfg.out / "reward.pt")
    curve_path = _declare(cfg.out / "reward_curve.jsonl")
    reward.save_reward_checkpoint(net, net_path, hparams=dataclasses.asdict(cfg.reward))
    reward.write_curve(curve, curve_path)
    final = curve[-1].get("test_accuracy")
    print(f"wrote {net_path} (held-out ranking accuracy {final})")


def _load_reward(cfg: PipelineConfig, args):
    return reward.load_reward_checkpoint(
        _require_file(Path(args.reward) if args.reward else cfg.out / "reward.pt",
                      "reward checkpoint (--reward)")
    )


def cmd_r2(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    model, meta = _load_model(Path(args.model) if args.model else cfg.out / "model_base.pt")
    net = _load_reward(cfg, args)
    updated, changes = r3.r2_update(model, net, manifest, cfg.r3)
    model_path = _declare(Path(args.save) if args.save else cfg.out / "model_r2.pt")
    report_path = _declare(cfg.out / "change_report_r2.jsonl")
    core.save_checkpoint(updated, model_path, model_id=model_path.stem, hparams=meta["hparams"])
    r3.write_change_report(changes, report_path)
    print(f"wrote {model_path} and {report_path}")


def cmd_r3(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    model, meta = _load_model(Path(args.model) if args.model else cfg.out / "model_base.pt")
    net = _load_reward(cfg, args)
    retrained, changes, result = r3.r3_update(model, net, manifest, cfg.train, cfg.r3)
    model_path = _declare(Path(args.save) if args.save else cfg.out / "model_r3.pt")
    report_path = _declare(cfg.out / "change_report_r3.jsonl")
    log_path = _declare(cfg.out / "model_r3_train_log.jsonl")
    core.save_checkpoint(retrained, model_path, model_id=model_path.stem, hparams=meta["hparams"])
    r3.write_change_report(changes, report_path)
    train.write_metrics(result.log, log_path)
    print(f"wrote {model_path}, {report_path}, {log_path}")


def cmd_eval(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    default_model = cfg.out / f"model_{args.stage}.pt"
    model, meta = _load_model(Path(args.model) if args.model else default_model)
    net = _load_reward(cfg, args)
    out_dir = cfg.out / "reports"
    rep = evaluation.report(model, args.stage, net, manifest, out_dir, meta["model_id"])
    # refresh the combined stage table from whatever reports exist
    reports = []
    for stage in evaluation.STAGES:
        p = out_dir / f"eval_{stage}.json"
        if p.exists():
            reports.append(evaluation.EvalReport.from_dict(json.loads(p.read_text())))
    evaluation.write_stage_table(reports, out_dir / "stage_comparison.csv")
    print(
        f"stage {args.stage}: accuracy {rep.test_accuracy:.4f}, "
        f"mean reward {rep.mean_reward:.4f}, top5 mismatch {rep.mismatch_top5:.2f}"
    )


def cmd_ensemble_eval(cfg: PipelineConfig, args) -> None:
    manifest = data.load_dataset(_dataset_path(cfg, args))
    paths = [Path(p) for p in args.models.split(",") if p]
    models = [_load_model(p)[0] for p in paths]
    acc = evaluation.ensemble_accuracy(models, manifest)
    out = _declare(cfg.out / "ensemble_eval.json")
    out.write_text(
        json.dumps({"models": [p.name for p in paths], "test_accuracy": acc}, indent=2)
    )
    print(f"ensemble of {len(models)}: test accuracy {acc:.4f}")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="r3proto",
        description="prototype-network training with reward-model fine-tuning",
    )
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--out", default=None, help="output root (also R3PROTO_OUT)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic shapes dataset")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None, dest="per_class")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--augment", action="store_true", default=None)

    p = sub.add_parser("train", help="train the base prototype network")
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--save", dest="save", default=None, help="checkpoint output path")

    p = sub.add_parser("serve-ratings", help="serve rating tasks over HTTP")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--ratings", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--ui", default=None, help="static rating UI bundle directory")

    p = sub.add_parser("oracle-rate", help="rate tasks automatically from object masks")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--ratings", default=None)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--rater", default=None)

    p = sub.add_parser("build-comparisons", help="induce pairwise comparisons from ratings")
    p.add_argument("--ratings", default=None)
    p.add_argument("--test-fraction", type=float, default=0.2, dest="test_fraction")
    p.add_argument("--seed", type=int, default=13)

    p = sub.add_parser("train-reward", help="train the reward model on comparisons")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--save", dest="save", default=None, help="checkpoint output path")

    p = sub.add_parser("r2", help="reweigh + reselect prototypes")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--reward", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--save", dest="save", default=None, help="checkpoint output path")

    p = sub.add_parser("r3", help="reweigh + reselect + retrain")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--reward", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="retraining epochs")
    p.add_argument("--save", dest="save", default=None, help="checkpoint output path")

    p = sub.add_parser("eval", help="evaluate one stage and refresh the stage table")
    p.add_argument("--stage", choices=list(evaluation.STAGES), required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--reward", default=None)

    p = sub.add_parser("ensemble-eval", help="mean-logit ensemble accuracy")
    p.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--data", default=None)

    return parser


_COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "serve-ratings": cmd_serve_ratings,
    "oracle-rate": cmd_oracle_rate,
    "build-comparisons": cmd_build_comparisons,
    "train-reward": cmd_train_reward,
    "r2": cmd_r2,
    "r3": cmd_r3,
    "eval": cmd_eval,
    "ensemble-eval": cmd_ensemble_eval,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.out if hasattr(args, "out") else None)
        # subcommand flags override config-file values
        apply_overrides(cfg.dataset, args, {"classes": "classes", "per_class": "per_class",
                                            "size": "size", "augment": "augment"})
        if args.command == "synth-gen" and getattr(args, "seed", None) is not None:
            cfg.dataset.seed = args.seed
        if args.command in ("train", "r3"):
            apply_overrides(cfg.train, args, {"epochs": "epochs", "seed": "seed",
                                              "batch_size": "batch_size"})
        if args.command == "train-reward":
            apply_overrides(cfg.reward, args, {"epochs": "epochs", "seed": "seed"})
        if args.command in ("r2",) and getattr(args, "seed", None) is not None:
            cfg.r3.seed = args.seed
        _COMMANDS[args.command](cfg, args)
    except (ConfigurationError, ContractError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
