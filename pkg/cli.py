"""
Command-line front end: train, evaluate, analyze, ablate and synth.

Command-line usage:
    python cli.py train --preset acl-imdb --objective mixed --labeled train.tsv --unlabeled un.txt --out run
    python cli.py train --preset synthetic --objective ml --out runs/ml
    python cli.py evaluate --checkpoint runs/ml/best.npz --split test
    python cli.py analyze neighbors --checkpoint runs/ml/best.npz --word w00003
    python cli.py ablate --preset synthetic --grid table5 --dry-run --out sweeps/t5
    python cli.py synth --preset synthetic --out data/
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

import config
from analysis import (
    ENSEMBLE_MEMBERS, curve_runner, evaluate, exclusive_wins, grid_search_weights,
    nearest_neighbors, report_from_probs, write_sweep,
)
from classifier_model import ModelConfig, init_model, load_checkpoint, predict_probs
from corpus import Dataset, Example, dataset_paths, generate_synthetic, holdout_split, load_dataset, save_dataset
from errors import CheckpointError, ConfigurationError, ContractError, MixedObjError
from numeric_core import RngStreams, make_rng
from objectives import ObjectiveConfig
from trainer import TrainConfig, train
from vocab_embed import (
    EMBED_MODES, build_vocabulary, dump_vocabulary, load_pretrained, load_vocabulary, random_embeddings,
)

logger = logging.getLogger(__name__)

GRIDS = ("table5", "table7", "labeled", "unlabeled", "hidden", "layers")

# Sweep axes that take a --values list, and the run setting each one drives
AXIS_FIELDS = {
    "labeled": "max_labeled",
    "unlabeled": "max_unlabeled",
    "hidden": "hidden_size",
    "layers": "num_layers",
}


@dataclass
class RunConfig:
    preset: Optional[str] = None
    objective: Optional[str] = "ml"
    # data
    labeled: Optional[str] = None
    unlabeled: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    num_classes: int = 2
    preprocess: bool = True
    max_labeled: Optional[int] = None
    max_unlabeled: Optional[int] = None
    unlabeled_from_train: bool = False   # labeled training texts also join the unlabeled pool
    unlabeled_from_test: bool = False
    # generated data
    synthetic: bool = False
    synth_labeled: int = 200
    synth_unlabeled: int = 2000
    synth_test: int = 1000
    synth_vocab: int = 200
    synth_signal: float = 0.9
    synth_min_len: int = 10
    synth_max_len: int = 30
    # model
    embed: Optional[str] = None
    embed_mode: str = config.EMBED_MODE
    embed_dim: int = config.EMBED_DIM
    hidden_size: int = config.HIDDEN_SIZE
    num_layers: int = config.NUM_LAYERS
    vocab_size: int = 80000
    # training
    token_budget: int = 3000
    epochs: int = config.EPOCHS_SUPERVISED
    learning_rate: float = config.LEARNING_RATE
    decay_rate: float = config.DECAY_RATE
    clip_norm: float = config.CLIP_NORM
    p_drop: float = config.P_DROP
    p_w: float = config.P_WORD
    eval_every: int = 0
    unlabeled_batching: str = config.UNLABELED_BATCHING
    progress: bool = True
    # objective
    lambda_ml: float = config.LAMBDA_DEFAULT
    lambda_at: float = 0.0
    lambda_em: float = 0.0
    lambda_vat: float = 0.0
    epsilon: float = 5.0
    xi: float = config.XI
    use_labeled: bool = True
    use_unlabeled: bool = False
    # run
    seed: int = config.SEED
    data_seed: Optional[int] = None
    out: Optional[str] = None

    def validate(self):
        if self.preset is not None and self.preset not in config.PRESETS:
            raise ConfigurationError("preset", f"unknown preset '{self.preset}'")
        if self.objective is not None and self.objective not in config.OBJECTIVES:
            raise ConfigurationError("objective", f"must be one of {sorted(config.OBJECTIVES)}")
        if self.embed_mode not in EMBED_MODES:
            raise ConfigurationError("embed_mode", f"must be one of {EMBED_MODES}")
        for name in ("num_classes", "embed_dim", "hidden_size", "num_layers", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("max_labeled", "max_unlabeled"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ConfigurationError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.synthetic:
            if self.num_classes < 2:
                raise ConfigurationError("num_classes", "synthetic data needs at least 2 classes")
            if self.synth_vocab < 2 * self.num_classes:
                raise ConfigurationError("synth_vocab", "must be >= 2 * num_classes")
            if not 0.5 < self.synth_signal <= 1.0:
                raise ConfigurationError("synth_signal", f"must be in (0.5, 1], got {self.synth_signal}")
            if not 1 <= self.synth_min_len <= self.synth_max_len:
                raise ConfigurationError("synth_min_len", "need 1 <= synth_min_len <= synth_max_len")
            for name in ("synth_labeled", "synth_unlabeled", "synth_test"):
                if getattr(self, name) < 0:
                    raise ConfigurationError(name, f"must be >= 0, got {getattr(self, name)}")
        self.train_config().validate()
        return self

    def objective_config(self):
        return ObjectiveConfig(self.lambda_ml, self.lambda_at, self.lambda_em, self.lambda_vat,
                               self.epsilon, self.xi, self.use_labeled, self.use_unlabeled)

    def train_config(self):
        return TrainConfig(
            token_budget=self.token_budget,
            learning_rate=self.learning_rate,
            decay_rate=self.decay_rate,
            max_epochs=self.epochs,
            clip_norm=self.clip_norm,
            p_drop=self.p_drop,
            p_w=self.p_w,
            seed=self.seed,
            objective=self.objective_config(),
            eval_every=self.eval_every,
            unlabeled_batching=self.unlabeled_batching,
            progress=self.progress,
        )

    def model_config(self):
        return ModelConfig(self.embed_dim, self.hidden_size, self.num_classes, self.num_layers)

    def to_dict(self):
        return asdict(self)


RUN_FIELDS = tuple(f.name for f in fields(RunConfig))


def _apply_layer(values, layer, source):
    """Merge one configuration layer; an objective expands before the layer's explicit keys"""
    unknown = sorted(set(layer) - set(RUN_FIELDS))
    if unknown:
        raise ConfigurationError(unknown[0], f"unknown configuration key in {source}")
    objective = layer.get("objective")
    if objective is not None:
        if objective not in config.OBJECTIVES:
            raise ConfigurationError("objective", f"must be one of {sorted(config.OBJECTIVES)}")
        shortcut = config.OBJECTIVES[objective]
        values["lambda_ml"], values["lambda_at"], values["lambda_em"], values["lambda_vat"] = shortcut["lambdas"]
        values["epochs"] = shortcut["epochs"]
        values["use_unlabeled"] = shortcut["use_unlabeled"]
    values.update(layer)


def read_config_file(path):
    logger.info("Reading config file: %s", path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            layer = json.load(handle)
    except json.JSONDecodeError as e:
        raise ConfigurationError("config", f"{path} is not valid JSON ({e})") from None
    if not isinstance(layer, dict):
        raise ConfigurationError("config", f"{path} must hold a JSON object")
    return layer


def resolve_config(flags=None, config_file=None):
    """defaults < preset < config file < command-line flags"""
    flags = dict(flags or {})
    file_layer = read_config_file(config_file) if config_file else {}
    preset = flags.get("preset", file_layer.get("preset"))
    values = RunConfig().to_dict()
    if preset is not None:
        if preset not in config.PRESETS:
            raise ConfigurationError("preset", f"unknown preset '{preset}'")
        _apply_layer(values, dict(config.PRESETS[preset], preset=preset), f"preset '{preset}'")
    if file_layer:
        _apply_layer(values, file_layer, config_file)
    _apply_layer(values, flags, "command-line flags")
    return RunConfig(**values).validate()


def with_overrides(run_config, overrides, source="sweep setting"):
    values = run_config.to_dict()
    _apply_layer(values, overrides, source)
    return RunConfig(**values).validate()


def write_config(run_config, run_dir):
    path = os.path.join(run_dir, config.CONFIG_FILE_NAME)
    logger.info("Saving resolved config: %s", path)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(run_config.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


# =============================================================================
# Data and model preparation
# =============================================================================

class Splits(NamedTuple):
    train: Dataset
    dev: Dataset
    test: Optional[Dataset]


def _data_seed(run_config):
    return run_config.seed if run_config.data_seed is None else run_config.data_seed


def _subsample(examples, limit, rng):
    if limit is None or limit >= len(examples):
        return tuple(examples)
    keep = sorted(rng.permutation(len(examples))[:limit].tolist())
    return tuple(examples[i] for i in keep)


def load_splits(run_config):
    """Train, dev and test datasets for a run.

    A --labeled file takes precedence over generated data. Dev is a seeded
    holdout when no dev file is given.
    """
    seed = _data_seed(run_config)
    if run_config.synthetic and run_config.labeled is None:
        length_range = (run_config.synth_min_len, run_config.synth_max_len)
        common = dict(num_classes=run_config.num_classes, vocab_size=run_config.synth_vocab,
                      len_range=length_range, signal_strength=run_config.synth_signal)
        train_set = generate_synthetic(seed, run_config.synth_labeled, run_config.synth_unlabeled,
                                       split="train", **common)
        test_set = generate_synthetic(seed, run_config.synth_test, 0, split="test", **common)
        dev_set = None
    else:
        if run_config.labeled is None:
            raise ConfigurationError("labeled", "a labeled training file is required unless --synthetic is set")
        train_set = load_dataset(run_config.labeled, run_config.unlabeled, run_config.num_classes,
                                 "train", run_config.preprocess)
        dev_set = test_set = None
        if run_config.dev:
            dev_set = load_dataset(run_config.dev, None, run_config.num_classes, "dev", run_config.preprocess)
        if run_config.test:
            test_set = load_dataset(run_config.test, None, run_config.num_classes, "test", run_config.preprocess)

    if dev_set is None:
        train_set, dev_set = holdout_split(train_set, config.DEV_FRACTION, make_rng(run_config.seed, "holdout"))
    if test_set is not None and not test_set.labeled:
        test_set = None
    pool = list(train_set.unlabeled)
    if run_config.unlabeled_from_train:
        pool.extend(Example(ex.tokens) for ex in train_set.labeled)
    if run_config.unlabeled_from_test and test_set is not None:
        pool.extend(Example(ex.tokens) for ex in test_set.labeled)
    if len(pool) > train_set.num_unlabeled:
        logger.info("Unlabeled pool: %d file documents plus %d labeled texts",
                    train_set.num_unlabeled, len(pool) - train_set.num_unlabeled)
    rng = make_rng(seed, "subsample")
    train_set = Dataset(_subsample(train_set.labeled, run_config.max_labeled, rng),
                        _subsample(pool, run_config.max_unlabeled, rng),
                        train_set.num_classes, "train")
    return Splits(train_set, dev_set, test_set)


def build_model(run_config, train_set):
    rngs = RngStreams(run_config.seed)
    vocab = build_vocabulary(list(train_set.labeled) + list(train_set.unlabeled), run_config.vocab_size)
    finetune = run_config.embed_mode != "static"
    if run_config.embed and run_config.embed_mode != "random":
        embedding = load_pretrained(run_config.embed, vocab, rngs["embedding"], run_config.embed_dim, finetune)
    else:
        if run_config.embed_mode == "static":
            logger.warning("Static embeddings requested without a pretrained file; using frozen random vectors")
        embedding = random_embeddings(vocab, run_config.embed_dim, rngs["embedding"], finetune)
    params = init_model(run_config.model_config(), embedding, rngs["init"])
    return vocab, params


def run_and_evaluate(run_config, run_dir=None, resume=False):
    """Train one configuration and evaluate its best-dev model on the test split"""
    splits = load_splits(run_config)
    vocab, params = build_model(run_config, splits.train)
    if run_dir is not None:
        dump_vocabulary(vocab, os.path.join(run_dir, config.VOCAB_FILE_NAME))
    result = train(splits.train, params, vocab, run_config.train_config(), dev=splits.dev,
                   run_dir=run_dir, resume=resume, config_snapshot=run_config.to_dict())
    report = evaluate(result.best_params, splits.test, vocab) if splits.test is not None else None
    return result, report


# =============================================================================
# Commands
# =============================================================================

def _write_json(path, record):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(record, handle, indent=2, sort_keys=True)
        handle.write("\n")


def cmd_train(run_config, resume=False):
    """Train and write config, vocabulary, metrics, checkpoints and test report to the run directory"""
    run_dir = run_config.out or "run"
    os.makedirs(run_dir, exist_ok=True)
    write_config(run_config, run_dir)
    result, report = run_and_evaluate(run_config, run_dir, resume)
    if report is not None:
        path = os.path.join(run_dir, config.REPORT_FILE_NAME)
        logger.info("Test error %.4f on %d examples; saving report: %s", report.error_rate, report.n, path)
        _write_json(path, report.to_record())
    else:
        logger.info("No test split configured; best dev error %s", result.best_dev_error)
    return run_dir


def _run_config_near(checkpoint):
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), config.CONFIG_FILE_NAME)
    if not os.path.exists(path):
        raise ConfigurationError("config", f"no {config.CONFIG_FILE_NAME} next to {checkpoint}")
    return resolve_config(config_file=path)


def _load_model(checkpoint, vocab_path=None):
    if not os.path.exists(checkpoint):
        raise CheckpointError(checkpoint, "checkpoint file not found")
    vocab_path = vocab_path or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), config.VOCAB_FILE_NAME)
    vocab = load_vocabulary(vocab_path)
    return load_checkpoint(checkpoint, vocab), vocab


def _labeled_split(checkpoint, meta, labeled=None, split="test"):
    snapshot = meta.get("config") or {}
    num_classes = meta["model_config"]["num_classes"]
    if labeled is not None:
        return load_dataset(labeled, None, num_classes, split if split in ("dev", "test") else "test",
                            snapshot.get("preprocess", True))
    splits = load_splits(_run_config_near(checkpoint))
    dataset = getattr(splits, split)
    if dataset is None:
        raise ContractError(f"the run has no {split} split")
    return dataset


def cmd_evaluate(checkpoint, labeled=None, split="test", vocab_path=None, report_path=None):
    """Evaluate a checkpoint on a labeled file, or on a split rebuilt from the run's config"""
    loaded, vocab = _load_model(checkpoint, vocab_path)
    dataset = _labeled_split(checkpoint, loaded.meta, labeled, split)
    report = evaluate(loaded.params, dataset, vocab)
    record = report.to_record()
    record["checkpoint"] = checkpoint
    record["split"] = dataset.split
    if report_path is None:
        report_path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), f"evaluate-{dataset.split}.json")
    _write_json(report_path, record)
    print(json.dumps(record, sort_keys=True))
    return report


def cmd_analyze_neighbors(checkpoint, word, k=config.NEIGHBORS_K, vocab_path=None):
    loaded, vocab = _load_model(checkpoint, vocab_path)
    neighbors = nearest_neighbors(word, loaded.params.embedding, vocab, k)
    for rank, (neighbor, cosine) in enumerate(neighbors, start=1):
        print(f"{rank}\t{neighbor}\t{cosine:.4f}")
    return neighbors


def cmd_analyze_histogram(checkpoint, labeled=None, split="test", vocab_path=None, out=None):
    loaded, vocab = _load_model(checkpoint, vocab_path)
    dataset = _labeled_split(checkpoint, loaded.meta, labeled, split)
    frame = evaluate(loaded.params, dataset, vocab).histogram_frame()
    if out:
        logger.info("Saving histogram: %s", out)
        frame.to_csv(out, index=False)
    print(frame.to_string(index=False))
    return frame


def cmd_analyze_ensemble(checkpoints, labeled=None, split="test", grid_step=config.GRID_STEP):
    """Grid-search interpolation weights over four checkpoints (ML, AT, VAT, EM order)"""
    if len(checkpoints) != len(ENSEMBLE_MEMBERS):
        raise ConfigurationError("checkpoints", f"expected {len(ENSEMBLE_MEMBERS)} checkpoints "
                                                f"in {'/'.join(ENSEMBLE_MEMBERS)} order")
    prob_sets = {}
    labels = None
    for name, checkpoint in zip(ENSEMBLE_MEMBERS, checkpoints):
        loaded, vocab = _load_model(checkpoint)
        dataset = _labeled_split(checkpoint, loaded.meta, labeled, split)
        prob_sets[name] = predict_probs(loaded.params, dataset.labeled, vocab, config.EVAL_BATCH_SIZE)
        if labels is None:
            labels = dataset.labels()
        elif not np.array_equal(labels, dataset.labels()):
            raise ContractError(f"checkpoint {checkpoint} was evaluated on different examples")
    result = grid_search_weights(prob_sets, labels, grid_step)
    singles = {name: report_from_probs(probs, labels).error_rate for name, probs in prob_sets.items()}
    wins = {name: len(indices) for name, indices in exclusive_wins(prob_sets, labels).items()}
    record = {"weights": dict(zip(ENSEMBLE_MEMBERS, result.weights.as_tuple())), "error": result.error,
              "candidates": result.candidates, "member_errors": singles, "exclusive_wins": wins}
    print(json.dumps(record, sort_keys=True))
    return record


def grid_settings(grid, values=None):
    """Sweep settings (run-config overrides plus descriptive columns) for a named grid"""
    if grid == "table5":
        return [{"L": bool(l), "U": bool(u), "lambda_ml": float(ml), "lambda_at": float(at),
                 "lambda_em": float(em), "lambda_vat": float(vat)}
                for l, u, ml, at, em, vat in config.TABLE5_GRID]
    if grid == "table7":
        return [dict(row) for row in config.TABLE7_GRID]
    if grid in AXIS_FIELDS:
        return [{AXIS_FIELDS[grid]: int(v)} for v in (values or [])]
    raise ConfigurationError("grid", f"must be one of {GRIDS}")


# Columns of a setting that only label the row
_LABEL_KEYS = {"name": None, "L": "use_labeled", "U": "use_unlabeled"}


def setting_overrides(setting):
    overrides = {}
    for key, value in setting.items():
        if key in _LABEL_KEYS:
            if _LABEL_KEYS[key]:
                overrides[_LABEL_KEYS[key]] = value
        else:
            overrides[key] = value
    return overrides


def sweep_runner(base, setting, index):
    """Independent seeded run for one sweep setting"""
    run_seed = int(make_rng(base.seed, "sweep", index).integers(0, 2 ** 31 - 1))
    overrides = setting_overrides({k: v for k, v in setting.items() if k != "repeat"})
    overrides.update({"seed": run_seed, "data_seed": _data_seed(base) + setting.get("repeat", 0),
                      "progress": False})
    run_config = with_overrides(base, overrides)
    result, report = run_and_evaluate(run_config)
    return {"seed": run_seed, "dev_error": result.best_dev_error,
            "error": report.error_rate if report is not None else result.best_dev_error}


def cmd_ablate(run_config, grid, values=None, repeats=1, dry_run=False, workers=None):
    settings = [dict(s, repeat=r) for s in grid_settings(grid, values) for r in range(repeats)]
    for setting in settings:
        with_overrides(run_config, setting_overrides({k: v for k, v in setting.items() if k != "repeat"}))
    if dry_run:
        frame = curve_runner(settings, run_config, lambda base, setting, index: {"error": None}, workers=1)
    else:
        frame = curve_runner(settings, run_config, sweep_runner, workers)
    write_sweep(frame, run_config.out or "sweep")
    print(frame.to_string(index=False))
    return frame


def cmd_synth(run_config):
    """Write generated train (labeled + unlabeled) and test files to the output directory"""
    if not run_config.synthetic:
        run_config = with_overrides(run_config, {"synthetic": True})
    directory = run_config.out or "data"
    os.makedirs(directory, exist_ok=True)
    seed = _data_seed(run_config)
    common = dict(num_classes=run_config.num_classes, vocab_size=run_config.synth_vocab,
                  len_range=(run_config.synth_min_len, run_config.synth_max_len),
                  signal_strength=run_config.synth_signal)
    written = []
    for split, labeled_count, unlabeled_count in (("train", run_config.synth_labeled, run_config.synth_unlabeled),
                                                  ("test", run_config.synth_test, 0)):
        dataset = generate_synthetic(seed, labeled_count, unlabeled_count, split=split, **common)
        labeled_path, unlabeled_path = dataset_paths(directory, split)
        save_dataset(dataset, labeled_path, unlabeled_path)
        written.append(labeled_path)
        if dataset.unlabeled:
            written.append(unlabeled_path)
    return written


# =============================================================================
# Argument parsing
# =============================================================================

def _run_flags():
    """Flags that override RunConfig fields; absent flags leave lower layers untouched"""
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", dest="config_file", help="JSON config file (e.g. a run's config.json)")
    p.add_argument("--preset", choices=sorted(config.PRESETS), help="Per-dataset settings")
    p.add_argument("--objective", choices=sorted(config.OBJECTIVES), help="Objective shortcut")
    p.add_argument("--labeled", help="Labeled training file (label<TAB>text)")
    p.add_argument("--unlabeled", help="Unlabeled training file (one document per line)")
    p.add_argument("--unlabeled-from-train", dest="unlabeled_from_train", action="store_true",
                   help="Add the labeled training texts to the unlabeled pool")
    p.add_argument("--unlabeled-from-test", dest="unlabeled_from_test", action="store_true",
                   help="Add the test texts to the unlabeled pool")
    p.add_argument("--dev", help="Labeled dev file")
    p.add_argument("--test", help="Labeled test file")
    p.add_argument("--num-classes", dest="num_classes", type=int, help="Number of classes K")
    p.add_argument("--no-preprocess", dest="preprocess", action="store_false", help="Whitespace split only")
    p.add_argument("--epochs", type=int, help="Training epochs")
    p.add_argument("--token-budget", dest="token_budget", type=int, help="Tokens per batch")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, help="Vocabulary size")
    p.add_argument("--epsilon", type=float, help="AT/VAT perturbation norm")
    p.add_argument("--xi", type=float, help="VAT power-iteration step scale")
    p.add_argument("--lambda-ml", dest="lambda_ml", type=float)
    p.add_argument("--lambda-at", dest="lambda_at", type=float)
    p.add_argument("--lambda-em", dest="lambda_em", type=float)
    p.add_argument("--lambda-vat", dest="lambda_vat", type=float)
    p.add_argument("--hidden", dest="hidden_size", type=int, help="LSTM hidden size per direction")
    p.add_argument("--layers", dest="num_layers", type=int, help="Number of BiLSTM layers")
    p.add_argument("--embed", help="Pretrained embeddings (word2vec text format)")
    p.add_argument("--embed-dim", dest="embed_dim", type=int, help="Embedding dimension")
    p.add_argument("--embed-mode", dest="embed_mode", choices=EMBED_MODES)
    p.add_argument("--p-drop", dest="p_drop", type=float, help="Dropout probability")
    p.add_argument("--p-w", dest="p_w", type=float, help="Word dropout probability")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--decay-rate", dest="decay_rate", type=float, help="Per-epoch learning-rate decay")
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int, help="Dev check every N steps")
    p.add_argument("--unlabeled-batching", dest="unlabeled_batching", choices=("tokens", "examples"))
    p.add_argument("--no-progress", dest="progress", action="store_false")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="Output directory")
    p.add_argument("--synthetic", action="store_true", help="Train on generated data")
    p.add_argument("--synth-labeled", dest="synth_labeled", type=int)
    p.add_argument("--synth-unlabeled", dest="synth_unlabeled", type=int)
    p.add_argument("--synth-test", dest="synth_test", type=int)
    p.add_argument("--synth-vocab", dest="synth_vocab", type=int)
    p.add_argument("--synth-signal", dest="synth_signal", type=float)
    p.add_argument("--synth-min-len", dest="synth_min_len", type=int)
    p.add_argument("--synth-max-len", dest="synth_max_len", type=int)
    return p


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    run_flags = _run_flags()

    parser = argparse.ArgumentParser(description="Semi-supervised BiLSTM text classification")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", parents=[common, run_flags], help="Train a model")
    p.add_argument("--resume", action="store_true", help="Continue from last.npz in --out")
    p.set_defaults(handler=_handle_train)

    p = commands.add_parser("evaluate", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labeled", help="Labeled file; default rebuilds --split from the run's config")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--vocab", help="Vocabulary file; default vocab.tsv next to the checkpoint")
    p.add_argument("--report", help="Report path")
    p.set_defaults(handler=_handle_evaluate)

    p = commands.add_parser("analyze", help="Embedding and prediction analyses")
    analyses = p.add_subparsers(dest="analysis", required=True)
    a = analyses.add_parser("neighbors", parents=[common], help="Nearest neighbors of a word")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--word", required=True)
    a.add_argument("--k", type=int, default=config.NEIGHBORS_K)
    a.add_argument("--vocab")
    a.set_defaults(handler=_handle_neighbors)
    a = analyses.add_parser("histogram", parents=[common], help="Prediction-probability histogram")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--labeled")
    a.add_argument("--split", choices=("train", "dev", "test"), default="test")
    a.add_argument("--vocab")
    a.add_argument("--csv", help="Write the histogram as CSV")
    a.set_defaults(handler=_handle_histogram)
    a = analyses.add_parser("ensemble", parents=[common], help="Interpolate four checkpoints")
    a.add_argument("--checkpoints", nargs=4, required=True, metavar=("ML", "AT", "VAT", "EM"))
    a.add_argument("--labeled")
    a.add_argument("--split", choices=("train", "dev", "test"), default="dev")
    a.add_argument("--grid-step", type=float, default=config.GRID_STEP)
    a.set_defaults(handler=_handle_ensemble)

    p = commands.add_parser("ablate", parents=[common, run_flags], help="Run a sweep")
    p.add_argument("--grid", choices=GRIDS, required=True)
    p.add_argument("--values", default="", help="Comma-separated axis values for labeled/unlabeled/hidden/layers")
    p.add_argument("--repeats", type=int, default=1, help="Seeds per setting")
    p.add_argument("--workers", type=int, help=f"Parallel settings, capped by ${config.THREADS_ENV_VAR} (default 1)")
    p.add_argument("--dry-run", action="store_true", help="Enumerate settings without training")
    p.set_defaults(handler=_handle_ablate)

    p = commands.add_parser("synth", parents=[common, run_flags], help="Write generated dataset files")
    p.set_defaults(handler=_handle_synth)
    return parser


def _config_from_args(args):
    flags = {k: v for k, v in vars(args).items() if k in RUN_FIELDS}
    return resolve_config(flags, getattr(args, "config_file", None))


def _handle_train(args):
    cmd_train(_config_from_args(args), resume=args.resume)


def _handle_evaluate(args):
    cmd_evaluate(args.checkpoint, args.labeled, args.split, args.vocab, args.report)


def _handle_neighbors(args):
    cmd_analyze_neighbors(args.checkpoint, args.word, args.k, args.vocab)


def _handle_histogram(args):
    cmd_analyze_histogram(args.checkpoint, args.labeled, args.split, args.vocab, args.csv)


def _handle_ensemble(args):
    cmd_analyze_ensemble(args.checkpoints, args.labeled, args.split, args.grid_step)


def _handle_ablate(args):
    if args.repeats < 1:
        raise ConfigurationError("repeats", f"must be >= 1, got {args.repeats}")
    values = [v for v in args.values.split(",") if v.strip()]
    try:
        values = [int(v) for v in values]
    except ValueError:
        raise ConfigurationError("values", f"'{args.values}' is not a list of integers") from None
    cmd_ablate(_config_from_args(args), args.grid, values, args.repeats, args.dry_run, args.workers)


def _handle_synth(args):
    for path in cmd_synth(_config_from_args(args)):
        print(path)


def report_error(code, kind, message):
    print(f"error code={code} kind={kind} message={message}", file=sys.stderr)
    return code


def main(argv=None):
    """
    Parse command-line arguments and run the selected command.

    Returns the process exit code: 0 on success, otherwise the exit code of
    the error class that ended the command.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=config.LOG_FORMAT)
    try:
        args.handler(args)
    except MixedObjError as e:
        return report_error(e.exit_code, type(e).__name__, e)
    except OSError as e:
        return report_error(ContractError.exit_code, type(e).__name__, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
