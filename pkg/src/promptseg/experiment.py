"""Experiment configuration and the run pipeline behind the CLI.

Output layout under ``config.out``::

    data/<center>/<sample>.psv, data/<center>/{train,test,foldK}.txt, data/manifest.json
    pretrain/<holdout>/{model.ckpt, log.csv, train_manifest.txt}
    finetune/<holdout>/<strategy>/fold<K>/{report.json, model.ckpt, log.csv, old_test.txt, new_test.txt}
    compare/{comparison.csv, comparison.json, folds_<center>.csv}
    ablate/<axis>/<center>/{table.csv, table.json, <row>/...}
    stats/{tests.csv, tests.json}

Every directory written also receives ``config.json``, the exact
configuration that produced it.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys

import numpy as np

from . import checkpoint as ck
from .errors import ConfigError, DataError, DegenerateInputError, ContractError
from .evaluation import (
    CLASS_NAMES,
    GAP,
    FoldReport,
    build_comparison_matrix,
    class_means,
    evaluate,
    fold_detail_table,
    pooled_mean,
)
from .model import ModelConfig, PromptConfig, SegModel
from .stats import t_test_two_tailed, wilcoxon_signed_rank
from .synthcenters import (
    CenterSpec,
    default_centers,
    generate_center,
    kfold,
    preprocess,
    read_volume,
    split_70_30,
    write_volume,
)
from .tuning import STRATEGIES, OptimizerConfig, TuningStrategy, count_learnable, train_epochs

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ABLATION_AXES = ("num_prompts", "prompt_sites", "skip_prompts")


def derive_seed(seed, *tags):
    """Independent 63-bit seed for one component: sha256 of the global seed and role tags."""
    text = ":".join([str(int(seed))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclasses.dataclass
class ExperimentConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    shallow: PromptConfig = dataclasses.field(default_factory=lambda: PromptConfig.shallow(50))
    deep: PromptConfig = dataclasses.field(default_factory=lambda: PromptConfig.deep(50))
    optimizers: dict = dataclasses.field(default_factory=lambda: {s: OptimizerConfig.for_strategy(s) for s in STRATEGIES if s != "none"})
    pretrain: OptimizerConfig = dataclasses.field(default_factory=lambda: OptimizerConfig("adamw", 1e-4, 1e-3, "cosine", 100, 3))
    centers: list = dataclasses.field(default_factory=default_centers)
    holdouts: list = dataclasses.field(default_factory=lambda: ["center7"])
    folds: int = 5
    seed: int = 0
    out: str = "runs"
    crop_size: tuple = (16, 16, 16)
    num_crops: int = 4
    loss: str = "dice"
    dtype: str = "float32"
    empty_dice: float = 1.0
    ablation_fold: int = 0
    ablation_num_prompts: tuple = (10, 30, 50, 70, 90, 100)
    ablation_count_mode: str = "shallow"

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.ablation_num_prompts = tuple(int(v) for v in self.ablation_num_prompts)
        self.holdouts = list(self.holdouts)
        self.validate()

    def validate(self):
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids) or not ids:
            raise ConfigError(f"center ids must be unique and non-empty, got {ids}")
        for h in self.holdouts:
            if h not in ids:
                raise ConfigError(f"unknown holdout center {h!r}; known centers: {ids}")
        if len(ids) < 2:
            raise ConfigError("need at least one old center besides the holdout")
        if self.shallow.mode != "shallow" or self.deep.mode != "deep":
            raise ConfigError("the shallow/deep prompt configs must have modes 'shallow' and 'deep'")
        for pc in (self.shallow, self.deep):
            bad = [s for s in pc.sites if s > self.model.depth]
            if bad:
                raise ConfigError(f"prompt sites {bad} exceed encoder depth {self.model.depth}")
        for name in self.optimizers:
            if name not in STRATEGIES or name == "none":
                raise ConfigError(f"optimizer given for unknown or untrainable strategy {name!r}")
        missing = [s for s in STRATEGIES if s != "none" and s not in self.optimizers]
        if missing:
            raise ConfigError(f"no optimizer configured for {missing}")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if not 0 <= self.ablation_fold < self.folds:
            raise ConfigError(f"ablation_fold {self.ablation_fold} outside [0, {self.folds})")
        if self.ablation_count_mode not in ("shallow", "deep"):
            raise ConfigError("ablation_count_mode must be 'shallow' or 'deep'")
        if self.loss not in ("dice", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if any(c > s for c, s in zip(self.crop_size, self.model.volume_shape)) or len(self.crop_size) != 3:
            raise ConfigError(f"crop {self.crop_size} must be 3-d and no larger than the model window {self.model.volume_shape}")
        for spec in self.centers:
            if any(a < b for a, b in zip(spec.shape, self.crop_size)):
                raise ConfigError(f"{spec.center_id} volume {spec.shape} is smaller than the crop {self.crop_size}")

    # -- serialisation ----------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "shallow": self.shallow.to_dict(),
            "deep": self.deep.to_dict(),
            "optimizers": {k: v.to_dict() for k, v in sorted(self.optimizers.items())},
            "pretrain": self.pretrain.to_dict(),
            "centers": [c.to_dict() for c in self.centers],
            "holdouts": list(self.holdouts),
            "folds": self.folds,
            "seed": self.seed,
            "out": self.out,
            "crop_size": list(self.crop_size),
            "num_crops": self.num_crops,
            "loss": self.loss,
            "dtype": self.dtype,
            "empty_dice": self.empty_dice,
            "ablation_fold": self.ablation_fold,
            "ablation_num_prompts": list(self.ablation_num_prompts),
            "ablation_count_mode": self.ablation_count_mode,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r} is not the supported {SCHEMA_VERSION}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            for key in ("shallow", "deep"):
                if key in d:
                    d[key] = PromptConfig.from_dict(d[key])
            if "optimizers" in d:
                d["optimizers"] = {k: OptimizerConfig.from_dict(v) for k, v in d["optimizers"].items()}
            if "pretrain" in d:
                d["pretrain"] = OptimizerConfig.from_dict(d["pretrain"])
            if "centers" in d:
                d["centers"] = [CenterSpec.from_dict(c) for c in d["centers"]]
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- helpers ----------------------------------------------------------

    @property
    def center_ids(self):
        return [c.center_id for c in self.centers]

    def prompt_config_for(self, strategy):
        kind = TuningStrategy(strategy).prompt_mode
        return {"shallow": self.shallow, "deep": self.deep}.get(kind, PromptConfig.none())

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type


def paper_config(**changes):
    """Paper-scale hyperparameters (optimizers from the appendix) on the desk-scale default model."""
    return ExperimentConfig(**changes)


def desk_config(seed=0, out="runs", **changes):
    """Three small centers, the toy model and one optimizer shared by every strategy.

    The third center is strongly shifted: weak lesion contrast, heavy blur
    and noise. Every fine-tuning strategy uses AdamW at 3e-4 so the learnable
    set is the only difference between strategies.
    """
    shape = (32, 32, 32)
    centers = [
        CenterSpec("siteA", 12, shape, 1),
        CenterSpec("siteB", 12, shape, 2, pet_gain=1.2, noise_sigma=(14.0, 0.15), blur_sigma=0.5),
        CenterSpec(
            "siteC", 12, shape, 3,
            primary_ct=20.0, nodal_ct=-15.0, primary_pet=4.0, nodal_pet=2.2, blur_sigma=1.2, noise_sigma=(25.0, 0.4),
        ),
    ]
    model = ModelConfig.toy()
    tune = OptimizerConfig("adamw", 3e-4, 1e-3, "cosine", 15, 3)
    base = dict(
        model=model,
        shallow=PromptConfig.shallow(8),
        deep=PromptConfig.deep(8, model.default_deep_sites()),
        optimizers={s: tune for s in STRATEGIES if s != "none"},
        pretrain=OptimizerConfig("adamw", 2e-3, 1e-3, "cosine", 30, 3),
        centers=centers,
        holdouts=["siteC"],
        folds=5,
        seed=seed,
        out=out,
        crop_size=(16, 16, 16),
        ablation_num_prompts=(10, 30, 50, 70, 90, 100),
    )
    base.update(changes)
    return ExperimentConfig(**base)


PRESETS = {"paper": paper_config, "desk": desk_config}


# ---------------------------------------------------------------------------
# filesystem helpers


def _write_config(config, directory):
    os.makedirs(directory, exist_ok=True)
    config.save(os.path.join(directory, "config.json"))


def _write_lines(path, lines):
    with open(path, "w") as fh:
        fh.writelines(f"{line}\n" for line in lines)


def read_manifest(path):
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def data_dir(config):
    return os.path.join(config.out, "data")


def pretrain_dir(config, holdout):
    return os.path.join(config.out, "pretrain", holdout)


def cell_dir(config, holdout, strategy, fold):
    return os.path.join(config.out, "finetune", holdout, strategy, f"fold{fold}")


def _check_center(config, center):
    if center not in config.center_ids:
        raise ConfigError(f"unknown center {center!r}; known centers: {config.center_ids}")


def _generation_spec(config, spec):
    return dataclasses.replace(spec, seed=derive_seed(config.seed, "center", spec.center_id, spec.seed))


# ---------------------------------------------------------------------------
# generate


def cmd_generate(config, force=False):
    """Generate, preprocess and split every center; write volumes and manifests."""
    root = data_dir(config)
    if os.path.isdir(root) and os.listdir(root):
        if not force:
            raise DataError(f"{root} exists and is not empty; pass --force to regenerate")
        shutil.rmtree(root)
    os.makedirs(root)
    manifest = {"centers": {}, "samples": {}}
    for spec in config.centers:
        samples = [preprocess(s) for s in generate_center(_generation_spec(config, spec))]
        train, test = split_70_30(samples, derive_seed(config.seed, "split", spec.center_id))
        folds = kfold(train, config.folds, derive_seed(config.seed, "folds", spec.center_id))
        cdir = os.path.join(root, spec.center_id)
        os.makedirs(cdir)
        for s in samples:
            write_volume(s, os.path.join(cdir, f"{s.sample_id}.psv"))
        ids = [s.sample_id for s in samples]
        entry = {
            "train": [ids[i] for i in train],
            "test": [ids[i] for i in test],
            "folds": [[ids[i] for i in f] for f in folds],
        }
        manifest["centers"][spec.center_id] = entry
        _write_lines(os.path.join(cdir, "train.txt"), entry["train"])
        _write_lines(os.path.join(cdir, "test.txt"), entry["test"])
        for k, f in enumerate(entry["folds"]):
            _write_lines(os.path.join(cdir, f"fold{k}.txt"), f)
        for i, sid in enumerate(ids):
            fold = next((k for k, f in enumerate(folds) if i in f), None)
            manifest["samples"][sid] = {"center": spec.center_id, "split": "train" if i in train else "test", "fold": fold}
    _dump_json(manifest, os.path.join(root, "manifest.json"))
    _write_config(config, root)
    return manifest


class Dataset:
    """Read access to a generated data directory, checked against the config."""

    def __init__(self, config):
        self.config = config
        self.root = data_dir(config)
        path = os.path.join(self.root, "manifest.json")
        if not os.path.exists(path):
            raise DataError(f"no generated data under {self.root}; run 'generate' first")
        with open(path) as fh:
            self.manifest = json.load(fh)
        with open(os.path.join(self.root, "config.json")) as fh:
            stored = json.load(fh)
        current = json.loads(config.to_json())
        if stored.get("centers") != current["centers"] or stored.get("seed") != config.seed or stored.get("folds") != config.folds:
            raise DataError(f"data in {self.root} was generated from a different config; rerun 'generate --force'")
        self._cache = {}

    def load(self, sample_id):
        if sample_id not in self._cache:
            info = self.manifest["samples"].get(sample_id)
            if info is None:
                raise DataError(f"sample {sample_id!r} is not in the manifest")
            path = os.path.join(self.root, info["center"], f"{sample_id}.psv")
            if not os.path.exists(path):
                raise DataError(f"missing volume file {path}")
            self._cache[sample_id] = read_volume(path)
        return self._cache[sample_id]

    def ids(self, center, part):
        return list(self.manifest["centers"][center][part])

    def fold_train_ids(self, center, fold):
        """Cross-validation training ids: the center's training set minus fold ``fold``."""
        folds = self.manifest["centers"][center]["folds"]
        if not 0 <= fold < len(folds):
            raise ConfigError(f"fold {fold} outside [0, {len(folds)})")
        if len(folds) == 1:
            return list(folds[0])
        return [s for j, f in enumerate(folds) if j != fold for s in f]

    def samples(self, ids):
        return [self.load(i) for i in ids]

    def old_test_ids(self, holdout):
        return [sid for c in self.config.center_ids if c != holdout for sid in self.ids(c, "test")]


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(config, holdout):
    """Train the promptless base model on every center except ``holdout``."""
    _check_center(config, holdout)
    data = Dataset(config)
    train_ids = [sid for c in config.center_ids if c != holdout for sid in data.ids(c, "train")]
    model = SegModel(config.model, PromptConfig.none(), seed=derive_seed(config.seed, "init"), dtype=config.np_dtype)
    log = train_epochs(
        model,
        data.samples(train_ids),
        "full",
        config.pretrain,
        seed=derive_seed(config.seed, "pretrain", holdout),
        crop_size=config.crop_size,
        loss=config.loss,
        num_crops=config.num_crops,
    )
    out = pretrain_dir(config, holdout)
    _write_config(config, out)
    ck.save_full(model, os.path.join(out, "model.ckpt"), strategy="pretrain")
    log.to_csv(os.path.join(out, "log.csv"))
    _write_lines(os.path.join(out, "train_manifest.txt"), train_ids)
    return model, log, train_ids


def load_pretrained(config, holdout):
    path = os.path.join(pretrain_dir(config, holdout), "model.ckpt")
    if not os.path.exists(path):
        raise DataError(f"no pretrained checkpoint at {path}; run 'pretrain --center {holdout}' first")
    model = ck.load_full(path)
    if model.config != config.model:
        raise DataError(f"{path} was trained with a different model config")
    return model


# ---------------------------------------------------------------------------
# finetune


def _finetune_model(config, base, strategy, prompt_config, holdout, fold):
    if prompt_config.mode == "none":
        return base.copy()
    return base.with_prompts(prompt_config, seed=derive_seed(config.seed, "prompts", strategy, holdout, fold))


def _evaluate_reports(config, model, data, old_ids, new_ids):
    old = evaluate(model, data.samples(old_ids), config.empty_dice)
    new = evaluate(model, data.samples(new_ids), config.empty_dice)
    return old, new


def run_cell(config, strategy, holdout, fold, prompt_config=None, out=None, data=None, base=None):
    """Fine-tune one (strategy, center, fold) cell, evaluate it, and persist the results."""
    _check_center(config, holdout)
    kind = TuningStrategy(strategy).kind
    prompt_config = prompt_config or config.prompt_config_for(kind)
    expected = TuningStrategy(kind).prompt_mode
    if prompt_config.mode != expected:
        raise ConfigError(f"strategy {kind} needs prompt mode {expected!r}, config gives {prompt_config.mode!r}")
    bad = [s for s in prompt_config.sites if s > config.model.depth]
    if bad:
        raise ConfigError(f"prompt sites {bad} exceed encoder depth {config.model.depth}")
    data = data or Dataset(config)
    base = base or load_pretrained(config, holdout)
    train_ids = data.fold_train_ids(holdout, fold)
    old_ids, new_ids = data.old_test_ids(holdout), data.ids(holdout, "test")

    model = _finetune_model(config, base, kind, prompt_config, holdout, fold)
    log = None
    if kind != "none":
        log = train_epochs(
            model,
            data.samples(train_ids),
            kind,
            config.optimizers[kind],
            seed=derive_seed(config.seed, "finetune", kind, holdout, fold, prompt_config.num_prompts, *prompt_config.sites),
            crop_size=config.crop_size,
            loss=config.loss,
            num_crops=config.num_crops,
        )
    old, new = _evaluate_reports(config, model, data, old_ids, new_ids)
    report = FoldReport(
        center=holdout,
        strategy=kind,
        fold=fold,
        old_center_mean=pooled_mean(old),
        new_center_mean=pooled_mean(new),
        new_class_means=class_means(new),
        old_manifest=old_ids,
        new_manifest=new_ids,
        learnable=count_learnable(model, kind)[0],
    )
    out = out or cell_dir(config, holdout, kind, fold)
    _write_config(config, out)
    report.to_json(os.path.join(out, "report.json"))
    _write_lines(os.path.join(out, "old_test.txt"), old_ids)
    _write_lines(os.path.join(out, "new_test.txt"), new_ids)
    _write_lines(os.path.join(out, "train_manifest.txt"), train_ids)
    _write_dice_csv(os.path.join(out, "dice.csv"), old + new)
    if log is not None:
        log.to_csv(os.path.join(out, "log.csv"))
    stale = os.path.join(out, "model.ckpt")
    if kind == "full":
        ck.save_full(model, stale, strategy=kind)
    elif kind != "none":
        ck.save_delta(model, stale, strategy=kind)
    elif os.path.exists(stale):
        os.remove(stale)
    return report, model


def cmd_finetune(config, strategy, holdout, fold):
    return run_cell(config, strategy, holdout, fold)[0]


def _write_dice_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["center", "sample"] + list(CLASS_NAMES.values()) + ["mean"])
        for r in reports:
            w.writerow([r.center_id, r.sample_id] + [repr(r.scores[n]) for n in CLASS_NAMES.values()] + [repr(r.mean)])


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(config, checkpoint, center, part="test", backbone=None, out=None):
    """Dice of a stored checkpoint on one center's test (or train) manifest."""
    _check_center(config, center)
    data = Dataset(config)
    kind, _, header, _ = ck.read_checkpoint(checkpoint)
    if kind == ck.KIND_FULL:
        model = ck.load_full(checkpoint)
    else:
        host = ck.load_full(backbone) if backbone else load_pretrained(config, center)
        model = ck.load_delta(checkpoint, host)
    reports = evaluate(model, data.samples(data.ids(center, part)), config.empty_dice)
    if out:
        os.makedirs(out, exist_ok=True)
        _write_config(config, out)
        _write_dice_csv(os.path.join(out, f"dice_{center}_{part}.csv"), reports)
    return reports


# ---------------------------------------------------------------------------
# compare


def collect_reports(config, holdouts=None, strategies=STRATEGIES):
    reports, missing = [], []
    for h in holdouts or config.holdouts:
        for s in strategies:
            for f in range(config.folds):
                path = os.path.join(cell_dir(config, h, s, f), "report.json")
                if os.path.exists(path):
                    reports.append(FoldReport.from_json(path))
                else:
                    missing.append((h, s, f))
    return reports, missing


def _run_missing(config, cells, jobs=1, config_path=None):
    if jobs > 1 and config_path:
        procs = []
        for h, s, f in cells:
            cmd = [sys.executable, "-m", "promptseg", "finetune", "--config", config_path, "--strategy", s, "--center", h, "--fold", str(f)]
            procs.append(cmd)
        _run_parallel(procs, jobs)
        return
    by_center = {}
    for h, s, f in cells:
        by_center.setdefault(h, []).append((s, f))
    data = Dataset(config)
    for h, todo in by_center.items():
        if not os.path.exists(os.path.join(pretrain_dir(config, h), "model.ckpt")):
            cmd_pretrain(config, h)
        base = load_pretrained(config, h)
        for s, f in todo:
            run_cell(config, s, h, f, data=data, base=base)


def _run_parallel(commands, jobs):
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    running, failed = [], []
    pending = list(commands)
    while pending or running:
        while pending and len(running) < jobs:
            running.append(subprocess.Popen(pending.pop(0), env=env))
        proc = running.pop(0)
        if proc.wait() != 0:
            failed.append(" ".join(proc.args))
    if failed:
        raise DataError(f"{len(failed)} run cells failed: {failed}")


def cmd_compare(config, strategies=STRATEGIES, run=False, jobs=1, config_path=None):
    """Emit the center x strategy comparison matrix. Returns ``(matrix, missing cells)``."""
    strategies = list(strategies)
    reports, missing = collect_reports(config, strategies=strategies)
    if missing and run:
        if jobs > 1:
            for h in sorted({m[0] for m in missing}):
                if not os.path.exists(os.path.join(pretrain_dir(config, h), "model.ckpt")):
                    cmd_pretrain(config, h)
        _run_missing(config, missing, jobs, config_path)
        reports, missing = collect_reports(config, strategies=strategies)
    matrix = build_comparison_matrix(reports, centers=config.holdouts, strategies=strategies, expected_folds=config.folds)
    out = os.path.join(config.out, "compare")
    _write_config(config, out)
    matrix.to_csv(os.path.join(out, "comparison.csv"))
    matrix.to_json(os.path.join(out, "comparison.json"))
    for h in config.holdouts:
        rows = fold_detail_table(reports, h, strategies)
        with open(os.path.join(out, f"folds_{h}.csv"), "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    return matrix, missing


# ---------------------------------------------------------------------------
# ablations


def ablation_rows(config, axis):
    """``[(row label, strategy, prompt config)]`` for one ablation axis."""
    deep, depth = config.deep, config.model.depth
    if axis == "num_prompts":
        mode = config.ablation_count_mode
        if mode == "shallow":
            return [(str(p), "shallow_prompt", PromptConfig.shallow(p, config.shallow.init_scale)) for p in config.ablation_num_prompts]
        return [(str(p), "deep_prompt", PromptConfig.deep(p, deep.sites, deep.init_scale)) for p in config.ablation_num_prompts]
    if axis == "prompt_sites":
        rows = [("shallow", "shallow_prompt", PromptConfig.shallow(deep.num_prompts, deep.init_scale))]
        rows += [(str(k), "deep_prompt", PromptConfig.deep(deep.num_prompts, (k,), deep.init_scale)) for k in range(1, depth + 1)]
        return rows
    if axis == "skip_prompts":
        return [
            ("without", "deep_prompt", PromptConfig.deep(deep.num_prompts, config.model.default_deep_sites(), deep.init_scale)),
            ("with", "deep_prompt", PromptConfig.deep(deep.num_prompts, config.model.skip_layers, deep.init_scale)),
        ]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


ABLATION_HEADERS = {
    "num_prompts": "num_prompts",
    "prompt_sites": "position",
    "skip_prompts": "prompts_on_skip_connections",
}


def cmd_ablate(config, axis, holdout=None, run=False):
    """Sweep one prompt axis on a single fold of the holdout center.

    Returns ``(rows, missing labels)`` where each row is
    ``[label, avg dice, GTVp, GTVn]`` (gap markers for missing runs).
    """
    holdout = holdout or config.holdouts[0]
    _check_center(config, holdout)
    spec_rows = ablation_rows(config, axis)
    root = os.path.join(config.out, "ablate", axis, holdout)
    data = base = None
    rows, missing = [], []
    for label, strategy, pc in spec_rows:
        cdir = os.path.join(root, label)
        path = os.path.join(cdir, "report.json")
        if not os.path.exists(path) and run:
            data = data or Dataset(config)
            if base is None:
                if not os.path.exists(os.path.join(pretrain_dir(config, holdout), "model.ckpt")):
                    cmd_pretrain(config, holdout)
                base = load_pretrained(config, holdout)
            run_cell(config, strategy, holdout, config.ablation_fold, prompt_config=pc, out=cdir, data=data, base=base)
        if os.path.exists(path):
            r = FoldReport.from_json(path)
            cm = r.new_class_means
            rows.append([label, r.new_center_mean, cm["GTVp"], cm["GTVn"]])
        else:
            rows.append([label, None, None, None])
            missing.append(label)
    _write_config(config, root)
    header = [ABLATION_HEADERS[axis], "avg_dice", "GTVp", "GTVn"]
    with open(os.path.join(root, "table.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [GAP if v is None else repr(v) for v in row[1:]])
    _dump_json({"axis": axis, "center": holdout, "fold": config.ablation_fold, "header": header, "rows": rows}, os.path.join(root, "table.json"))
    return rows, missing


# ---------------------------------------------------------------------------
# statistics


def cmd_stats(config, reference="deep_prompt"):
    """Paired tests of ``reference`` against every other strategy, pooled over
    holdout centers and folds: one-sided Wilcoxon (reference greater) on old
    and new Dice, plus a two-tailed paired t test on new Dice."""
    reports, _ = collect_reports(config)
    table = {}
    for r in reports:
        table[(r.strategy, r.center, r.fold)] = r
    keys = sorted({(c, f) for _, c, f in table})
    rows = []
    for other in STRATEGIES:
        if other == reference:
            continue
        pairs = [(table[(reference, c, f)], table[(other, c, f)]) for c, f in keys if (reference, c, f) in table and (other, c, f) in table]
        row = {"reference": reference, "other": other, "n": len(pairs)}
        for which in ("old", "new"):
            x = [getattr(a, f"{which}_center_mean") for a, _ in pairs]
            y = [getattr(b, f"{which}_center_mean") for _, b in pairs]
            try:
                res = wilcoxon_signed_rank(x, y, alternative="greater")
                row[f"wilcoxon_{which}_W"], row[f"wilcoxon_{which}_p"] = res.statistic, res.pvalue
            except (DegenerateInputError, ContractError) as exc:
                row[f"wilcoxon_{which}_W"], row[f"wilcoxon_{which}_p"] = None, None
                row[f"wilcoxon_{which}_note"] = str(exc)
        x = [a.new_center_mean for a, _ in pairs]
        y = [b.new_center_mean for _, b in pairs]
        try:
            res = t_test_two_tailed(x, y, paired=True)
            row["t_new"], row["t_new_p"] = res.statistic, res.pvalue
        except (DegenerateInputError, ContractError) as exc:
            row["t_new"], row["t_new_p"] = None, None
            row["t_new_note"] = str(exc)
        rows.append(row)
    out = os.path.join(config.out, "stats")
    _write_config(config, out)
    _dump_json(rows, os.path.join(out, "tests.json"))
    cols = ["reference", "other", "n", "wilcoxon_old_W", "wilcoxon_old_p", "wilcoxon_new_W", "wilcoxon_new_p", "t_new", "t_new_p"]
    with open(os.path.join(out, "tests.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([GAP if row.get(c) is None else row[c] for c in cols])
    return rows


# ---------------------------------------------------------------------------
# parameter accounting


def count_table(config):
    """``[(strategy, learnable, total, fraction)]`` for every strategy."""
    base = SegModel(config.model, PromptConfig.none(), seed=0, dtype=config.np_dtype)
    rows = []
    for s in STRATEGIES:
        pc = config.prompt_config_for(s)
        model = base if pc.mode == "none" else SegModel(config.model, pc, seed=0, dtype=config.np_dtype)
        count, frac = count_learnable(model, s)
        rows.append((s, count, model.num_parameters(), frac))
    return rows


# ---------------------------------------------------------------------------
# gradient check


def gradcheck_shallow(seed=0, num_prompts=4, backbone_coords=6, tol=1e-3):
    """Central-difference check of the toy shallow-prompt model under the Dice loss.

    Every prompt and head coordinate is probed; each backbone tensor
    contributes ``backbone_coords`` random coordinates. Runs in float64.
    """
    from . import autograd as ag
    from .tuning import soft_dice_loss

    rng = np.random.default_rng(seed)
    model = SegModel(ModelConfig.toy(), PromptConfig.shallow(num_prompts), seed=seed, dtype=np.float64)
    x = rng.standard_normal((model.config.in_channels,) + model.config.volume_shape)
    mask = rng.integers(0, model.config.num_classes, size=model.config.volume_shape).astype(np.uint8)

    def loss():
        return soft_dice_loss([model(x)], [mask])

    full = {n: model.params[n] for n in model.prompt_names + model.head_names}
    sampled = {n: model.params[n] for n in model.backbone_names if n not in full}
    first = ag.grad_check(loss, full, tol=tol)
    for p in full.values():
        p.requires_grad = False
    second = ag.grad_check(loss, sampled, tol=tol, max_coords=backbone_coords, rng=rng)
    for p in model.params.values():
        p.requires_grad, p.grad = False, None
    first.max_rel_error.update(second.max_rel_error)
    first.checked.update(second.checked)
    return first
