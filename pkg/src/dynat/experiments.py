"""Experiment driver: config file in, run directory out.

A run directory holds config.resolved (the full effective config,
defaults included), metrics.csv (one row per evaluated epoch), and a
checkpoint per trained model.  Every random choice is derived from the
seeds in the config, so rerunning a config reproduces metrics.csv and
the checkpoints byte for byte.

The wall_seconds metrics column is a fixed 0.000000: real timings vary
between runs and would break byte reproducibility, so they go to the
progress log on stdout instead.
"""

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from . import autodiff as ad
from .attacks import PerturbationBudget, accuracy, pgd
from .config import format_config, load_config
from .data import BatchStream, Dataset, load_idx, split, synthetic_blobs
from .errors import ConfigError, ValidationError
from .models import Model, build_model, frozen, load_checkpoint, named_spec, save_checkpoint
from .seeding import derive_seed
from .training import (SGD, LossWeights, OptimizerSettings, TrainPlan,
                       clean_step, dynat_train_step, lbgat_step, pgd_at_step)

DUAL_MODEL_METHODS = ("lbgat", "dynat", "dynat-inner")


@dataclass
class ExperimentConfig:
    dataset: dict
    guide_spec_name: str | None
    target_spec_name: str
    plan: TrainPlan
    eval_attacks: tuple
    eval_every: int
    attack_examples: int
    output_dir: str


# ---------------------------------------------------------------------------
# config loading

_DATASET_KEYS = {
    "synthetic": {
        "kind": str, "n_per_class": int, "classes": int, "image_side": int,
        "noise_sigma": float, "seed": int, "train_fraction": float,
        "background": float, "foreground": float, "patch_size": int,
        "cue_amplitude": float, "patch_reliability": float,
    },
    "idx": {
        "kind": str, "train_images": str, "train_labels": str,
        "test_images": str, "test_labels": str, "classes": int,
    },
}
_DATASET_DEFAULTS = {
    "synthetic": {"background": 0.2, "foreground": 0.8, "patch_size": 0,
                  "cue_amplitude": 0.0, "patch_reliability": 1.0},
    "idx": {"classes": 10},
}
_TRAIN_KEYS = {"method": str, "epochs": int, "batch_size": int, "beta": float,
               "seed": int, "epsilon": float, "step_size": float, "steps": int,
               "random_start": bool}
_OPT_KEYS = {"learning_rate": float, "momentum": float, "weight_decay": float,
             "decay_epochs": list}
_EVAL_KEYS = {"eval_every": int, "attack_examples": int}
_ATTACK_KEYS = {"epsilon": float, "step_size": float, "steps": int, "random_start": bool}


def _typed(kv: dict, key: str, want, where: str, default=None, required=False):
    if key not in kv:
        if required:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    value = kv[key]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(f"{where}: '{key}' must be an int, got a bool")
    if want is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: '{key}' must be a list")
        return value
    if not isinstance(value, want):
        raise ConfigError(f"{where}: '{key}' must be {want.__name__}, got {type(value).__name__}")
    return value


def _check_known(kv: dict, known, where: str):
    for key in kv:
        if key not in known:
            raise ConfigError(f"{where}: unknown key '{key}' (known: {', '.join(sorted(known))})")


def _attack_name(section: str) -> str:
    name = section.split(".", 1)[1]
    if not name or not all(c.isalnum() or c in "_-" for c in name):
        raise ConfigError(f"[{section}]: attack names must be alphanumeric/_/-")
    return name


def load_experiment_config(path) -> ExperimentConfig:
    sections = load_config(path)
    known_sections = {"dataset", "models", "train", "optimizer", "eval", "output"}
    for name in sections:
        if name not in known_sections and not name.startswith("attack."):
            raise ConfigError(f"unknown section [{name}]")
    for required in ("dataset", "models", "train", "output"):
        if required not in sections:
            raise ConfigError(f"missing section [{required}]")

    ds = dict(sections["dataset"])
    kind = _typed(ds, "kind", str, "[dataset]", required=True)
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"[dataset]: kind must be 'synthetic' or 'idx', got '{kind}'")
    _check_known(ds, _DATASET_KEYS[kind], "[dataset]")
    dataset = dict(_DATASET_DEFAULTS[kind])
    for key, want in _DATASET_KEYS[kind].items():
        default = dataset.get(key)
        value = _typed(ds, key, want, "[dataset]", default=default,
                       required=default is None and key != "kind")
        dataset[key] = value
    dataset["kind"] = kind

    mk = sections["models"]
    _check_known(mk, {"guide", "target"}, "[models]")
    target_name = _typed(mk, "target", str, "[models]", required=True)
    guide_name = _typed(mk, "guide", str, "[models]")

    tk = sections["train"]
    _check_known(tk, _TRAIN_KEYS, "[train]")
    method = _typed(tk, "method", str, "[train]", required=True)
    epochs = _typed(tk, "epochs", int, "[train]", required=True)
    batch_size = _typed(tk, "batch_size", int, "[train]", default=128)
    beta = _typed(tk, "beta", float, "[train]", default=1.0)
    seed = _typed(tk, "seed", int, "[train]", default=0)
    if method == "clean":
        for key in ("epsilon", "step_size", "steps", "random_start"):
            if key in tk:
                raise ConfigError(f"[train]: '{key}' has no effect with method clean")
        budget = None
    else:
        budget = PerturbationBudget(
            epsilon=_typed(tk, "epsilon", float, "[train]", required=True),
            step_size=_typed(tk, "step_size", float, "[train]", required=True),
            steps=_typed(tk, "steps", int, "[train]", default=10),
            random_start=_typed(tk, "random_start", bool, "[train]", default=True))
    if method in DUAL_MODEL_METHODS and guide_name is None:
        raise ConfigError(f"[models]: method '{method}' needs a guide model")

    ok = sections.get("optimizer", {})
    _check_known(ok, _OPT_KEYS, "[optimizer]")
    decay = _typed(ok, "decay_epochs", list, "[optimizer]")
    if decay is None:
        # tenfold drops at the halfway and three-quarter marks
        decay = sorted({epochs // 2, (3 * epochs) // 4})
    if not all(isinstance(d, int) and not isinstance(d, bool) for d in decay):
        raise ConfigError("[optimizer]: decay_epochs must be a list of ints")
    optimizer = OptimizerSettings(
        learning_rate=_typed(ok, "learning_rate", float, "[optimizer]", default=0.1),
        momentum=_typed(ok, "momentum", float, "[optimizer]", default=0.9),
        weight_decay=_typed(ok, "weight_decay", float, "[optimizer]", default=5.0e-4),
        decay_epochs=tuple(decay))

    ek = sections.get("eval", {})
    _check_known(ek, _EVAL_KEYS, "[eval]")
    eval_every = _typed(ek, "eval_every", int, "[eval]", default=1)
    attack_examples = _typed(ek, "attack_examples", int, "[eval]", default=0)
    if eval_every < 1:
        raise ConfigError("[eval]: eval_every must be >= 1")
    if attack_examples < 0:
        raise ConfigError("[eval]: attack_examples must be >= 0 (0 = whole test set)")

    eval_attacks = []
    for sect, kv in sections.items():
        if not sect.startswith("attack."):
            continue
        _check_known(kv, _ATTACK_KEYS, f"[{sect}]")
        name = _attack_name(sect)
        eval_attacks.append((name, PerturbationBudget(
            epsilon=_typed(kv, "epsilon", float, f"[{sect}]", required=True),
            step_size=_typed(kv, "step_size", float, f"[{sect}]", required=True),
            steps=_typed(kv, "steps", int, f"[{sect}]", default=10),
            random_start=_typed(kv, "random_start", bool, f"[{sect}]", default=False))))
    if len({n for n, _ in eval_attacks}) != len(eval_attacks):
        raise ConfigError("duplicate attack names")

    out = sections["output"]
    _check_known(out, {"dir"}, "[output]")
    output_dir = _typed(out, "dir", str, "[output]", required=True)

    plan = TrainPlan(method=method, epochs=epochs, weights=LossWeights(beta=beta),
                     budget=budget, batch_size=batch_size, optimizer=optimizer, seed=seed)
    return ExperimentConfig(dataset=dataset, guide_spec_name=guide_name,
                            target_spec_name=target_name, plan=plan,
                            eval_attacks=tuple(eval_attacks), eval_every=eval_every,
                            attack_examples=attack_examples, output_dir=output_dir)


def resolved_config_text(cfg: ExperimentConfig) -> str:
    """Canonical serialisation of the effective config, defaults filled in."""
    kind = cfg.dataset["kind"]
    sections = {"dataset": {k: cfg.dataset[k] for k in _DATASET_KEYS[kind]}}
    models = {}
    if cfg.guide_spec_name is not None:
        models["guide"] = cfg.guide_spec_name
    models["target"] = cfg.target_spec_name
    sections["models"] = models
    plan = cfg.plan
    train = {"method": plan.method, "epochs": plan.epochs, "batch_size": plan.batch_size,
             "beta": plan.weights.beta, "seed": plan.seed}
    if plan.budget is not None:
        train.update(epsilon=plan.budget.epsilon, step_size=plan.budget.step_size,
                     steps=plan.budget.steps, random_start=plan.budget.random_start)
    sections["train"] = train
    opt = plan.optimizer
    sections["optimizer"] = {"learning_rate": opt.learning_rate, "momentum": opt.momentum,
                             "weight_decay": opt.weight_decay,
                             "decay_epochs": list(opt.decay_epochs)}
    sections["eval"] = {"eval_every": cfg.eval_every, "attack_examples": cfg.attack_examples}
    for name, b in cfg.eval_attacks:
        sections[f"attack.{name}"] = {"epsilon": b.epsilon, "step_size": b.step_size,
                                      "steps": b.steps, "random_start": b.random_start}
    sections["output"] = {"dir": cfg.output_dir}
    return format_config(sections)


# ---------------------------------------------------------------------------
# data and model assembly

def resolve_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        whole = synthetic_blobs(ds["n_per_class"], ds["classes"], ds["image_side"],
                                ds["noise_sigma"], seed=ds["seed"],
                                background=ds["background"], foreground=ds["foreground"],
                                patch_size=ds["patch_size"] or None,
                                cue_amplitude=ds["cue_amplitude"],
                                patch_reliability=ds["patch_reliability"])
        return split(whole, ds["train_fraction"], seed=ds["seed"])
    train = load_idx(ds["train_images"], ds["train_labels"], name="train",
                     class_count=ds["classes"])
    test = load_idx(ds["test_images"], ds["test_labels"], name="test",
                    class_count=ds["classes"])
    return train, test


def build_models(cfg: ExperimentConfig, train: Dataset):
    input_shape = train.images.shape[1:]
    classes = train.class_count
    target = build_model(named_spec(cfg.target_spec_name, input_shape, classes),
                         seed=derive_seed(cfg.plan.seed, "target"))
    guide = None
    if cfg.plan.method in DUAL_MODEL_METHODS:
        guide = build_model(named_spec(cfg.guide_spec_name, input_shape, classes),
                            seed=derive_seed(cfg.plan.seed, "guide"))
    return guide, target


# ---------------------------------------------------------------------------
# evaluation

def predict_batched(model: Model, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Frozen forward over arbitrarily many examples, bounded memory."""
    outs = []
    with frozen(model):
        for lo in range(0, images.shape[0], chunk):
            outs.append(model.forward(ad.Tensor(images[lo:lo + chunk])).data)
    ad.reset_tape()
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.spec.num_classes))


def robust_accuracy(model: Model, ds: Dataset, budget: PerturbationBudget,
                    seed: int, chunk: int = 256) -> float:
    """Accuracy under attack, ground-truth labels, chunked to bound memory."""
    correct = 0
    for i, lo in enumerate(range(0, len(ds), chunk)):
        x = ad.Tensor(ds.images[lo:lo + chunk])
        y = ad.Tensor(ds.labels[lo:lo + chunk])
        adv = pgd(model, x, y, budget, rng_seed=derive_seed(seed, "chunk", i))
        logits = predict_batched(model, adv.x_adv.data, chunk)
        correct += int((logits.argmax(1) == y.data.argmax(1)).sum())
    return correct / len(ds)


def evaluate(guide, target: Model, train: Dataset, test: Dataset, eval_attacks,
             *, epoch: int, seed: int, attack_examples: int = 0) -> dict:
    """Accuracy metrics for one epoch; models are left untouched."""
    row = {
        "train_clean_target": accuracy(predict_batched(target, train.images), train.labels),
        "test_clean_target": accuracy(predict_batched(target, test.images), test.labels),
        "test_clean_guide": (accuracy(predict_batched(guide, test.images), test.labels)
                             if guide is not None else 0.0),
    }
    subset = test.take(min(attack_examples, len(test))) if attack_examples else test
    for name, budget in eval_attacks:
        row[f"robust_{name}"] = robust_accuracy(
            target, subset, budget, seed=derive_seed(seed, "eval", name, epoch))
    return row


# ---------------------------------------------------------------------------
# metrics file

def metrics_header(attack_names) -> list:
    return (["epoch", "train_clean_target", "test_clean_target", "test_clean_guide"]
            + [f"robust_{n}" for n in attack_names]
            + ["loss_guide", "loss_target", "labels_agreement", "wall_seconds"])


def format_metrics_row(header, row: dict) -> str:
    cells = []
    for col in header:
        cells.append(str(int(row[col])) if col == "epoch" else f"{float(row[col]):.6f}")
    return ",".join(cells)


def read_metrics(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = []
        for cells in reader:
            row = {}
            for col, cell in zip(header, cells):
                row[col] = int(cell) if col == "epoch" else float(cell)
            rows.append(row)
    return header, rows


# ---------------------------------------------------------------------------
# the run loop

def run_experiment(cfg: ExperimentConfig, seed: int | None = None,
                   output_dir=None, verbose: bool = True) -> Path:
    """Train per the config and write the run directory.  Returns its path."""
    plan = cfg.plan if seed is None else replace(cfg.plan, seed=seed)
    cfg = replace(cfg, plan=plan, output_dir=str(output_dir or cfg.output_dir))
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    if (outdir / "metrics.csv").exists():
        raise ValidationError(f"{outdir} already holds a run; refusing to overwrite")
    (outdir / "config.resolved").write_text(resolved_config_text(cfg), encoding="utf-8")

    train, test = resolve_datasets(cfg)
    guide, target = build_models(cfg, train)
    models = [m for m in (guide, target) if m is not None]
    opt = SGD(models, plan.optimizer)
    stream = BatchStream(train, plan.batch_size, seed=plan.seed)
    header = metrics_header([n for n, _ in cfg.eval_attacks])

    def log(msg):
        if verbose:
            print(msg, flush=True)

    log(f"run {outdir}: method={plan.method} epochs={plan.epochs} "
        f"train={len(train)} test={len(test)} seed={plan.seed}")

    with open(outdir / "metrics.csv", "w", encoding="utf-8", newline="") as mf:
        mf.write(",".join(header) + "\n")
        mf.flush()
        for epoch in range(plan.epochs):
            t0 = perf_counter()
            sums = {"loss_guide": 0.0, "loss_target": 0.0, "labels_agreement": 0.0}
            seen = 0
            for i, batch in enumerate(stream.batches(epoch)):
                step_seed = derive_seed(plan.seed, "step", epoch, i)
                if plan.method in ("dynat", "dynat-inner"):
                    rep = dynat_train_step(guide, target, batch, plan, opt, epoch, step_seed)
                elif plan.method == "lbgat":
                    rep = lbgat_step(guide, target, batch, plan, opt, epoch, step_seed)
                elif plan.method == "pgd-at":
                    rep = pgd_at_step(target, batch, plan, opt, epoch, step_seed)
                else:
                    rep = clean_step(target, batch, plan, opt, epoch)
                n = batch[0].data.shape[0]
                seen += n
                sums["loss_guide"] += rep.guide_loss * n
                sums["loss_target"] += rep.target_loss * n
                sums["labels_agreement"] += rep.labels_agreement * n

            if (epoch + 1) % cfg.eval_every == 0 or epoch == plan.epochs - 1:
                row = evaluate(guide, target, train, test, cfg.eval_attacks,
                               epoch=epoch, seed=plan.seed,
                               attack_examples=cfg.attack_examples)
                row["epoch"] = epoch + 1
                for k in sums:
                    row[k] = sums[k] / seen
                row["wall_seconds"] = 0.0
                mf.write(format_metrics_row(header, row) + "\n")
                mf.flush()
                log(f"  epoch {epoch + 1:3d}/{plan.epochs}  "
                    f"clean={row['test_clean_target']:.3f} "
                    + " ".join(f"{c.removeprefix('robust_')}={row[c]:.3f}"
                               for c in header if c.startswith("robust_"))
                    + f"  [{perf_counter() - t0:.1f}s]")
            else:
                log(f"  epoch {epoch + 1:3d}/{plan.epochs}  [{perf_counter() - t0:.1f}s]")

    if guide is not None:
        save_checkpoint(guide, outdir / "guide.ckpt")
    save_checkpoint(target, outdir / "target.ckpt")
    return outdir


def load_run_models(cfg: ExperimentConfig, checkpoint_dir, train: Dataset):
    """Rebuild models from a run directory's checkpoints."""
    input_shape = train.images.shape[1:]
    classes = train.class_count
    cdir = Path(checkpoint_dir)
    target = load_checkpoint(cdir / "target.ckpt",
                             named_spec(cfg.target_spec_name, input_shape, classes))
    guide = None
    guide_path = cdir / "guide.ckpt"
    if cfg.guide_spec_name is not None and guide_path.exists():
        guide = load_checkpoint(guide_path,
                                named_spec(cfg.guide_spec_name, input_shape, classes))
    return guide, target


# ---------------------------------------------------------------------------
# comparison

@dataclass
class CompareReport:
    text: str
    rows: list  # long form: {"label", "epoch", "column", "value"}


def _best_marks(labels, values, column):
    if column == "wall_seconds" or not values:
        return {label: "" for label in labels}
    pick = min if column.startswith("loss") else max
    best = pick(values.values())
    return {label: (" *" if values[label] == best else "") for label in labels}


def compare_report(run_dirs) -> CompareReport:
    """Aligned per-epoch table plus a final-epoch summary; the best value
    per column is starred (max, or min for loss columns)."""
    if len(run_dirs) < 2:
        raise ValidationError("compare needs at least two run directories")
    runs = []
    header = None
    for d in run_dirs:
        p = Path(d)
        h, rows = read_metrics(p / "metrics.csv")
        if not rows:
            raise ValidationError(f"{p}: metrics.csv has no rows")
        resolved = load_config(p / "config.resolved")
        label = f"{resolved['train']['method']}:{p.name}"
        while any(label == lab for lab, _, _ in runs):
            label += "+"
        if header is None:
            header = h
        elif h != header:
            raise ValidationError(f"{p}: metrics columns {h} do not match {header}")
        runs.append((label, h, rows))

    columns = [c for c in header if c != "epoch"]
    long_rows = [{"label": label, "epoch": r["epoch"], "column": c, "value": r[c]}
                 for label, _, rows in runs for r in rows for c in columns]

    width = max(len(label) for label, _, _ in runs)
    width = max(width, len("method"))
    colw = {c: max(len(c), 10) for c in columns}
    lines = []
    head = f"{'epoch':>5}  {'method':<{width}}  " + "  ".join(f"{c:>{colw[c]}}" for c in columns)
    lines.append(head)
    lines.append("-" * len(head))
    epochs = sorted({r["epoch"] for _, _, rows in runs for r in rows})
    by_epoch = {label: {r["epoch"]: r for r in rows} for label, _, rows in runs}
    for epoch_no in epochs:
        for label, _, _ in runs:
            r = by_epoch[label].get(epoch_no)
            if r is None:
                continue
            cells = "  ".join(f"{r[c]:>{colw[c]}.6f}" for c in columns)
            lines.append(f"{epoch_no:>5}  {label:<{width}}  {cells}")
    lines.append("")
    lines.append("final epoch summary (* best per column; lower is better for losses)")
    finals = {label: rows[-1] for label, _, rows in runs}
    for c in columns:
        if c == "wall_seconds":
            continue
        values = {label: finals[label][c] for label, _, _ in runs}
        marks = _best_marks([label for label, _, _ in runs], values, c)
        parts = ", ".join(f"{label}={values[label]:.6f}{marks[label]}" for label in values)
        lines.append(f"{c:>22}: {parts}")
    return CompareReport(text="\n".join(lines) + "\n", rows=long_rows)
