"""Command-line front end.

Exit codes: 0 success, 1 operational failure (bad checkpoint, dataset
trouble, existing run dir, tolerance miss), 2 usage errors including a
missing or malformed config file.
"""

import argparse
import sys
from pathlib import Path

from . import autodiff as ad
from .attacks import accuracy, pgd
from .errors import ConfigError
from .experiments import (compare_report, evaluate, load_experiment_config,
                          load_run_models, predict_batched, resolve_datasets,
                          run_experiment)
from .gradcheck import run_suite
from .seeding import derive_seed

_OPERATIONAL = (ValueError, RuntimeError, OSError)


def _load_cfg(path):
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    return load_experiment_config(path)


def _cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    outdir = run_experiment(cfg, seed=args.seed, output_dir=args.output_dir,
                            verbose=not args.quiet)
    print(f"run complete: {outdir}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args.config)
    train, test = resolve_datasets(cfg)
    guide, target = load_run_models(cfg, args.checkpoint_dir, train)
    row = evaluate(guide, target, train, test, cfg.eval_attacks,
                   epoch=0, seed=cfg.plan.seed, attack_examples=cfg.attack_examples)
    for key, value in row.items():
        print(f"{key:>24}: {value:.6f}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_cfg(args.config)
    if not cfg.eval_attacks:
        raise ConfigError("config defines no [attack.*] sections")
    _, test = resolve_datasets(cfg)
    from .models import load_checkpoint, named_spec
    spec = named_spec(cfg.target_spec_name, test.images.shape[1:], test.class_count)
    model = load_checkpoint(args.checkpoint, spec)
    subset = test.take(min(cfg.attack_examples, len(test))) if cfg.attack_examples else test
    clean = accuracy(predict_batched(model, subset.images), subset.labels)
    print(f"examples={len(subset)}  clean_accuracy={clean:.6f}")
    chunk = 256
    for name, budget in cfg.eval_attacks:
        correct = 0
        gain = 0.0
        for i, lo in enumerate(range(0, len(subset), chunk)):
            x = ad.Tensor(subset.images[lo:lo + chunk])
            y = ad.Tensor(subset.labels[lo:lo + chunk])
            adv = pgd(model, x, y, budget, rng_seed=derive_seed(cfg.plan.seed, "attack", name, i))
            logits = predict_batched(model, adv.x_adv.data)
            correct += int((logits.argmax(1) == y.data.argmax(1)).sum())
            gain += float((adv.per_example_final - adv.per_example_initial).sum())
        print(f"{name}: epsilon={budget.epsilon:g} steps={budget.steps} "
              f"robust_accuracy={correct / len(subset):.6f} "
              f"mean_loss_gain={gain / len(subset):.6f}")
    return 0


def _cmd_grad_check(args) -> int:
    results = run_suite(h=args.step)
    worst = 0.0
    for name, err in results:
        print(f"{name:<28} {err:.3e}")
        worst = max(worst, err)
    ok = worst <= args.tolerance
    print(f"worst relative error {worst:.3e} "
          f"({'within' if ok else 'EXCEEDS'} tolerance {args.tolerance:g})")
    return 0 if ok else 1


def _cmd_compare(args) -> int:
    if len(args.run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    print(compare_report(args.run_dirs).text, end="")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynat",
                                description="adversarial-training laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train per a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="override [train] seed")
    t.add_argument("--output-dir", default=None, help="override [output] dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="evaluate checkpoints from a finished run")
    e.add_argument("config")
    e.add_argument("--checkpoint-dir", required=True)
    e.set_defaults(func=_cmd_evaluate)

    a = sub.add_parser("attack", help="attack one checkpoint per [attack.*] sections")
    a.add_argument("config")
    a.add_argument("--checkpoint", required=True)
    a.set_defaults(func=_cmd_attack)

    g = sub.add_parser("grad-check", help="finite-difference audit of every operator")
    g.add_argument("--tolerance", type=float, default=1.0e-5)
    g.add_argument("--step", type=float, default=1.0e-6)
    g.set_defaults(func=_cmd_grad_check)

    c = sub.add_parser("compare", help="tabulate metrics from several runs")
    c.add_argument("run_dirs", nargs="+")
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _OPERATIONAL as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
