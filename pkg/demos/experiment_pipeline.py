"""End-to-end experiment flow: write a config, run it twice with
different methods, then line the runs up with compare_report.

Everything an experiment produces lands in its output directory:
config.resolved (the effective settings, defaults filled in),
metrics.csv (one row per evaluated epoch), and final checkpoints.
"""
import tempfile
from pathlib import Path

from dynat import compare_report, load_experiment_config, read_metrics, run_experiment

CONFIG = """\
[dataset]
kind = "synthetic"
n_per_class = 120
classes = 4
image_side = 12
noise_sigma = 0.15
seed = 9
train_fraction = 0.8
patch_size = 4

[models]
guide = "small-mlp"
target = "small-cnn"

[train]
method = "dynat"
epochs = 8
batch_size = 32
seed = 0
epsilon = 0.05
step_size = 0.0125
steps = 5

[optimizer]
learning_rate = 0.02

[eval]
eval_every = 1
attack_examples = 64

[attack.pgd5]
epsilon = 0.05
step_size = 0.0125
steps = 5

[output]
dir = "{outdir}"
"""

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    run_dirs = []
    for method in ("dynat", "pgd-at"):
        text = CONFIG.replace('method = "dynat"', f'method = "{method}"')
        if method == "pgd-at":
            text = text.replace('guide = "small-mlp"\n', "")
        cfg_path = tmp / f"{method}.toml"
        cfg_path.write_text(text.format(outdir=tmp / method))
        cfg = load_experiment_config(cfg_path)
        outdir = run_experiment(cfg, verbose=False)
        run_dirs.append(outdir)
        print(f"{method}: wrote {sorted(p.name for p in outdir.iterdir())}")

    header, rows = read_metrics(run_dirs[0] / "metrics.csv")
    print(f"\nmetrics columns: {', '.join(header)}")
    last = rows[-1]
    print(f"dynat final epoch: clean {last['test_clean_target']:.3f}, "
          f"robust {last['robust_pgd5']:.3f}, "
          f"label agreement {last['labels_agreement']:.3f}")

    print("\n" + compare_report(run_dirs).text)
