"""Command-line interface: happy paths and exit codes."""

import pytest

from dynat.cli import main

CFG = """\
[dataset]
kind = "synthetic"
n_per_class = 18
classes = 3
image_side = 8
noise_sigma = 0.15
seed = 7
train_fraction = 0.75

[models]
target = "small-mlp"

[train]
method = "clean"
epochs = 1
batch_size = 16
seed = 3

[eval]
attack_examples = 6

[attack.pgd2]
epsilon = 0.1
step_size = 0.05
steps = 2

[output]
dir = "{outdir}"
"""


def write_cfg(directory, outdir, name="cfg.toml"):
    path = directory / name
    path.write_text(CFG.format(outdir=outdir))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(base, base / "run")
    assert main(["train", str(cfg), "--quiet"]) == 0
    return cfg, base / "run"


def test_train_with_overrides(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tmp_path / "ignored")
    code = main(["train", str(cfg), "--quiet",
                 "--output-dir", str(tmp_path / "actual"), "--seed", "11"])
    assert code == 0
    assert "run complete" in capsys.readouterr().out
    assert (tmp_path / "actual" / "metrics.csv").is_file()
    assert not (tmp_path / "ignored").exists()
    assert "seed = 11" in (tmp_path / "actual" / "config.resolved").read_text()


def test_train_progress_log(tmp_path, capsys):
    cfg = write_cfg(tmp_path, tmp_path / "run")
    assert main(["train", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "method=clean" in out and "epoch   1/1" in out


def test_evaluate(trained, capsys):
    cfg, run = trained
    assert main(["evaluate", str(cfg), "--checkpoint-dir", str(run)]) == 0
    out = capsys.readouterr().out
    assert "test_clean_target" in out and "robust_pgd2" in out


def test_attack(trained, capsys):
    cfg, run = trained
    code = main(["attack", str(cfg), "--checkpoint", str(run / "target.ckpt")])
    assert code == 0
    out = capsys.readouterr().out
    assert "clean_accuracy=" in out
    assert "pgd2: epsilon=0.1 steps=2 robust_accuracy=" in out


def test_compare(trained, tmp_path, capsys):
    cfg, run = trained
    other_cfg = write_cfg(tmp_path, tmp_path / "other")
    assert main(["train", str(other_cfg), "--seed", "5", "--quiet"]) == 0
    capsys.readouterr()
    assert main(["compare", str(run), str(tmp_path / "other")]) == 0
    out = capsys.readouterr().out
    assert "final epoch summary" in out and "clean:run" in out


def test_grad_check(capsys):
    assert main(["grad-check"]) == 0
    assert "within tolerance" in capsys.readouterr().out


def test_grad_check_tolerance_miss(capsys):
    assert main(["grad-check", "--tolerance", "1e-30"]) == 1
    assert "EXCEEDS" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# failure exit codes: 2 = usage/config, 1 = operational

def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.toml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_malformed_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[dataset]\nkind = synthetic\n")  # bare string
    assert main(["train", str(bad)]) == 2
    assert "double quotes" in capsys.readouterr().err


def test_rerun_into_existing_dir_is_operational(trained, capsys):
    cfg, _ = trained
    assert main(["train", str(cfg), "--quiet"]) == 1
    assert "refusing to overwrite" in capsys.readouterr().err


def test_evaluate_missing_checkpoints(trained, tmp_path, capsys):
    cfg, _ = trained
    assert main(["evaluate", str(cfg), "--checkpoint-dir", str(tmp_path)]) == 1
    capsys.readouterr()


def test_attack_missing_checkpoint(trained, tmp_path, capsys):
    cfg, _ = trained
    assert main(["attack", str(cfg), "--checkpoint", str(tmp_path / "x.ckpt")]) == 1
    capsys.readouterr()


def test_compare_single_dir_is_usage_error(trained, capsys):
    _, run = trained
    assert main(["compare", str(run)]) == 2
    capsys.readouterr()


def test_compare_missing_dir_is_operational(trained, tmp_path, capsys):
    _, run = trained
    assert main(["compare", str(run), str(tmp_path / "ghost")]) == 1
    capsys.readouterr()


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["conquer"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_missing_required_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "whatever.toml"])
    assert exc.value.code == 2
    capsys.readouterr()
