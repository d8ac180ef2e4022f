import numpy as np
import pytest

import dynat.autodiff as ad
from dynat.attacks import (AttackStats, PerturbationBudget, attack_success_stats,
                           accuracy, fgsm, iterated_ascent, per_example_cross_entropy,
                           pgd, predict, project_linf)
from dynat.errors import ShapeError, ValidationError
from dynat.models import Dense, Flatten, ModelSpec, build_model


def setup_function(_):
    ad.reset_tape()


def linear_spec(features=4, classes=3):
    return ModelSpec("lin", (1, 2, 2), (Flatten(), Dense(features, classes)), classes)


def onehot(idx, classes):
    out = np.zeros((len(idx), classes))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def random_batch(rng, n=16, classes=3):
    x = ad.Tensor(rng.uniform(0, 1, (n, 1, 2, 2)))
    y = ad.Tensor(onehot(rng.integers(0, classes, n), classes))
    return x, y


# ---------------------------------------------------------------------------
# budget and projection

def test_budget_validation():
    PerturbationBudget(epsilon=0.0, step_size=0.0)  # degenerate is fine
    with pytest.raises(ValidationError):
        PerturbationBudget(epsilon=1.0, step_size=0.1)
    with pytest.raises(ValidationError):
        PerturbationBudget(epsilon=-0.1, step_size=0.0)
    with pytest.raises(ValidationError):
        PerturbationBudget(epsilon=0.1, step_size=0.2)
    with pytest.raises(ValidationError):
        PerturbationBudget(epsilon=0.1, step_size=0.1, steps=0)


def test_project_linf_oracle():
    budget = PerturbationBudget(epsilon=0.1, step_size=0.1)
    nat = ad.Tensor([[0.5, 0.05, 0.98]])
    adv = ad.Tensor([[0.75, -0.2, 1.3]])
    out = project_linf(adv, nat, budget).data
    assert np.allclose(out, [[0.6, 0.0, 1.0]])  # ball clamp, then pixel box


def test_project_linf_shape_mismatch():
    budget = PerturbationBudget(epsilon=0.1, step_size=0.1)
    with pytest.raises(ShapeError):
        project_linf(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((3, 2))), budget)


def test_project_is_idempotent():
    rng = np.random.default_rng(0)
    budget = PerturbationBudget(epsilon=0.05, step_size=0.05)
    nat = ad.Tensor(rng.uniform(0, 1, (8, 4)))
    adv = ad.Tensor(rng.uniform(-0.5, 1.5, (8, 4)))
    once = project_linf(adv, nat, budget)
    twice = project_linf(once, nat, budget)
    assert np.array_equal(once.data, twice.data)


# ---------------------------------------------------------------------------
# fgsm against the closed-form linear answer

def test_fgsm_matches_linear_oracle():
    rng = np.random.default_rng(42)
    model = build_model(linear_spec(), seed=7)
    x, y = random_batch(rng, n=32)
    eps = 0.1
    out = fgsm(model, x, y, PerturbationBudget(epsilon=eps, step_size=eps))

    # closed form: for logits z = xW + b, dCE/dx = (softmax(z) - y) W^T
    w = model.params["dense1.w"].data
    b = model.params["dense1.b"].data
    flat = x.data.reshape(32, -1)
    z = flat @ w + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    g = ((p - y.data) @ w.T).reshape(x.data.shape)
    want = np.clip(x.data + eps * np.sign(g), np.maximum(x.data - eps, 0), np.minimum(x.data + eps, 1))
    assert np.allclose(out.x_adv.data, want, atol=1e-12)


def test_pgd_one_step_equals_fgsm_bitwise():
    rng = np.random.default_rng(1)
    model = build_model(linear_spec(), seed=3)
    x, y = random_batch(rng)
    eps = 0.031
    a = fgsm(model, x, y, PerturbationBudget(epsilon=eps, step_size=eps, steps=5, random_start=True))
    b = pgd(model, x, y, PerturbationBudget(epsilon=eps, step_size=eps, steps=1, random_start=False),
            rng_seed=123)
    assert a.x_adv.data.tobytes() == b.x_adv.data.tobytes()
    assert a.loss_initial == b.loss_initial and a.loss_final == b.loss_final


# ---------------------------------------------------------------------------
# pgd behaviour

def test_pgd_budget_soundness():
    rng = np.random.default_rng(5)
    model = build_model(linear_spec(), seed=0)
    for eps, steps, rs in [(0.031, 1, False), (0.1, 10, True), (0.3, 5, True), (0.0, 3, False)]:
        x, y = random_batch(rng)
        step = eps / 4 if steps > 1 else eps
        out = pgd(model, x, y, PerturbationBudget(eps, step, steps, rs), rng_seed=9)
        assert np.abs(out.x_adv.data - x.data).max() <= eps + 1e-12
        assert out.x_adv.data.min() >= 0.0 and out.x_adv.data.max() <= 1.0


def test_pgd_zero_epsilon_returns_input():
    rng = np.random.default_rng(6)
    model = build_model(linear_spec(), seed=0)
    x, y = random_batch(rng)
    out = pgd(model, x, y, PerturbationBudget(0.0, 0.0, steps=4, random_start=True), rng_seed=1)
    assert np.array_equal(out.x_adv.data, x.data)


def test_pgd_deterministic_and_seed_sensitive():
    rng = np.random.default_rng(7)
    model = build_model(linear_spec(), seed=2)
    x, y = random_batch(rng)
    budget = PerturbationBudget(0.1, 0.025, steps=5, random_start=True)
    a = pgd(model, x, y, budget, rng_seed=11)
    b = pgd(model, x, y, budget, rng_seed=11)
    c = pgd(model, x, y, budget, rng_seed=12)
    assert a.x_adv.data.tobytes() == b.x_adv.data.tobytes()
    assert a.x_adv.data.tobytes() != c.x_adv.data.tobytes()


def test_pgd_random_start_stays_inside_ball():
    rng = np.random.default_rng(8)
    model = build_model(linear_spec(), seed=2)
    x, y = random_batch(rng)
    # step 0 isolates the start: the only movement is the random start
    budget = PerturbationBudget(0.15, 0.0, steps=1, random_start=True)
    out = pgd(model, x, y, budget, rng_seed=21)
    delta = out.x_adv.data - x.data
    assert np.abs(delta).max() <= 0.15 + 1e-12
    assert np.abs(delta).max() > 0.01  # actually moved


def test_pgd_ascent_does_not_decrease_loss():
    rng = np.random.default_rng(9)
    model = build_model(linear_spec(), seed=4)
    x, y = random_batch(rng, n=64)
    budget = PerturbationBudget(0.1, 0.025, steps=10, random_start=True)
    out = pgd(model, x, y, budget, rng_seed=3)
    frac = (out.per_example_final >= out.per_example_initial - 1e-9).mean()
    assert frac >= 0.9
    assert out.loss_final >= out.loss_initial - 1e-9


def test_pgd_leaves_parameters_untouched():
    model = build_model(linear_spec(), seed=5)
    before = model.param_bytes()
    rng = np.random.default_rng(10)
    x, y = random_batch(rng)
    pgd(model, x, y, PerturbationBudget(0.1, 0.025, steps=5, random_start=True), rng_seed=0)
    assert model.param_bytes() == before
    assert not model.frozen  # attack restores the caller's freeze state
    assert all(t.grad is None for t in model.params.values())


def test_pgd_label_batch_mismatch():
    model = build_model(linear_spec(), seed=5)
    x = ad.Tensor(np.zeros((4, 1, 2, 2)))
    y = ad.Tensor(np.eye(3))
    with pytest.raises(ShapeError):
        pgd(model, x, y, PerturbationBudget(0.1, 0.1), rng_seed=0)


def test_per_example_cross_entropy_matches_op():
    rng = np.random.default_rng(11)
    logits = rng.normal(0, 2, (8, 5))
    y = onehot(rng.integers(0, 5, 8), 5)
    per = per_example_cross_entropy(logits, y)
    whole = ad.softmax_cross_entropy(ad.Tensor(logits), ad.Tensor(y)).item()
    assert abs(per.mean() - whole) < 1e-12


# ---------------------------------------------------------------------------
# generic ascent and stats

def test_iterated_ascent_custom_objective():
    rng = np.random.default_rng(12)
    model = build_model(linear_spec(), seed=6)
    x, _ = random_batch(rng)
    ref = predict(model, x.data)

    def loss_fn(logits):
        per = ((logits.data - ref) ** 2).mean(axis=1)
        return ad.mse_loss(logits, ad.Tensor(ref)), per

    # the MSE objective is exactly minimal at the reference, so without a
    # random start the gradient is zero and the ascent cannot move
    _, stuck, _, per_f = iterated_ascent(
        model, x.data, PerturbationBudget(0.1, 0.025, steps=5), rng_seed=0, loss_fn=loss_fn)
    assert np.array_equal(stuck, x.data)
    assert per_f.mean() == 0.0

    # a random start breaks the symmetry and the loss climbs
    _, xa, per_i, per_f = iterated_ascent(
        model, x.data, PerturbationBudget(0.1, 0.025, steps=5, random_start=True),
        rng_seed=0, loss_fn=loss_fn)
    assert per_i.mean() > 0.0
    assert per_f.mean() >= per_i.mean()
    assert np.abs(xa - x.data).max() <= 0.1 + 1e-12


def test_attack_success_stats_fields():
    rng = np.random.default_rng(13)
    model = build_model(linear_spec(), seed=8)
    x, y = random_batch(rng, n=32)
    out = fgsm(model, x, y, PerturbationBudget(0.2, 0.2))
    stats = attack_success_stats(model, out, y)
    assert isinstance(stats, AttackStats)
    assert stats.clean_accuracy == accuracy(predict(model, x.data), y.data)
    assert stats.robust_accuracy == accuracy(predict(model, out.x_adv.data), y.data)
    assert abs(stats.mean_loss_gain - (out.per_example_final - out.per_example_initial).mean()) < 1e-15
    assert stats.robust_accuracy <= stats.clean_accuracy + 1e-9
