"""Craft adversarial examples against a quickly trained classifier and
watch the loss climb with attack strength.

FGSM is the single-step corner of PGD, so the two share every invariant:
perturbations live in the epsilon ball, pixels stay in [0, 1], and a
fixed seed reproduces the attack byte for byte.
"""
import numpy as np

import dynat.autodiff as ad
from dynat import (BatchStream, LossWeights, OptimizerSettings, PerturbationBudget,
                   SGD, TrainPlan, attack_success_stats, build_model, clean_step,
                   fgsm, named_spec, pgd, split, synthetic_blobs)
from dynat.attacks import accuracy, predict

whole = synthetic_blobs(n_per_class=60, classes=4, image_side=12, noise_sigma=0.15, seed=5)
train, test = split(whole, 0.75, seed=5)

plan = TrainPlan(method="clean", epochs=6, weights=LossWeights(1.0), budget=None,
                 batch_size=32, optimizer=OptimizerSettings(learning_rate=0.05),
                 seed=0)
model = build_model(named_spec("small-mlp", train.images.shape[1:], 4), seed=0)
opt = SGD([model], plan.optimizer)
stream = BatchStream(train, plan.batch_size, seed=0)
for epoch in range(plan.epochs):
    for batch in stream.batches(epoch):
        clean_step(model, batch, plan, opt, epoch)

x = ad.Tensor(test.images)
y = ad.Tensor(test.labels)
print(f"clean accuracy {accuracy(predict(model, x.data), y.data):.3f}\n")

for eps in (0.02, 0.05, 0.1):
    budget = PerturbationBudget(epsilon=eps, step_size=eps / 4, steps=10, random_start=True)
    one = fgsm(model, x, y, PerturbationBudget(epsilon=eps, step_size=eps))
    ten = pgd(model, x, y, budget, rng_seed=42)
    stats = attack_success_stats(model, ten, y)
    print(f"eps {eps:.2f}:  loss clean {one.loss_initial:.3f}"
          f"  fgsm {one.loss_final:.3f}  pgd-10 {ten.loss_final:.3f}"
          f"  robust acc {stats.robust_accuracy:.3f}"
          f"  loss gain {stats.mean_loss_gain:+.3f}")

# determinism: same seed, same bytes; different seed, different start
budget = PerturbationBudget(epsilon=0.1, step_size=0.025, steps=10, random_start=True)
a = pgd(model, x, y, budget, rng_seed=7)
b = pgd(model, x, y, budget, rng_seed=7)
c = pgd(model, x, y, budget, rng_seed=8)
print(f"\nsame seed bit-exact: {np.array_equal(a.x_adv.data, b.x_adv.data)}, "
      f"different seed differs: {not np.array_equal(a.x_adv.data, c.x_adv.data)}")
