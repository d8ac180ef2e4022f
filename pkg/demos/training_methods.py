"""The four training methods on one small corpus.

clean fits the unperturbed data.  pgd-at regenerates adversarial
examples every step and fits those against ground truth.  dynat trains
a clean guide jointly and fits the target's adversarial examples
against the guide's current argmax labels.  lbgat instead matches the
target's adversarial logits to the guide's clean logits by MSE.
"""
import numpy as np

from dynat import (BatchStream, LossWeights, OptimizerSettings, PerturbationBudget,
                   SGD, TrainPlan, build_model, clean_step, dynat_train_step,
                   lbgat_step, named_spec, pgd_at_step, split, synthetic_blobs)
from dynat.experiments import predict_batched, robust_accuracy
from dynat.attacks import accuracy
from dynat.seeding import derive_seed

whole = synthetic_blobs(n_per_class=120, classes=4, image_side=12,
                        noise_sigma=0.15, seed=9, patch_size=4)
train, test = split(whole, 0.8, seed=9)
budget = PerturbationBudget(epsilon=0.05, step_size=0.0125, steps=5, random_start=True)
epochs, batch_size = 8, 32

for method in ("clean", "pgd-at", "dynat", "lbgat"):
    plan = TrainPlan(method=method, epochs=epochs, weights=LossWeights(beta=1.0),
                     budget=None if method == "clean" else budget,
                     batch_size=batch_size,
                     optimizer=OptimizerSettings(learning_rate=0.02,
                                                 decay_epochs=(epochs // 2,)),
                     seed=0)
    target = build_model(named_spec("small-cnn", train.images.shape[1:], 4),
                         seed=derive_seed(0, "target"))
    guide = None
    models = [target]
    if method in ("dynat", "lbgat"):
        guide = build_model(named_spec("small-mlp", train.images.shape[1:], 4),
                            seed=derive_seed(0, "guide"))
        models = [guide, target]
    optimizer = SGD(models, plan.optimizer)
    stream = BatchStream(train, batch_size, seed=plan.seed)

    for epoch in range(epochs):
        agree = []
        for i, batch in enumerate(stream.batches(epoch)):
            step_seed = derive_seed(plan.seed, "step", epoch, i)
            if method == "dynat":
                report = dynat_train_step(guide, target, batch, plan, optimizer, epoch, step_seed)
            elif method == "lbgat":
                report = lbgat_step(guide, target, batch, plan, optimizer, epoch, step_seed)
            elif method == "pgd-at":
                report = pgd_at_step(target, batch, plan, optimizer, epoch, step_seed)
            else:
                report = clean_step(target, batch, plan, optimizer, epoch)
            agree.append(report.labels_agreement)

    clean_acc = accuracy(predict_batched(target, test.images), test.labels)
    robust = robust_accuracy(target, test, budget, seed=1)
    extra = ""
    if guide is not None:
        guide_acc = accuracy(predict_batched(guide, test.images), test.labels)
        extra = f"  guide {guide_acc:.3f}  final label agreement {np.mean(agree):.3f}"
    print(f"{method:7s} clean {clean_acc:.3f}  robust {robust:.3f}{extra}")
