"""Distil three independently trained models into one student.

The teachers are trained on different random halves of a blob dataset. The
student never sees a label: it only matches the temperature-softened average
of the teachers' logits on an unlabeled pool, and its weights are the running
(SWA) mean of its per-epoch snapshots.

    python demos/04_distill_an_ensemble.py
"""
import numpy as np

from rkd import nn
from rkd.data import synth_blobs
from rkd.distill import DistillPlan, distill_with_trace, ensemble_logits
from rkd.simulator import sgd_train

train = synth_blobs(150, 3, 8, 0.4, seed=1)
test = synth_blobs(300, 3, 8, 0.4, seed=2)
pool = synth_blobs(80, 3, 8, 0.4, seed=3).unlabeled()
sizes = [8, 16, 3]


def accuracy(model_or_logits):
    logits = model_or_logits if isinstance(model_or_logits, np.ndarray) else nn.forward(model_or_logits, test.images)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


teachers = []
for k in range(3):
    idx = np.random.default_rng(k).choice(len(train), len(train) // 2, replace=False)
    teachers.append(sgd_train(nn.init_mlp(sizes, 10 + k), train.subset(idx), 8, 0.2, 16, seed=k))
    print(f"teacher {k}: test accuracy {accuracy(teachers[-1]):.3f}")
print(f"averaged logits: test accuracy {accuracy(ensemble_logits(teachers, test.images)):.3f}")

plan = DistillPlan(teachers, pool, temperature=2.0, epochs=15, kd_lr=0.5, batch_size=16)
student, trace = distill_with_trace(plan, nn.init_mlp(sizes, 99), seed=0)
print(f"\nstudent after {plan.epochs} epochs: test accuracy {accuracy(student):.3f}")
print("KL per epoch:", " ".join(f"{x:.4f}" for x in trace.epoch_losses))
print(f"SWA averaged {len(trace.snapshots)} snapshots (the initial weights plus one per epoch)")
