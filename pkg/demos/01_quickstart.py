"""Forget part of a training set without retraining.

Train a regularised logistic model on a synthetic two-class problem, stream a
recollection vector for every sample while it trains, then forget 10% of the
data by adding the matching vectors to the learned weights. Retraining from
scratch on the same batch schedule is the reference we compare against.
"""

import numpy as np

from hfunlearn import (
    ModelSpec,
    PrivacyBudget,
    RecollectionConfig,
    TrainConfig,
    init_params,
    make_synthetic,
    recollect_streaming,
    restrict,
    retrain,
    unlearn,
)
from hfunlearn.model import predict
from hfunlearn.numkit import Rng
from hfunlearn.unlearn import sensitivity_oracle

data = make_synthetic(classes=2, per_class=250, dim=10, separation=2.0, seed=7)
test = make_synthetic(classes=2, per_class=100, dim=10, separation=2.0, seed=8)
spec = ModelSpec("logistic", data.p, data.K, l2=0.5)
config = TrainConfig(eta0=0.005, decay=0.995, epochs=10, batch_size=25, seed=0)
schedule = config.schedule(data.n)
init = init_params(spec, seed=0)

# One pass trains the model and fills the store: one d-vector per sample.
w, store = recollect_streaming(spec, data, schedule, config, RecollectionConfig(), init)
print(f"learned model {w.digest}, store {store.n} x {store.d}, {store.file_size()} bytes on disk")
print(f"Hessian-vector products during training: {store.stats['hvp_count']}")

# Pick 50 samples to forget.
forget = np.sort(Rng(1).permutation(data.n)[:50])

# Reference: retrain on the same schedule with those samples dropped.
w_retrain, _ = retrain(spec, data, restrict(schedule, forget), config, init)

# The approximation error is only known because we retrained; here it calibrates the noise.
sens = sensitivity_oracle(w_retrain, w, store.group_sum(forget))
result = unlearn(w, store, forget, PrivacyBudget(1.0, 1e-3), sens, Rng(2))

gap = np.linalg.norm(w_retrain.theta - w.theta)
err = np.linalg.norm(w_retrain.theta - result.clean.theta)
print(f"distance learned -> retrained   {gap:.5f}")
print(f"distance unlearned -> retrained {err:.5f}  ({100 * err / gap:.2f}% of the gap left)")
print(f"noise sigma {result.sigma:.2e}, vector addition took {result.nanoseconds / 1e3:.1f} us")

for name, params in (("learned", w), ("retrained", w_retrain), ("unlearned+noise", result.noisy)):
    acc = np.mean(predict(params, test.X) == test.y)
    print(f"test accuracy {name:16s} {acc:.3f}")

# Forgotten rows are tombstoned; asking again is refused.
try:
    unlearn(result.clean, store, forget[:1], PrivacyBudget(1.0, 1e-3), sens, Rng(3))
except Exception as exc:
    print(f"second request for id {forget[0]}: {exc}")
