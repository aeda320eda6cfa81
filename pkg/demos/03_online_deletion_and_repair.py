"""A deletion service: persist the store, serve requests, then repair.

After training, the recollection store is written to disk next to the model.
Deletion requests arrive one at a time and are answered by loading the store
and adding rows. Each answered id is tombstoned in the file, so a replayed
request is refused. Once many samples are gone the model is refreshed with a
short fine-tune on what remains; the store is carried through the fine-tune so
later requests are still served by vector addition.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from hfunlearn import (
    ApproximatorStore,
    HFUnlearnError,
    ModelSpec,
    Params,
    PrivacyBudget,
    RecollectionConfig,
    TrainConfig,
    init_params,
    make_synthetic,
    recollect_streaming,
    restrict,
    retrain,
    unlearn,
    unlearn_sequential,
)
from hfunlearn.model import estimate_constants, predict
from hfunlearn.numkit import Rng
from hfunlearn.unlearn import repair, sensitivity_bound

work = Path(tempfile.mkdtemp())
data = make_synthetic(classes=2, per_class=60, dim=5, separation=2.0, seed=12)
test = make_synthetic(classes=2, per_class=100, dim=5, separation=2.0, seed=13)
spec = ModelSpec("logistic", data.p, data.K, l2=0.5)
config = TrainConfig(eta0=0.1, decay=0.9, epochs=10, batch_size=10, seed=0)
schedule = config.schedule(data.n)
init = init_params(spec, 0)

w, store = recollect_streaming(spec, data, schedule, config, RecollectionConfig(), init)
w.save(work / "model.hfpw")
store.save(work / "store.hfun")

# Without a retrained reference the noise has to come from the worst-case bound.
consts = estimate_constants(w, data.X, data.y, config.eta0, store.stats["max_grad_norm"])
bound = sensitivity_bound(consts, config.eta0, config.decay, schedule.total_steps,
                          schedule.steps_per_epoch, config.batch_size, 1)
print(f"per-sample sensitivity bound {bound.value:.4f} (rho={consts.rho:.4f}, G={consts.G:.3f})")
budget = PrivacyBudget(1.0, 1e-3)

# --- serve three single-sample requests from disk -------------------------

store = ApproximatorStore.load(work / "store.hfun")
model = Params.load(work / "model.hfpw")
results = unlearn_sequential(model, store, [[4], [17], [33]], budget, bound, Rng(5))
for r in results:
    print(f"forgot {list(r.consumed)}: {r.nanoseconds / 1e3:.1f} us, sigma {r.sigma:.4f}")
store.save(work / "store.hfun")

# A replayed request against the reloaded store is refused. The reloaded store
# only knows the learned model's digest; the command line keeps a sidecar with
# the digests of derived clean models so a service can continue from them.
store = ApproximatorStore.load(work / "store.hfun")
store.lineage.update(r.clean.digest for r in results)
try:
    unlearn(model, store, [17], budget, bound, Rng(6))
except HFUnlearnError as exc:
    print(f"replay refused: {exc}")

# The chained clean model stays close to retraining without all three ids.
three = [4, 17, 33]
w_retrain, _ = retrain(spec, data, restrict(schedule, three), config, init)
print(f"distance to retrain after three requests {np.linalg.norm(results[-1].clean.theta - w_retrain.theta):.2e}")

# --- a large deletion, then a repair pass ---------------------------------

# Half of the data goes at once. The bound is worst case and scales with the
# group size, so the noise swamps the model.
big = [i for i in range(0, data.n, 2) if i not in three]
group = sensitivity_bound(consts, config.eta0, config.decay, schedule.total_steps,
                          schedule.steps_per_epoch, config.batch_size, len(big))
res = unlearn(results[-1].clean, store, big, budget, group, Rng(7))
gone = sorted(set(big) | set(three))
remaining = data.without(gone)


def accuracy(params):
    return float(np.mean(predict(params, test.X) == test.y))


print(f"accuracy: learned {accuracy(w):.3f}, after deleting {len(gone)} samples {accuracy(res.noisy):.3f}")

fix = replace(config, eta0=0.1, decay=1.0, epochs=10, seed=9)
w_rep, store_rep = repair(spec, remaining, res.noisy, store, fix)
print(f"after repair {accuracy(w_rep):.3f}; new store covers {store_rep.n} samples")

# Requests after the repair are served from the carried-over store.
later = unlearn(w_rep, store_rep, [int(remaining.source_ids[0])], budget, bound, Rng(8))
print(f"post-repair request for id {later.consumed[0]} took {later.nanoseconds / 1e3:.1f} us")
