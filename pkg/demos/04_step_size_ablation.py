"""Which training choices make recollection accurate?

The recollected vectors are products of per-step multipliers. Larger steps
make each multiplier further from the identity, so the first-order view
degrades, and past the curvature limit the product blows up. A decaying step
size damps late steps and helps. This script sweeps both knobs on the convex
model and then pushes the step size until the divergence guard fires.
"""

from hfunlearn.harness import ExperimentConfig, run_ablation

base = ExperimentConfig.from_dict(dict(seeds=[42], rates=[0.3], methods=["hf", "retrain"]))

for axis, values in (("step_size", [0.005, 0.01, 0.05]), ("decay", [0.995, 1.0])):
    result = run_ablation(base, axis, values)
    print(f"-- {axis}")
    for row in result.rows:
        if row["method"] == "hf":
            print(f"   {row['axis_value']:<6}  distance to retrain {row['distance']:.4f}  {row['status']}")

# Ridge without regularisation has curvature set by the data alone. Far past
# 2/M the multipliers grow every step and the run is reported, not returned.
ridge = ExperimentConfig.from_dict(dict(kind="ridge", l2=0.0, per_class=30, dim=4, test_per_class=0,
                                        epochs=2, batch_size=10, seeds=[0], rates=[0.1],
                                        methods=["hf", "retrain"]))
for row in run_ablation(ridge, "step_size", [0.01, 50.0]).rows:
    if row["method"] == "hf":
        print(f"ridge step {row['axis_value']}: {row['status']}")
