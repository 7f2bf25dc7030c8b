"""Short training of the full pipeline and its no-flow ablation.

A few hundred steps at 64x192 on CPU; numbers are indicative only.
The acceptance suite runs the longer three-seed protocol.

Run: python demos/03_train_and_compare.py [steps]
"""

import sys

from motiondepth.evaluate import format_table
from motiondepth.pipeline import PipelineConfig, evaluate_model, train
from motiondepth.synthdata import generate_dataset

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
train_set = generate_dataset(60, seed=1000)
test_set = generate_dataset(12, seed=2000)
base = PipelineConfig(min_depth=1.5, max_depth=40.0, pose_source="ground_truth", steps=steps)

full, dynamic = {}, {}
for config in (base, base.replace(use_flow=False), base.replace(prior_depth_only=True)):
    print(f"training {config.variant} for {steps} steps ...")
    result = evaluate_model(train(train_set, config).model, test_set, config)
    full[config.variant] = result["full"]
    dynamic[config.variant] = result["dynamic"]

print("\nwhole image")
print(format_table(full))
print("\nmoving objects only")
print(format_table(dynamic))
