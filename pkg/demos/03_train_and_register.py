"""Train a small shared-modality model and register held-out pairs with it.

This is a scaled-down run (a few minutes on one core) so the numbers are only
indicative; the acceptance suite trains the full-size configuration.

Run:  python demos/03_train_and_register.py
"""

import time

from sharemod import evaluation, shared, synthgen
from sharemod.cli import format_table

spec = synthgen.SceneSpec(seed=11)
ds = synthgen.gen_dataset(spec, 60)
held = synthgen.gen_eval_pairs(spec, 10, ds.sar_stats, ds.optical_stats)

config = shared.TrainConfig(variant="v2", epochs=10, seed=11)
start = time.perf_counter()
model, trace = shared.train([(p.x, p.y) for p in ds.pairs], config)
print(f"trained {config.epochs} epochs in {time.perf_counter() - start:.0f}s; "
      f"loss {trace[0].mean_loss:.3f} -> {trace[-1].mean_loss:.3f}")

reports = [
    evaluation.evaluate_dataset(held, "none"),
    evaluation.evaluate_dataset(held, "shared", model),
]
print()
print(format_table(reports))
