"""Training a small reconstructor and sweeping the missing fraction.

Sizes are kept small so the script finishes in a few minutes on one core.
Set ``VOLSURF_NB_SCALE`` to 500 (and ``VOLSURF_NB_EPOCHS``) for desk scale.

Run with ``python3 notebooks/03_train_and_evaluate.py``.
"""

# %% Data
import os
import time

import numpy as np

from volsurf.eval import evaluate_model, sparsity_sweep
from volsurf.nn.models import ModelConfig, build_model
from volsurf.nn.train import TrainConfig, train
from volsurf.svi import SviBaseline
from volsurf.synthgen import generate_dataset

n = int(os.environ.get("VOLSURF_NB_SCALE", 60))
epochs = int(os.environ.get("VOLSURF_NB_EPOCHS", 40))
t0 = time.time()
train_set = generate_dataset(n, 42, split_name="train")
val_set = generate_dataset(max(n // 5, 4), 123, split_name="val")
test_set = generate_dataset(max(n // 5, 4), 456, split_name="test")
print(f"generated {n} training surfaces in {time.time() - t0:.1f}s")

# %% Train an MLP with early stopping
cfg = ModelConfig("mlp")
untrained = build_model(cfg, train_set.grid, seed=0)
tcfg = TrainConfig.for_model("mlp", max_epochs=epochs, patience=10)
report = train(cfg, tcfg, train_set, val_set,
               callback=lambda e, tl, vl: print(f"epoch {e:3d} train {tl:.3e} val {vl:.3e}") if e % 5 == 0 else None)
print(f"best epoch {report.best_epoch}, best validation loss {report.best_val_loss:.3e}")

# %% Compare with the untrained network and the SVI baseline on the same masks
for name, model in (("untrained", untrained), ("mlp", report.model), ("svi", SviBaseline(test_set.grid))):
    agg = evaluate_model(model, test_set, p=0.3, seed=0)[0]
    print(f"{name:>9}: rmse_miss {agg.rmse_miss:.4f}  butterfly rate {agg.butterfly.rate:.3f}")

# %% Missing-fraction sweep, without retraining
for row in sparsity_sweep(report.model, test_set, fractions=np.round(np.arange(0.1, 1.0, 0.2), 1)):
    print(f"p={row.p:.1f}  rmse_miss {row.metrics.rmse_miss:.4f}")
