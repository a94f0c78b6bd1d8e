"""Adapt a pretrained model to a few users with plain SGD and with replay.

Online gain measures how much better the adapted model predicts upcoming
samples; hindsight gain measures how well the final model still handles the
whole stream. Replay mostly helps the second.
"""
import numpy as np

from useradapt import OptimConfig, ReplayMemory, SynthConfig, adapt_stream, aggregate, gen_collection, pretrain
from useradapt.metrics import evaluate_stream, user_report

cfg = SynthConfig(seed=1)
col = gen_collection(cfg, n_population=20, n_train=0, n_test=8)
pop = pretrain(col, epochs=20, lr=0.05, seed=1).params

opt = OptimConfig(lr=0.1)
methods = {
    "SGD": lambda: None,
    "ER-FIFO": lambda: ReplayMemory("FIFO", 64, rng=0),
    "ER-Reservoir": lambda: ReplayMemory("Reservoir", 64, rng=0),
    "ER-HybridCBRS": lambda: ReplayMemory("HybridCBRS", 64, rng=0),
}

for name, memory in methods.items():
    reports = []
    for stream in col.test_users:
        res = adapt_stream(pop, stream, opt, memory(), pop)
        reports.append(user_report(res.log, evaluate_stream(res.final, stream),
                                   evaluate_stream(pop, stream), res.rf))
    row = {k: aggregate([r[k] for r in reports]) for k in ("oag_action", "hag_action", "avg_rf")}
    print(f"{name:14s}", "  ".join(f"{k} {m:6.2f} +- {s:4.2f}" for k, (m, s) in row.items()))

# more updates per batch help mostly where the next sample repeats the last one
for updates in (1, 10):
    cor, dec = [], []
    for stream in col.test_users:
        rep = user_report(adapt_stream(pop, stream, OptimConfig(lr=0.1, updates_per_batch=updates),
                                       None, pop, track_rf=False).log,
                          evaluate_stream(pop, stream), evaluate_stream(pop, stream))
        cor.append(rep["oag_cor_action"])
        dec.append(rep["oag_decor_action"])
    print(f"{updates:2d} updates: correlated {np.mean(cor):6.2f}  decorrelated {np.mean(dec):6.2f}")
