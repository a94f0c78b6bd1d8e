"""Where does the adaptation go? Transfer between users and feature probes."""
import numpy as np

from useradapt import (OptimConfig, ProbeConfig, ReplayMemory, SynthConfig, adapt_stream, gen_collection,
                       linear_probe, pretrain, transfer_matrix)

cfg = SynthConfig(seed=3)
col = gen_collection(cfg, n_population=20, n_train=0, n_test=5, disjoint=True)
pop = pretrain(col, epochs=20, lr=0.05, seed=3).params
opt = OptimConfig(lr=0.01)

finals = {s.user_id: adapt_stream(pop, s, opt, None, pop, track_rf=False).final for s in col.test_users}
tm = transfer_matrix(finals, list(col.test_users), pop)
np.set_printoptions(precision=2, suppress=True)
print("loss-mode gain of row model on column user")
print(tm.values)
print("each user is best served by its own model:", tm.diagonal_dominant())

# probe the feature stage with fresh heads
for stream in col.test_users[:3]:
    sgd = adapt_stream(pop, stream, opt, None, pop, track_rf=False).final
    er = adapt_stream(pop, stream, opt, ReplayMemory("HybridCBRS", 64, rng=0), pop, track_rf=False).final
    p_sgd = linear_probe(sgd, stream, ProbeConfig())["action"]
    p_er = linear_probe(er, stream, ProbeConfig())["action"]
    print(stream.user_id, "probe action acc  SGD", round(p_sgd, 2), " ER", round(p_er, 2))
