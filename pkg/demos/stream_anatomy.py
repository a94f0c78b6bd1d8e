"""A look at what one synthetic user stream contains."""
import numpy as np

from useradapt import ActionLabel, LwpState, SynthConfig, gen_collection

cfg = SynthConfig(seed=7)
col = gen_collection(cfg, n_population=0, n_train=0, n_test=3)
stream = col.test_users[0]
x, verbs, nouns = stream.arrays()
print(len(stream), "samples in", len(stream.batches), "batches of", cfg.batch_size)
print("feature block", x.shape, "rms norm", np.sqrt((x ** 2).sum(1).mean()).round(2))

# actions as flat ids
actions = verbs + cfg.num_verbs * nouns
ids, counts = np.unique(actions, return_counts=True)
print(len(ids), "distinct actions out of", cfg.actions_per_user, "in the user's subset")

# long tail: share of samples carried by the top 20% of actions
top = np.sort(counts)[::-1][:max(1, len(counts) // 5)]
print("top 20% of actions cover", round(top.sum() / counts.sum(), 3), "of the stream")

# temporal correlation: how often a sample repeats the previous action
repeats = (actions[1:] == actions[:-1]).mean()
print("repeat rate", round(repeats, 3))

# a last-label predictor already does well on such streams
for window in (1, 4, 32, None):
    lwp, hits = LwpState(window), 0
    for v, n in zip(verbs, nouns):
        hits += lwp.predict_pair() == (v, n)
        lwp.update([ActionLabel(int(v), int(n))])
    print("window", window or "all", "accuracy", round(hits / len(actions), 3))
