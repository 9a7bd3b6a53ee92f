# %% [markdown]
# # Online start detection on a small synthetic corpus
#
# A quick tour of the two-stage detector: generate streams, train the
# per-chunk classifier, train the start localizer, fuse, and score with
# point-level AP. Sizes are cut down so the script runs in about a minute.

# %%
import numpy as np

from startnet.clsnet import ClsModel, cls_infer_stream, frame_accuracy, train_clsnet
from startnet.evaluation import evaluate
from startnet.fusion import clsnet_only_starts, fuse, generate_starts
from startnet.locnet import LocModel, loc_infer_stream, train_locnet
from startnet.pipeline import ground_truth
from startnet.streams import SyntheticConfig, generate_corpus, imbalance_ratio

cfg = SyntheticConfig(stream_length=300)
train = generate_corpus(cfg, 60, seed=1, prefix="train")
test = generate_corpus(cfg, 15, seed=2, prefix="test")
print("train starts:", sum(int(s.start_flags.sum()) for s in train))
print("alpha:", round(imbalance_ratio([s.start_flags for s in train]), 2))

# %% [markdown]
# ## Stage 1: classifier

# %%
cls_model = ClsModel.init(cfg.feature_dim, cfg.num_classes, 32, seed=0)
cls_model, curve = train_clsnet(cls_model, train, seq_len=64, batch=16, epochs=6, lr=5e-3, seed=0)
print("loss curve:", np.round(curve, 3))
print("test frame accuracy:", round(frame_accuracy(cls_model, test), 4))

# %% [markdown]
# ## Stage 2: start localizer with policy gradient
#
# The localizer only sees the classifier's score vectors and its own last
# `n` start probabilities.

# %%
train_scores = [cls_infer_stream(cls_model, s) for s in train]
loc = LocModel.init(cfg.num_classes, history=8, hidden_dim=32, seed=0)
loc, rewards = train_locnet(loc, train_scores, [s.start_flags for s in train], batch=16, iterations=150, lr=1e-3, baseline_lr=1e-2)
print("mean window reward, first/last 30 iterations:", round(np.mean(rewards[:30]), 3), round(np.mean(rewards[-30:]), 3))

# %% [markdown]
# ## Fusion and evaluation

# %%
gts = ground_truth(test)
only, fused = [], []
for s in test:
    p = cls_infer_stream(cls_model, s)
    only += clsnet_only_starts(p, 0.0, s.name)
    fused += generate_starts(fuse(p, loc_infer_stream(loc, p)), 0.0, s.name)
for name, preds in (("clsnet-only", only), ("startnet-pg", fused)):
    rep = evaluate(preds, gts)
    print(f"{name:12s} predictions={len(preds):4d} p-mAP@1s={rep.value(1.0):.3f} p-mAP@10s={rep.value(10.0):.3f}")
