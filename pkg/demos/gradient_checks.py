# %% [markdown]
# # Checking the hand-written gradients
#
# Every training loss ships an analytic gradient. Central finite differences
# in extended precision confirm them on tiny models.

# %%
import numpy as np

from startnet.clsnet import ClsModel, cls_loss_and_grad
from startnet.locnet import LocModel, baseline_loss, ce_loss_and_grad, policy_surrogate, rollout
from startnet.recurrent import finite_diff_check

rng = np.random.default_rng(0)

# %% [markdown]
# ## Classifier cross-entropy

# %%
params = ClsModel.init(3, 4, 5, seed=0).params()
feats, labels = rng.normal(size=(6, 2, 3)), rng.integers(0, 4, (6, 2))
err = finite_diff_check(lambda p: cls_loss_and_grad(p, feats, labels), params, eps=1e-6, dtype=np.longdouble)
print(f"cross-entropy: worst relative error {err:.2e}")

# %% [markdown]
# ## Localizer losses
#
# The fed-back start probabilities depend on the parameters, so the
# surrogate's gradient flows through the history as well as the recurrence.

# %%
model = LocModel.init(3, 2, 4, seed=1)
model = model.with_params({k: 3 * v for k, v in model.params().items()})
scores = rng.dirichlet(np.ones(3), size=(8, 2))
flags = (rng.random((8, 2)) < 0.3).astype(float)
traj = rollout(model, scores, flags, alpha=5.0, rng=rng)
adv = traj.advantages.copy()

policy = {k: v for k, v in model.params().items() if not k.startswith("baseline.")}
base = {k: v for k, v in model.params().items() if k.startswith("baseline.")}


def start_ce(p):
    loss, grads = ce_loss_and_grad({**p, **base}, scores, flags, 4.0)
    return loss, {k: grads[k] for k in p}


checks = {
    "policy surrogate": (lambda p: policy_surrogate(p, traj, adv), policy),
    "baseline l2": (lambda p: baseline_loss({**policy, **p}, traj), base),
    "start cross-entropy": (start_ce, policy),
}
for name, (f, p) in checks.items():
    print(f"{name:20s} worst relative error {finite_diff_check(f, p, eps=1e-6, dtype=np.longdouble):.2e}")
