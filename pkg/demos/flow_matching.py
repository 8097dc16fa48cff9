"""
Flow matching on a two-component mixture
=========================================

Train a tiny velocity network on 2-D data and compare sample moments.
The same model class backs the video teacher; here each "video" is one
frame of one token with two channels.
"""

import numpy as np

from streamdiff.acceptance import two_gaussian_data, two_gaussian_moments
from streamdiff.backbone import Backbone, BackboneConfig, ConditionSet
from streamdiff.flow import NoisePlan, cfm_loss, sample_multistep
from streamdiff.optim import AdamW
from streamdiff.rng import make_rng

rng = make_rng(0)
cfg = BackboneConfig(layers=2, heads=2, head_dim=8, d_model=16, tokens=1, channels=2, time_dim=16, chunk=1)
model = Backbone(cfg, seed=0)
opt = AdamW(model.params, lr=3e-3)

B = 256
cond = ConditionSet(np.zeros((B, 1, 2)), np.zeros((B, 1, 2)))
for step in range(1500):
    x0 = two_gaussian_data(rng, B).reshape(B, 1, 1, 2)
    loss, grads = cfm_loss(model, x0, cond, NoisePlan.draw(rng, x0.shape))
    opt.step(grads)
    if step % 300 == 0:
        print(f"step {step:4d}  loss {loss:.3f}")

n = 2000
samples = sample_multistep(model, ConditionSet(np.zeros((n, 1, 2)), np.zeros((n, 1, 2))), 1, 50, rng).reshape(n, 2)
mean, cov = two_gaussian_moments()
print("sample mean", np.round(samples.mean(0), 3), "target", mean)
print("sample cov\n", np.round(np.cov(samples.T), 3), "\ntarget\n", cov)
