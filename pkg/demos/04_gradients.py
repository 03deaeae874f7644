"""Checking the hand-written backward passes.

Every operation in the tensor library carries its own vector-Jacobian
product. Central differences give an independent estimate; the two must
agree to a small relative error. The last check pushes gradients through a
whole Aligner + enhancer stack, including the hard Hungarian assignment
(which is piecewise constant, so only the token values carry gradient).
"""
import numpy as np

from mtcm import model as mm
from mtcm import nn
from mtcm import tensor as tn
from mtcm.tensor import Tensor

rng = np.random.default_rng(0)
C = 16
cfg = mm.MtcmConfig(channels=C, heads=4, aligner_layers=2, mce_layers=2)
state = mm.init_mtcm(cfg, 0)


def readout(fn, shape):
    w = Tensor(rng.normal(size=shape))
    return lambda x: (fn(x) * w).sum()


checks = {
    "softmax": (lambda x: tn.softmax_axis(x, -1), (3, 5)),
    "layer_norm": (lambda x: nn.layer_norm(x, state.mce[0].tsa.norm_gain, state.mce[0].tsa.norm_bias), (4, C)),
    "multi-head attention": (lambda x: nn.mha(x, x, x, state.aligner[0].rca), (5, C)),
    "temporal conv": (lambda x: nn.conv1d_time(x, state.mce[0].conv), (6, C)),
    "time self-attention": (lambda x: nn.self_attn_axis(x, "time", state.mce[0].tsa), (4, 3, C)),
}
for name, (fn, shape) in checks.items():
    err = tn.finite_diff_check(readout(fn, shape), rng.normal(size=shape))
    print(f"{name:22s} worst relative error {err:.2e}")

s_e = rng.normal(size=(4, C))


def full(x):
    i_cube, _ = mm.aligner_forward(x, s_e, state)
    return mm.mce_forward(i_cube, s_e, state)


x = rng.normal(size=(4, 4, C))
print(f"{'aligner + enhancer':22s} worst relative error {tn.finite_diff_check(readout(full, x.shape), x):.2e}")
