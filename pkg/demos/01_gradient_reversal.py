# The reversal layer in isolation, then inside the full network.
import numpy as np

from gradrev import autodiff as ad
from gradrev.model import ModelConfig, feature_params, forward, head_params, init_params

# Forward: nothing happens.  Backward: the gradient flips sign.
tape = ad.Tape()
x = tape.leaf(3.0, "x")
y = ad.mul(ad.grad_reverse(ad.mul(x, x)), 1.0)
print("forward value", y.item(), "(x*x at x=3)")
print("backward dy/dx", ad.backward(y, tape)["x"], "(an ordinary derivative would be +6)")

# In the network the domain head sits behind the reversal, so a domain loss
# pushes the head toward better domain prediction and the features away from it.
cfg = ModelConfig(input_size=16, conv_channels=(4, 8))
params = init_params(cfg, seed=0)
rng = np.random.default_rng(0)
images = rng.uniform(-1, 1, size=(6, 1, 16, 16))
domains = np.array([0, 0, 1, 1, 2, 3])

grads = {}
for reverse in (True, False):
    out, tape = forward(params, images, cfg, reverse=reverse)
    grads[reverse] = ad.backward(ad.mean(ad.nll_loss(out.dmn_logprobs, domains)), tape)

for name in feature_params(params)[:2] + head_params(params, "dmn")[:2]:
    a, b = grads[True][name].ravel()[0], grads[False][name].ravel()[0]
    print(f"{name:24s} reversed {a:+.3e}   plain {b:+.3e}")
