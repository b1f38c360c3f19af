"""Central finite-difference oracle, independent of the reverse pass."""
import numpy as np

from gradrev import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f(x) / dx by central differences; ``f`` maps an array to a float.

    The default step sits near the cube root of float64 epsilon, which balances
    truncation against roundoff for O(1) losses.
    """
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[i] += eps
        lo[i] -= eps
        grad[i] = (f(hi) - f(lo)) / (2 * eps)
    return grad


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / (|n| + 1e-8)``."""
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + 1e-8))


def check_op(build, inputs: dict, eps: float = 1e-5) -> dict:
    """Relative error per input of ``sum(w * build(**tensors))``.

    A fixed random weighting ``w`` turns any output into a scalar without
    every output element sharing the same upstream gradient.
    """
    rng = np.random.default_rng(1234)
    probe = {}

    def scalar(**arrays):
        out = build(**{k: ad.Tensor(v) for k, v in arrays.items()})
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return float(np.sum(out.data * probe["w"]))

    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in inputs.items()}
    out = build(**leaves)
    if "w" not in probe:
        probe["w"] = rng.normal(size=out.shape)
    loss = ad.tensor_sum(ad.mul(out, probe["w"]))
    grads = ad.backward(loss, tape)

    errors = {}
    for name, value in inputs.items():
        def f(v, name=name):
            args = dict(inputs)
            args[name] = v
            return scalar(**args)
        errors[name] = rel_error(grads[name], numeric_grad(f, value, eps))
    return errors
