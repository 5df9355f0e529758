"""Central finite-difference gradient oracle shared by the test suite.

check_grads builds the op twice per probe and never touches the autodiff
internals, so it is an independent check of every backward rule.
"""

import numpy as np

from mf2sf.tensor import Tensor, tsum


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f around array x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build, inputs, rtol=1e-4, atol=1e-6, h=1e-5):
    """Verify autodiff grads of scalar build(*tensors) against central FD.

    inputs: list of float64 arrays. Every input gets requires_grad and is
    checked. build must return a Tensor; if it is not scalar the caller
    should reduce it (e.g. weighted sum) inside build.
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = build(*tensors)
    if out.data.size != 1:
        raise AssertionError("build must reduce to a scalar; wrap it in a weighted sum")
    out.backward()
    for i, t in enumerate(tensors):
        def f(x, i=i):
            probe = [Tensor(np.array(v, dtype=np.float64)) for v in inputs]
            probe[i] = Tensor(x)
            return float(build(*probe).data)

        num = numeric_grad(f, inputs[i], h=h)
        got = t.grad if t.grad is not None else np.zeros_like(num)
        np.testing.assert_allclose(got, num, rtol=rtol, atol=atol)


def weighted_sum(out, seed=0):
    """Reduce a tensor to a scalar that exercises every element."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.uniform(0.5, 1.5, size=out.data.shape).astype(out.data.dtype))
    from mf2sf.tensor import mul

    return tsum(mul(out, w))
