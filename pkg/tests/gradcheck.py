"""Central-difference gradient checking for layers and small networks."""

import numpy as np

H = 1e-5


def rel_error(analytic, numeric):
    """Max abs difference scaled by the largest numeric entry (norm-wise relative error)."""
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f, x, h=H, indices=None):
    """Central differences of the scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_layer(layer, x, rng):
    """Return the worst relative error over the input and every parameter."""
    y = layer.forward(x)
    upstream = rng.normal(y.shape)
    layer.zero_grad()
    gx = layer.backward(upstream)

    def f():
        return float(np.sum(layer.forward(x) * upstream))

    errors = [rel_error(gx, numeric_grad(f, x))]
    for name, p in layer.params.items():
        errors.append(rel_error(layer.grads[name], numeric_grad(f, p)))
    return max(errors)
