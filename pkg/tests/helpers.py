"""Finite-difference and brute-force oracles shared by the test modules."""
import numpy as np


def direct_conv(x, w, b):
    """Triple-loop 'same' convolution on one (H, W, C_in) image.

    ``w`` is (C_out, C_in, k, k) with ``w[o, c, u + p, v + p]`` the tap at offset (u, v).
    """
    H, W, C = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    y = np.zeros((H, W, O))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                acc = b[o]
                for c in range(C):
                    for u in range(-p, p + 1):
                        for v in range(-p, p + 1):
                            ii, jj = i - u, j - v
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += w[o, c, u + p, v + p] * x[ii, jj, c]
                y[i, j, o] = acc
    return y


def numeric_grad(f, arr, h=1e-5):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-300))


def layer_grad_errors(layer, x, rng):
    """Max relative error of the input and parameter gradients of one layer."""
    y = layer.forward(x)
    g = rng.standard_normal(y.shape)
    dx = layer.backward(g)
    analytic = {"x": dx, **{k: v.copy() for k, v in layer.grads.items()}}

    def loss():
        return float((layer.forward(x) * g).sum())

    errs = {"x": rel_error(numeric_grad(loss, x), analytic["x"])}
    for name, p in layer.params.items():
        errs[name] = rel_error(numeric_grad(loss, p), analytic[name])
    return errs


def model_grad_error(model, x, rng):
    # random biases keep pre-activations off the PReLU kink at exactly zero
    for layer in model.layers:
        if "b" in layer.params:
            layer.params["b"] = 0.1 * rng.standard_normal(layer.params["b"].shape)
    y = model.forward(x)
    g = rng.standard_normal(y.shape)
    model.backward(g)
    analytic = [gr.copy() for gr in model.gradients()]

    def loss():
        return float((model.forward(x) * g).sum())

    worst = 0.0
    for (_, _, p), a in zip(model.parameters(), analytic):
        worst = max(worst, rel_error(numeric_grad(loss, p), a))
    return worst
