import numpy as np

from gudl.neural import nle_forward


def kink_margin(p, x):
    """Smallest distance of any pre-activation magnitude to its shrinkage threshold."""
    a = np.atleast_2d(x)[:, :, None]
    margin = np.inf
    for l in p.layers:
        z = l.affine(a)
        if l.threshold is not None:
            margin = min(margin, float(np.min(np.abs(np.abs(z) - l.threshold))))
            a = np.sign(z) * np.maximum(np.abs(z) - l.threshold, 0)
        else:
            a = z
    return margin


def smooth_input(p, rng, batch, width, margin=1e-3, tries=200):
    for _ in range(tries):
        x = rng.standard_normal((batch, width))
        if kink_margin(p, x) > margin:
            return x
    raise RuntimeError("could not find an input away from the shrinkage kinks")


def fd_param_grad(p, x, w, eps=1e-5):
    flat = p.flat()
    out = np.empty_like(flat)
    q = p.copy()
    for i in range(flat.size):
        f = flat.copy()
        f[i] += eps
        q.set_flat(f)
        lp = np.sum(w * nle_forward(q, x))
        f[i] -= 2 * eps
        q.set_flat(f)
        lm = np.sum(w * nle_forward(q, x))
        out[i] = (lp - lm) / (2 * eps)
    return out


def rel_errors(analytic, numeric, floor=1e-4):
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
