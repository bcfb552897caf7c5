"""Central finite differences against the tape."""
import numpy as np

from ecomoe.autograd import GradTape


def max_rel_error(loss_fn, params, h=1e-5, n_probe=None, rng=None, floor=1e-6):
    """Largest |analytic - numeric| / max(|analytic| + |numeric|, floor) over probed entries."""
    with GradTape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if n_probe is not None and flat.size > n_probe:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, n_probe, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            dn = float(loss_fn().data)
            flat[i] = old
            num = (up - dn) / (2 * h)
            ana = g.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana) + abs(num), floor)
            worst = max(worst, err)
    return worst
