"""Central finite-difference oracle for input gradients."""
import numpy as np

from a2d import nn

STEP = 1e-5


def _pattern(model, x):
    acts = nn._forward_cached(model, x[None, :])
    return tuple((a > 0).tobytes() for a, layer in zip(acts[1:], model.layers) if isinstance(layer, nn.Dense))


def _loss_for(name, model, x, rng):
    k = model.num_classes
    if name == "ce":
        return nn.CrossEntropy(int(rng.integers(k)))
    if name == "cw":
        return nn.MarginCW(int(rng.integers(k)), kappa=float(rng.uniform(0, 0.5)))
    return nn.MSE(rng.uniform(0, 1, k))


def gradient_check(loss_name, rng, nets=4, coords_per_net=50):
    """Worst relative error of backprop vs central differences, and #coords compared.

    Coordinates whose +-STEP probes straddle a ReLU kink, or switch the
    runner-up logit of the margin loss, are skipped: the function is not
    differentiable there.
    """
    worst, checked = 0.0, 0
    for _ in range(nets):
        d = int(rng.integers(20, 60))
        sizes = [d, int(rng.integers(3, 12)), int(rng.integers(3, 12)), int(rng.integers(2, 6))]
        model = nn.mlp(sizes, seed=int(rng.integers(2**31)))
        x = rng.uniform(0, 1, d)
        loss = _loss_for(loss_name, model, x, rng)
        _, g = nn.input_gradient(model, x, loss)
        for i in rng.choice(d, size=min(coords_per_net, d), replace=False):
            e = np.zeros(d)
            e[i] = STEP
            xp, xm = x + e, x - e
            if _pattern(model, xp) != _pattern(model, xm):
                continue
            if isinstance(loss, nn.MarginCW):
                zp, zm = nn.forward(model, xp)[None], nn.forward(model, xm)[None]
                t = np.array([loss.target])
                if nn.max_other(zp, t)[1][0] != nn.max_other(zm, t)[1][0]:
                    continue
            fp, _ = nn.input_gradient(model, xp, loss)
            fm, _ = nn.input_gradient(model, xm, loss)
            fd = (fp - fm) / (2 * STEP)
            rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
            checked += 1
    return worst, checked
