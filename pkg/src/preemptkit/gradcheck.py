"""Finite-difference audit of the analytic input and parameter gradients."""

import numpy as np

from .diffnet import Network, NetworkDef, conv3x3, dense, flatten, init_params, maxpool2x2, relu
from .tensor_core import finite_diff_grad

# entries smaller than this are compared in absolute terms
REL_FLOOR = 1e-6
KINK_MARGIN = 1e-3


def relative_error(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_net(rng):
    """A random small net (<= ~1k parameters) drawn from four topology families."""
    k = int(rng.integers(2, 5))
    family = int(rng.integers(4))
    if family == 0:
        n_in = int(rng.integers(2, 12))
        hidden = int(rng.integers(2, 10))
        nd = NetworkDef((dense(n_in, hidden), relu(), dense(hidden, k)), (n_in,), k)
    elif family == 1:
        n_in = int(rng.integers(2, 16))
        nd = NetworkDef((dense(n_in, k),), (n_in,), k)
    elif family == 2:
        c, ch, s = int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2 * int(rng.integers(2, 4))
        nd = NetworkDef((conv3x3(c, ch), relu(), maxpool2x2(), flatten(),
                         dense(ch * (s // 2) ** 2, k)), (c, s, s), k)
    else:
        c, ch, s = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(4, 8))
        out = (s - 1) // 2 + 1
        nd = NetworkDef((conv3x3(c, ch, stride=2), relu(), flatten(), dense(ch * out * out, k)), (c, s, s), k)
    params = init_params(nd, int(rng.integers(2**31)), dtype=np.float64)
    # non-zero biases so relu kinks are not aligned with zero inputs
    for t in params.tensors:
        if t.ndim == 1:
            t[:] = rng.normal(0, 0.3, size=t.shape)
    return Network(nd, params)


def kink_margin(net, x):
    """Distance of the current point from relu kinks and max-pool ties."""
    outs = net.trace(x)
    margin = np.inf
    for layer, inp in zip(net.netdef.layers, outs[:-1]):
        if layer.kind == "relu":
            margin = min(margin, float(np.min(np.abs(inp))))
        elif layer.kind == "maxpool2x2":
            b, c, h, w = inp.shape
            blocks = np.sort(inp.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                             .reshape(b, c, h // 2, w // 2, 4), axis=-1)
            margin = min(margin, float(np.min(blocks[..., -1] - blocks[..., -2])))
    return margin


def check_one(net, x, y, h=1e-5):
    """Max relative errors ``(input, params)`` for one net and one labelled batch."""
    _, g = net.loss_and_grad(x, y)
    num = finite_diff_grad(lambda z: float(np.sum(net.loss(z, y))), x, h)
    input_err = relative_error(g, num)
    _, grads = net.param_grads(x, y)
    param_err = 0.0
    for i, t in enumerate(net.params.tensors):
        def f(v, i=i):
            p = net.params.copy()
            p.tensors[i] = v
            return Network(net.netdef, p).param_grads(x, y)[0]
        param_err = max(param_err, relative_error(grads[i], finite_diff_grad(f, t, h)))
    return input_err, param_err


def run_gradcheck(n_nets=100, seed=0, h=1e-5, batch=2):
    """Check ``n_nets`` random nets; points too close to a kink are redrawn."""
    rng = np.random.default_rng(seed)
    results = []
    while len(results) < n_nets:
        net = random_net(rng)
        shape = (batch,) + net.netdef.input_shape
        x = rng.uniform(0, 1, size=shape)
        y = rng.integers(net.class_count, size=batch)
        if kink_margin(net, x) < KINK_MARGIN:
            continue
        input_err, param_err = check_one(net, x, y, h)
        results.append({
            "layers": [l.kind for l in net.netdef.layers],
            "n_params": int(sum(t.size for t in net.params.tensors)),
            "input_rel_err": input_err,
            "param_rel_err": param_err,
        })
    return {
        "n_nets": n_nets,
        "h": h,
        "seed": seed,
        "rel_floor": REL_FLOOR,
        "max_input_rel_err": max(r["input_rel_err"] for r in results),
        "max_param_rel_err": max(r["param_rel_err"] for r in results),
        "nets": results,
    }
