"""Central finite differences as an oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Return ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element ``i`` of ``x``.

    ``x.data`` is perturbed in place and restored afterwards; ``f`` must be
    deterministic and return a scalar tensor.
    """
    if step <= 0:
        raise ValueError("finite difference step must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` with a tiny floor for all-zero gradients."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(f: Callable[..., Tensor], inputs: list[Tensor], step: float = 1e-5) -> float:
    """Max relative error between :func:`~mga.tensor.backward` and finite differences.

    ``f`` receives all ``inputs`` positionally. Every input tensor is checked.
    """
    from .tensor import backward

    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    backward(f(*inputs))
    worst = 0.0
    for k, t in enumerate(inputs):
        def g(v, k=k):
            args = list(inputs)
            args[k] = v
            return f(*args)
        numeric = finite_diff_grad(g, t, step)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


# --------------------------------------------------------------------------
# the full suite: every differentiable op and every attention block


def _projected(fn, proj_seed: int):
    """Turn a tensor-valued ``fn`` into a scalar via a fixed random projection."""
    from . import ops

    cache = {}

    def scalar(*args):
        out = fn(*args)
        if out.ndim == 0:
            return out
        if out.shape not in cache:
            cache[out.shape] = Tensor(np.random.default_rng(proj_seed).normal(size=out.shape))
        return ops.sum_all(ops.mul(out, cache[out.shape]))

    return scalar


def _op_cases():
    """name -> (builder(rng) -> (fn, inputs))."""
    from . import attention as att
    from . import ops

    def u(rng, *shape, lo=-2.0, hi=2.0):
        return Tensor(rng.uniform(lo, hi, shape))

    def params(kind, c, cp, rng):
        p = att.init_attention_params(kind, c, cp, rng)
        # Nonzero biases so every path is exercised.
        for name, t in p.named_parameters():
            t.data[...] = rng.uniform(-2, 2, t.shape)
        return p

    cases = {}
    cases["conv2d"] = lambda r: (lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
                                 [u(r, 1, 2, 4, 4), u(r, 2, 2, 3, 3), u(r, 2)])
    cases["conv2d_dilated_strided"] = lambda r: (lambda x, w: ops.conv2d(x, w, None, stride=2, padding=2, dilation=2),
                                                 [u(r, 1, 2, 5, 5), u(r, 2, 2, 3, 3)])
    cases["relu"] = lambda r: (ops.relu, [u(r, 2, 3, 2, 2)])
    cases["sigmoid"] = lambda r: (ops.sigmoid, [u(r, 2, 3, 2, 2)])
    cases["softmax"] = lambda r: (lambda x: ops.softmax(x, axis=1), [u(r, 2, 4, 1, 1)])
    cases["global_avg_pool"] = lambda r: (ops.global_avg_pool, [u(r, 1, 2, 3, 3)])
    cases["avg_pool"] = lambda r: (lambda x: ops.avg_pool(x, 2), [u(r, 1, 2, 4, 4)])
    cases["elem_mul"] = lambda r: (ops.mul, [u(r, 1, 3, 2, 2), u(r, 1, 1, 2, 2)])
    cases["elem_mul_channel"] = lambda r: (ops.mul, [u(r, 1, 3, 2, 2), u(r, 1, 3, 1, 1)])
    cases["elem_add"] = lambda r: (ops.add, [u(r, 1, 3, 2, 2), u(r, 1, 1, 2, 2)])
    cases["concat"] = lambda r: (lambda a, b: ops.concat([a, b], axis=1), [u(r, 1, 2, 2, 2), u(r, 1, 1, 2, 2)])
    cases["bilinear_upsample"] = lambda r: (lambda x: ops.bilinear_upsample(x, 2), [u(r, 1, 2, 3, 3)])
    cases["channel_norm"] = lambda r: (lambda x, g, b: ops.channel_norm(x, g, b),
                                       [u(r, 2, 2, 3, 3), u(r, 2), u(r, 2)])

    def bce_case(r):
        target = (r.uniform(size=(1, 1, 3, 3)) > 0.5) * 1.0
        return (lambda p: ops.bce_loss(p, target)), [u(r, 1, 1, 3, 3, lo=0.05, hi=0.95)]

    cases["bce_loss"] = bce_case

    def mga_m_case(r):
        return att.mga_m, [u(r, 1, 3, 3, 3), u(r, 1, 1, 3, 3, lo=0.0, hi=1.0)]

    def tensor_case(kind, fn):
        def build(r):
            p = params(kind, 3, 2, r)
            names = [n for n, _ in p.named_parameters()]
            weights = [t for _, t in p.named_parameters()]

            def f(f_a, f_m, *ws):
                q = att.AttentionParams(**dict(zip(names, ws)))
                return fn(f_a, f_m, q)
            return f, [u(r, 1, 3, 3, 3), u(r, 1, 2, 3, 3)] + weights
        return build

    cases["mga_m"] = mga_m_case
    cases["mga_t"] = tensor_case(att.AttentionKind.MGA_T, att.mga_t)
    cases["mga_tm"] = tensor_case(att.AttentionKind.MGA_TM, att.mga_tm)
    cases["mga_tmc"] = tensor_case(att.AttentionKind.MGA_TMC, att.mga_tmc)
    return cases


OP_CASES = tuple(_op_cases())


def run_suite(trials: int = 100, seed: int = 0, step: float = 1e-5,
              names: Optional[Sequence[str]] = None) -> dict[str, float]:
    """Max relative error per op/module over ``trials`` random draws in [-2, 2]."""
    cases = _op_cases()
    out = {}
    for name in names or cases:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = 0.0
        for t in range(trials):
            fn, inputs = cases[name](rng)
            worst = max(worst, check_gradients(_projected(fn, t), inputs, step))
        out[name] = worst
    return out


def network_gradcheck(seed: int = 0, entries: int = 20, size: int = 16, step: float = 1e-5) -> float:
    """Relative error of backprop vs finite differences on randomly chosen network weights.

    A toy network runs the joint path in training mode on one ``3 x size x size``
    frame; the loss is the summed BCE of both heads.
    """
    from . import ops
    from .network import build_network
    from .tensor import backward

    rng = np.random.default_rng(seed)
    net = build_network(seed=seed)
    frame = rng.uniform(0, 1, (1, 3, size, size))
    flow = rng.uniform(0, 1, (1, 3, size, size))
    mask = (rng.uniform(size=(1, 1, size, size)) > 0.5) * 1.0

    def loss():
        out = net.forward_joint(frame, flow, training=True)
        return ops.add(ops.bce_loss(out.saliency, mask), ops.bce_loss(out.motion.saliency, mask))

    params = list(net.parameters())
    for p in params:
        p.zero_grad()
    backward(loss())
    sizes = np.array([p.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=entries, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    with no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = params[k], int(flat - offsets[k])
            view = p.data.reshape(-1)
            orig = view[i]
            view[i] = orig + step
            fp = float(loss().data)
            view[i] = orig - step
            fm = float(loss().data)
            view[i] = orig
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((fp - fm) / (2 * step))
    return relative_error(np.array(analytic), np.array(numeric))
