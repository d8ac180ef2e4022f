"""Finite-difference verification of every autodiff primitive.

run_suite builds small fixed-seed graphs, one per check, and compares
tape gradients against central differences via grad_check.  Composite
checks route a probe tensor through MLP- and CNN-shaped graphs so the
chain rule is exercised across primitive boundaries, not just per op.

Central differences lie near kinks, so composite constants are chosen
by scanning seeds until every relu preactivation is at least 1e-3 from
zero and every pooling window has a top-two gap of at least 1e-4.
"""

import numpy as np

from . import autodiff as ad
from .seeding import make_rng

RELU_CLEARANCE = 1.0e-3
POOL_CLEARANCE = 1.0e-4


def _onehot(rows, classes, rng):
    idx = rng.integers(0, classes, size=rows)
    out = np.zeros((rows, classes))
    out[np.arange(rows), idx] = 1.0
    return out


def _pool_gap(x, window):
    # windows whose max is <= 0 only see flat relu zeros, so their ties
    # cannot disturb finite differences; skip them
    b, c, h, w = x.shape
    tiles = x.reshape(b, c, h // window, window, w // window, window)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // window, w // window, -1)
    top2 = np.sort(tiles, axis=-1)[..., -2:]
    gaps = top2[..., 1] - top2[..., 0]
    live = top2[..., 1] > 0.0
    return float(gaps[live].min()) if live.any() else np.inf


def _clearance(f, x):
    """Smallest relu preactivation magnitude and pooling top-two gap
    produced by one forward pass of f."""
    ad.reset_tape()
    probe = ad.Tensor(np.array(x.data, copy=True), requires_grad=True)
    f(probe)
    relu_c, pool_c = np.inf, np.inf
    for node in ad.active_tape().nodes:
        if node.name == "relu":
            relu_c = min(relu_c, float(np.abs(node.inputs[0].data).min()))
        elif node.name == "max_pool2d":
            window = node.inputs[0].data.shape[2] // node.out.data.shape[2]
            pool_c = min(pool_c, _pool_gap(node.inputs[0].data, window))
    ad.reset_tape()
    return relu_c, pool_c


def _pick_seed(build, base_key):
    """First seed whose constants keep the graph clear of kinks."""
    for offset in range(64):
        f, x = build(make_rng(*base_key, offset))
        relu_c, pool_c = _clearance(f, x)
        if relu_c >= RELU_CLEARANCE and pool_c >= POOL_CLEARANCE:
            return f, x
    raise RuntimeError(f"no kink-free seed found for {base_key}")


def _mlp(rng):
    x = ad.Tensor(rng.uniform(-1, 1, (4, 9)))
    w1 = rng.uniform(-0.7, 0.7, (9, 8))
    b1 = rng.uniform(-0.5, 0.5, 8)
    w2 = rng.uniform(-0.7, 0.7, (8, 6))
    b2 = rng.uniform(-0.5, 0.5, 6)
    w3 = rng.uniform(-0.7, 0.7, (6, 3))
    y = _onehot(4, 3, rng)

    def graph(xin, p1=None, p2=None, p3=None):
        c = lambda a: ad.Tensor(a)
        h = ad.relu(ad.add(ad.matmul(xin, p1 if p1 is not None else c(w1)), c(b1)))
        h = ad.relu(ad.add(ad.matmul(h, p2 if p2 is not None else c(w2)), c(b2)))
        return ad.softmax_cross_entropy(
            ad.matmul(h, p3 if p3 is not None else c(w3)), c(y))

    return graph, x, (w1, w2, w3)


def _cnn(rng):
    x = ad.Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    k1 = rng.uniform(-0.6, 0.6, (4, 1, 3, 3))
    cb = rng.uniform(-0.3, 0.3, 4)
    k2 = rng.uniform(-0.4, 0.4, (6, 4, 3, 3))
    w = rng.uniform(-0.6, 0.6, (24, 3))
    y = _onehot(2, 3, rng)

    def graph(xin, pk1=None, pcb=None, pk2=None, pw=None):
        c = lambda a: ad.Tensor(a)
        h = ad.relu(ad.conv2d(xin, pk1 if pk1 is not None else c(k1),
                              bias=pcb if pcb is not None else c(cb), padding="same"))
        h = ad.max_pool2d(h, 2)
        h = ad.relu(ad.conv2d(h, pk2 if pk2 is not None else c(k2), padding="valid"))
        return ad.softmax_cross_entropy(
            ad.matmul(ad.flatten(h), pw if pw is not None else c(w)), c(y))

    return graph, x, (k1, cb, k2, w)


def run_suite(h: float = 1.0e-6):
    """All checks as (name, max relative error) pairs."""
    checks = []

    def direct(name, build_fx):
        f, x = build_fx(make_rng("gradcheck", name))
        checks.append((name, ad.grad_check(f, x, h)))

    # single primitives, both operand slots where there are two;
    # constants are drawn eagerly so every evaluation sees one graph
    def two_sided(name, op, shape, const_shape=None, lo=-1.0, hi=1.0):
        def lhs(r):
            c = ad.Tensor(r.uniform(lo, hi, const_shape or shape))
            return (lambda t: ad.mean(op(t, c))), ad.Tensor(r.uniform(lo, hi, shape))

        def rhs(r):
            c = ad.Tensor(r.uniform(lo, hi, shape))
            return (lambda t: ad.mean(op(c, t))), ad.Tensor(r.uniform(lo, hi, const_shape or shape))
        direct(f"{name}/lhs", lhs)
        direct(f"{name}/rhs", rhs)

    two_sided("add", ad.add, (3, 4))
    two_sided("sub", ad.sub, (2, 5))
    two_sided("mul_elementwise", ad.mul_elementwise, (3, 4))

    def add_bias(r):
        c = ad.Tensor(r.uniform(-1, 1, (3, 4)))
        return (lambda t: ad.mean(ad.add(c, t))), ad.Tensor(r.uniform(-1, 1, 4))
    direct("add/bias", add_bias)

    def matmul_lhs(r):
        c = ad.Tensor(r.uniform(-1, 1, (4, 2)))
        return (lambda t: ad.mean(ad.matmul(t, c))), ad.Tensor(r.uniform(-1, 1, (3, 4)))

    def matmul_rhs(r):
        c = ad.Tensor(r.uniform(-1, 1, (3, 4)))
        return (lambda t: ad.mean(ad.matmul(c, t))), ad.Tensor(r.uniform(-1, 1, (4, 2)))
    direct("matmul/lhs", matmul_lhs)
    direct("matmul/rhs", matmul_rhs)

    def relu_x(r):
        x = np.sign(r.uniform(-1, 1, (3, 4))) * r.uniform(0.1, 1, (3, 4))
        return (lambda t: ad.mean(ad.relu(t))), ad.Tensor(x)
    direct("relu", relu_x)

    direct("scalar_mul", lambda r: ((lambda t: ad.mean(ad.scalar_mul(t, -1.7))),
                                    ad.Tensor(r.uniform(-1, 1, (4,)))))
    direct("flatten", lambda r: ((lambda t: ad.mean(ad.flatten(t))),
                                 ad.Tensor(r.uniform(-1, 1, (2, 3, 4)))))
    direct("mean", lambda r: ((lambda t: ad.mean(t)), ad.Tensor(r.uniform(-1, 1, (7,)))))

    def mse_pred(r):
        c = ad.Tensor(r.uniform(-1, 1, (3, 4)))
        return (lambda t: ad.mse_loss(t, c)), ad.Tensor(r.uniform(-1, 1, (3, 4)))

    def mse_ref(r):
        c = ad.Tensor(r.uniform(-1, 1, (3, 4)))
        return (lambda t: ad.mse_loss(c, t)), ad.Tensor(r.uniform(-1, 1, (3, 4)))
    direct("mse/pred", mse_pred)
    direct("mse/ref", mse_ref)

    def ce_check(r):
        y = ad.Tensor(_onehot(4, 5, r))
        return (lambda t: ad.softmax_cross_entropy(t, y)), ad.Tensor(r.uniform(-2, 2, (4, 5)))
    direct("softmax_cross_entropy", ce_check)

    for mode, kwargs in (("valid", {"padding": "valid"}),
                         ("same", {"padding": "same"}),
                         ("stride2", {"padding": "same", "stride": 2}),
                         ("valid-stride2", {"padding": "valid", "stride": 2})):
        def conv_x(r, kw=kwargs):
            k = r.uniform(-0.6, 0.6, (3, 2, 3, 3))
            return (lambda t: ad.mean(ad.conv2d(t, ad.Tensor(k), **kw)),
                    ad.Tensor(r.uniform(0, 1, (2, 2, 5, 6))))
        def conv_k(r, kw=kwargs):
            x = r.uniform(0, 1, (2, 2, 5, 6))
            return (lambda t: ad.mean(ad.conv2d(ad.Tensor(x), t, **kw)),
                    ad.Tensor(r.uniform(-0.6, 0.6, (3, 2, 3, 3))))
        direct(f"conv2d/{mode}/input", conv_x)
        direct(f"conv2d/{mode}/kernels", conv_k)

    def conv_b(r):
        x = r.uniform(0, 1, (2, 2, 5, 6))
        k = r.uniform(-0.6, 0.6, (3, 2, 3, 3))
        return (lambda t: ad.mean(ad.conv2d(ad.Tensor(x), ad.Tensor(k), bias=t, padding="same")),
                ad.Tensor(r.uniform(-0.5, 0.5, 3)))
    direct("conv2d/bias", conv_b)

    def pool_x(r):
        # resample until windows have clear maxima
        x = r.uniform(0, 1, (2, 3, 4, 4))
        while _pool_gap(x, 2) < POOL_CLEARANCE:
            x = r.uniform(0, 1, (2, 3, 4, 4))
        return (lambda t: ad.mean(ad.max_pool2d(t, 2)), ad.Tensor(x))
    direct("max_pool2d", pool_x)

    # composites: probe the input and each parameter slot of small
    # MLP- and CNN-shaped graphs
    def mlp_probe(slot):
        def build(rng):
            graph, x, (w1, w2, w3) = _mlp(rng)
            if slot == "input":
                return (lambda t: graph(t)), x
            consts = {"w1": w1, "w2": w2, "w3": w3}
            probe = ad.Tensor(consts[slot])
            xin = ad.Tensor(x.data)
            return (lambda t: graph(xin, **{{"w1": "p1", "w2": "p2", "w3": "p3"}[slot]: t})), probe
        return build

    for slot in ("input", "w1", "w2", "w3"):
        f, x = _pick_seed(mlp_probe(slot), ("gradcheck", "mlp", slot))
        checks.append((f"mlp/{slot}", ad.grad_check(f, x, h)))

    def cnn_probe(slot):
        def build(rng):
            graph, x, (k1, cb, k2, w) = _cnn(rng)
            if slot == "input":
                return (lambda t: graph(t)), x
            consts = {"k1": k1, "cb": cb, "k2": k2, "w": w}
            probe = ad.Tensor(consts[slot])
            xin = ad.Tensor(x.data)
            kw = {"k1": "pk1", "cb": "pcb", "k2": "pk2", "w": "pw"}[slot]
            return (lambda t: graph(xin, **{kw: t})), probe
        return build

    for slot in ("input", "k1", "cb", "k2", "w"):
        f, x = _pick_seed(cnn_probe(slot), ("gradcheck", "cnn", slot))
        checks.append((f"cnn/{slot}", ad.grad_check(f, x, h)))

    return checks
