"""Finite-difference gradient suite over every differentiable op and both networks."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from psselect import autodiff as ad
from psselect.autodiff import Tensor, grad_check
from psselect.networks import NetworkSpec, build_network

TOLERANCE = 1e-5
NETWORK_ENTRIES = 20  # sampled entries per parameter tensor for the full networks


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    n_checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= TOLERANCE)


def _t(rng, *shape, scale=1.0):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def _projected(out_fn, shape, rng):
    """Scalar objective ``sum(f * r)`` against a fixed random projection."""
    r = rng.normal(size=shape)
    return lambda: (out_fn() * r).sum()


def _op_cases():
    rng = np.random.default_rng(0)
    cases = {}

    a, b = _t(rng, 3, 4), _t(rng, 4)
    cases["add_broadcast"] = (_projected(lambda: a + b, (3, 4), rng), [a, b])
    a2, b2 = _t(rng, 3, 1), _t(rng, 1, 5)
    cases["mul_broadcast"] = (_projected(lambda: a2 * b2, (3, 5), rng), [a2, b2])
    s1, s2 = _t(rng, 4, 3), _t(rng, 4, 3)
    cases["sub_neg"] = (_projected(lambda: -(s1 - s2) * s1, (4, 3), rng), [s1, s2])
    g = _t(rng, 4, 5, 2)
    cases["getitem"] = (_projected(lambda: g[1:3, ::2], (2, 3, 2), rng), [g])
    rs = _t(rng, 2, 6)
    cases["reshape_sum_mean"] = (lambda: rs.reshape(3, 4).sum(axis=0).mean() * rs.sum(), [rs])
    u, v = _t(rng, 2, 3), _t(rng, 2, 3)
    cases["stack"] = (_projected(lambda: ad.stack([u, v * u], axis=1), (2, 2, 3), rng), [u, v])
    cases["concat"] = (_projected(lambda: ad.concat([u, v], axis=-1), (2, 6), rng), [u, v])

    x = _t(rng, 3, 4)
    x.data[np.abs(x.data) < 1e-3] = 0.5  # keep away from the ReLU kink
    cases["relu"] = (_projected(lambda: ad.relu(x), (3, 4), rng), [x])
    y = _t(rng, 3, 4, scale=2.0)
    cases["sigmoid"] = (_projected(lambda: ad.sigmoid(y), (3, 4), rng), [y])
    cases["tanh"] = (_projected(lambda: ad.tanh(y), (3, 4), rng), [y])

    for rank, (spatial, k) in {1: ((7,), (5,)), 2: ((5, 6), (3, 3)), 3: ((4, 5, 3), (3, 3, 3))}.items():
        xin = _t(rng, 2, *spatial, 2)
        w = _t(rng, *k, 2, 3, scale=0.5)
        bias = _t(rng, 3)
        cases[f"conv{rank}d"] = (
            _projected(lambda xin=xin, w=w, bias=bias: ad.conv(xin, w, bias), (2, *spatial, 3), rng),
            [xin, w, bias],
        )

    xb = _t(rng, 4, 3, 3, 2)
    sc, sh = _t(rng, 2), _t(rng, 2)
    cases["batchnorm_train"] = (
        _projected(lambda: ad.batchnorm(xb, sc, sh, mode="train"), (4, 3, 3, 2), rng), [xb, sc, sh])
    st = ad.BatchNormState(2)
    st.mean, st.var = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
    cases["batchnorm_infer"] = (
        _projected(lambda: ad.batchnorm(xb, sc, sh, st, mode="infer"), (4, 3, 3, 2), rng), [xb, sc, sh])
    xd = _t(rng, 3, 5)
    cases["dropout"] = (_projected(lambda: ad.dropout(xd, 0.3, "train", seed=7), (3, 5), rng), [xd])
    xp, wp, bp = _t(rng, 2, 3, 3, 2, 4), _t(rng, 8), _t(rng, 1)
    cases["pixel_dense"] = (_projected(lambda: ad.pixel_dense(xp, wp, bp), (2, 3, 3, 1), rng), [xp, wp, bp])

    cell = ad.ConvLstmParams.init(2, 3, 3, rng)
    xs = _t(rng, 2, 3, 4, 4, 2)

    def lstm():
        hs = ad.convlstm_sequence(xs, cell)
        return ad.stack(hs, axis=1)

    cases["convlstm"] = (_projected(lstm, (2, 3, 4, 4, 3), rng), [xs] + list(cell.tensors().values()))

    pr = Tensor(rng.uniform(0.05, 0.95, size=(2, 4, 4)), requires_grad=True)
    lab = (rng.random((2, 4, 4)) < 0.3).astype(np.float64)
    lab[0, 0, 0] = 1.0
    cases["soft_f1_loss"] = (lambda: ad.soft_f1_loss(pr, lab, (200.0, 1.0)), [pr])
    return cases


def _network_case(kind: str, size: int = 8, steps: int = 4):
    rng = np.random.default_rng(1)
    spec = NetworkSpec(kind=kind, input_patch=size, n_timesteps=steps)
    net = build_network(spec, seed=3)
    x = net.encode(rng.uniform(-np.pi, np.pi, size=(2, steps, size, size)))
    labels = (rng.random((2, size, size)) < 0.2).astype(np.float64)
    labels[0, 0, 0] = 1.0

    def fn():
        return ad.soft_f1_loss(net.forward(x, mode="train", rng=11), labels, (200.0, 1.0))

    return fn, net.named_parameters()


def default_cases() -> dict:
    """name -> (fn, params, max_entries)."""
    out = {name: (fn, p, None) for name, (fn, p) in _op_cases().items()}
    for kind in ("cnn_iss", "clstm_iss"):
        fn, p = _network_case(kind)
        out[f"network_{kind}"] = (fn, p, NETWORK_ENTRIES)
    return out


def run_suite(cases: dict | None = None, h: float = 1e-6) -> list:
    cases = default_cases() if cases is None else cases
    results = []
    for name, (fn, params, max_entries) in cases.items():
        t0 = time.perf_counter()
        rep = grad_check(fn, params, h=h, max_entries=max_entries)
        results.append(CaseResult(name, rep.max_rel_error, rep.n_checked, time.perf_counter() - t0))
    return results
