"""Gradient and invariant self-test suite (``ugn gradcheck``)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .model import EncoderConfig, UGNet, fuse_levels
from .nn import BatchNormState, Conv2dParams
from .tensor import Tensor, gradient_check, precision
from .train import TrainConfig, total_loss
from .uncertainty import UncertaintyConfig, gamma_map, sample_logits, uncertainty_loss

TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


Case = Tuple[Callable[..., Tensor], List[Tensor]]


def _shape(rng, lo=1, hi=4, ext=5) -> tuple:
    return tuple(int(v) for v in rng.integers(1, ext + 1, size=int(rng.integers(lo, hi + 1))))


def _weighted(fn: Callable[..., Tensor], rng) -> Callable[..., Tensor]:
    """Contract the op output with fixed random weights so every output coordinate matters."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(out.shape)
        return T.mul(out, Tensor(cache["w"]))

    return f


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _binary(op, positive_rhs=False):
    def build(rng) -> Case:
        a = _shape(rng)
        b = list(a)
        if rng.random() < 0.5:
            b[int(rng.integers(len(b)))] = 1
        rhs = _away_from_zero(rng, b, 0.5, 2.0) if positive_rhs else rng.standard_normal(b)
        xs = [Tensor(rng.standard_normal(a)), Tensor(rhs)]
        if rng.random() < 0.5:
            xs.reverse()
            if positive_rhs:
                xs = [Tensor(rng.standard_normal(b)), Tensor(_away_from_zero(rng, a, 0.5, 2.0))]
        return op, xs

    return build


def _unary(op, sample=None):
    def build(rng) -> Case:
        shape = _shape(rng)
        data = sample(rng, shape) if sample else rng.standard_normal(shape)
        return op, [Tensor(data)]

    return build


def _reduce(kind):
    def build(rng) -> Case:
        shape = _shape(rng)
        nd = len(shape)
        axes = tuple(int(a) for a in np.flatnonzero(rng.random(nd) < 0.5)) or None
        keep = bool(rng.random() < 0.5)
        fn = {"sum": T.sum, "mean": T.mean, "max": T.max}[kind]
        return (lambda x: fn(x, axes, keep)), [Tensor(rng.standard_normal(shape))]

    return build


def _lse(rng) -> Case:
    shape = _shape(rng)
    axis = int(rng.integers(len(shape)))
    keep = bool(rng.random() < 0.5)
    return (lambda x: T.logsumexp(x, axis, keep)), [Tensor(rng.standard_normal(shape) * 3)]


def _expand(rng) -> Case:
    n = int(rng.integers(1, 4))
    shape = _shape(rng, hi=3)
    return (lambda x: T.reshape(T.expand(x, n), (n, -1))), [Tensor(rng.standard_normal(shape))]


def _nchw(rng, n=(1, 2), c=(1, 3), hw=(3, 6)):
    return (
        int(rng.integers(n[0], n[1] + 1)),
        int(rng.integers(c[0], c[1] + 1)),
        int(rng.integers(hw[0], hw[1] + 1)),
        int(rng.integers(hw[0], hw[1] + 1)),
    )


def _conv(rng) -> Case:
    n, c, h, w = _nchw(rng)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    oc = int(rng.integers(1, 4))
    while (h + 2 * pad - k) // stride + 1 < 1 or (w + 2 * pad - k) // stride + 1 < 1:
        pad += 1
    xs = [Tensor(rng.standard_normal((n, c, h, w))), Tensor(rng.standard_normal((oc, c, k, k)))]
    if rng.random() < 0.5:
        xs.append(Tensor(rng.standard_normal(oc)))
        return (lambda x, wt, b: nn.conv2d(x, Conv2dParams(wt, b, stride, pad))), xs
    return (lambda x, wt: nn.conv2d(x, Conv2dParams(wt, None, stride, pad))), xs


def _pool(rng) -> Case:
    n, c, h, w = _nchw(rng)
    if rng.random() < 0.5:
        h, w = 2 * (h // 2 + 1), 2 * (w // 2 + 1)
        fn = lambda x: nn.maxpool2d(x, 2, 2)  # noqa: E731
    else:
        fn = lambda x: nn.maxpool2d(x, 3, 2, 1)  # noqa: E731
    # distinct values keep the argmax stable under perturbation
    data = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01 + rng.uniform(0, 1e-3, (n, c, h, w))
    return fn, [Tensor(data)]


def _upsample(rng) -> Case:
    shape = _nchw(rng, hw=(1, 4))
    f = int(rng.integers(1, 4))
    return (lambda x: nn.upsample_nearest(x, f)), [Tensor(rng.standard_normal(shape))]


def _batchnorm(rng) -> Case:
    n, c, h, w = _nchw(rng, n=(2, 3))
    training = bool(rng.random() < 0.5)
    rm = rng.standard_normal(c)
    rv = rng.uniform(0.5, 2.0, c)

    def fn(x, sc, sh):
        st = BatchNormState(sc, sh, rm.copy(), rv.copy())
        return nn.batchnorm2d(x, st, training)

    xs = [Tensor(rng.standard_normal((n, c, h, w)) * 2 + 1), Tensor(rng.uniform(0.5, 2, c)), Tensor(rng.standard_normal(c))]
    return fn, xs


def _softmax(rng) -> Case:
    shape = _nchw(rng, c=(2, 4))
    return nn.softmax_channel, [Tensor(rng.standard_normal(shape) * 2)]


def _lse_channel(rng) -> Case:
    shape = _nchw(rng, c=(2, 4))
    return nn.logsumexp_channel, [Tensor(rng.standard_normal(shape) * 2)]


def _labels(rng, n, c, h, w):
    labels = rng.integers(0, c, (n, h, w))
    valid = rng.random((n, h, w)) < 0.8
    valid.flat[int(rng.integers(valid.size))] = True
    return labels, valid


def _xent(rng) -> Case:
    n, c, h, w = _nchw(rng, c=(2, 4))
    labels, valid = _labels(rng, n, c, h, w)
    return (lambda x: nn.crossentropy_from_logits(x, labels, valid)), [Tensor(rng.standard_normal((n, c, h, w)) * 2)]


def _gamma(mode):
    def build(rng) -> Case:
        n, c, h, w = _nchw(rng, c=(2, 4), hw=(1, 4))
        samples = int(rng.integers(1, 6))
        cfg = UncertaintyConfig(samples, mode)
        labels, valid = _labels(rng, n, c, h, w)
        seed = int(rng.integers(1 << 31))

        def fn(l, s):
            lhat = sample_logits(l, s, samples, np.random.default_rng(seed))
            return uncertainty_loss(gamma_map(lhat, cfg, labels), valid)

        return fn, [Tensor(rng.standard_normal((n, c, h, w)) * 2), Tensor(rng.uniform(-2, 1, (n, c, h, w)))]

    return build


OP_CASES: Dict[str, Callable] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_rhs=True),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "relu": _unary(T.relu, _away_from_zero),
    "neg": _unary(T.neg),
    "scale": _unary(lambda x: T.scale(x, -2.5)),
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "max": _reduce("max"),
    "logsumexp": _lse,
    "expand+reshape": _expand,
    "conv2d": _conv,
    "maxpool2d": _pool,
    "upsample_nearest": _upsample,
    "batchnorm2d": _batchnorm,
    "softmax_channel": _softmax,
    "softplus": _unary(nn.softplus, lambda rng, s: rng.standard_normal(s) * 4),
    "logsumexp_channel": _lse_channel,
    "crossentropy_from_logits": _xent,
    "uncertainty_loss[winner]": _gamma("winner"),
    "uncertainty_loss[label]": _gamma("label"),
}


def check_op(name: str, trials: int = 100, seed: int = 0, eps: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng([seed, sum(name.encode())])
    worst = 0.0
    with precision(np.float64):
        for _ in range(trials):
            fn, xs = OP_CASES[name](rng)
            worst = max(worst, gradient_check(_weighted(fn, rng), xs, eps=eps))
    return CheckResult(f"grad {name}", worst < TOL, f"max rel err {worst:.2e} over {trials} trials")


def tiny_network(seed: int = 0, levels: int = 3, classes: int = 3) -> UGNet:
    widths = (2, 3, 4, 4, 4)[:levels]
    return UGNet(EncoderConfig(widths, blocks_per_stage=1, gate_width=3), classes, seed=seed)


def check_network(trials: int = 5, seed: int = 0, coords: int = 60, eps: float = 1e-6) -> CheckResult:
    """Finite-difference check of a 3-level assembled network under the full training loss plus fusion."""
    rng = np.random.default_rng([seed, 7])
    worst = 0.0
    with precision(np.float64):
        for trial in range(trials):
            model = tiny_network(seed + trial)
            model.train()
            params = model.parameters()
            x = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
            labels, valid = _labels(rng, 2, 3, 16, 16)
            ucfg = UncertaintyConfig(4, "winner" if trial % 2 == 0 else "label")
            tcfg = TrainConfig(lambda_unc=1.0, lambda_ce=1.0)
            sample_seed = int(rng.integers(1 << 31))
            wfuse = rng.standard_normal((1, 3, 4, 4))

            def f(*_):
                levels = model.forward(x, ucfg, np.random.default_rng(sample_seed), labels)
                loss = total_loss(levels, labels, valid, tcfg)
                fused = fuse_levels(levels, (4, 4), clamp=False)
                return T.add(loss, T.sum(T.mul(fused, Tensor(np.broadcast_to(wfuse, fused.shape).copy()))))

            worst = max(worst, gradient_check(f, params, eps=eps, coords=coords, rng=rng))
    return CheckResult("grad 3-level network", worst < TOL, f"max rel err {worst:.2e} over {trials} trials")


def gamma_only_loss(model: UGNet, x: Tensor, rng: np.random.Generator, ucfg: UncertaintyConfig) -> Tensor:
    """A loss that reaches the heads only through gamma: gated features plus the fusion weighting."""
    levels = model.forward(x, ucfg, np.random.default_rng(0))
    b0 = levels[-1].features
    loss = T.sum(T.mul(b0, Tensor(rng.standard_normal(b0.shape))))
    frozen = [type(lv)(lv.level, lv.features, T.stop_gradient(lv.l), lv.s, lv.lhat, lv.gamma, lv.b_bar) for lv in levels]
    fused = fuse_levels(frozen, levels[-1].l.shape[-2:], clamp=False)
    return T.add(loss, T.sum(T.mul(fused, Tensor(rng.standard_normal(fused.shape)))))


def check_stop_gradient(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 11])
    model = tiny_network(seed, levels=5, classes=4)
    x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
    model.zero_grad()
    gamma_only_loss(model, x, rng, UncertaintyConfig()).backward()
    heads = model.head_parameters()
    head_zero = all(p.grad is not None and not np.any(p.grad) for p in heads)
    enc = [p for _, p in model.encoder.named_parameters()]
    enc_live = any(p.grad is not None and np.any(p.grad) for p in enc)
    return CheckResult(
        "stop-gradient heads",
        head_zero and enc_live,
        f"head grads exactly zero: {head_zero}; encoder grads nonzero: {enc_live}",
    )


def run_all(trials: int = 100, seed: int = 0, log: Callable[[str], None] = lambda s: None) -> List[CheckResult]:
    results = []
    for name in OP_CASES:
        t0 = time.perf_counter()
        r = check_op(name, trials, seed)
        results.append(r)
        log(f"{r.line()} ({time.perf_counter() - t0:.1f}s)")
    for r in (check_network(max(1, trials // 20), seed), check_stop_gradient(seed)):
        results.append(r)
        log(r.line())
    return results
