"""Central finite-difference oracle and the gradient-check suite.

Error metric: ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` per
checked tensor, worst case over tensors and seeds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rpa import RpaBlock, RpaLayer
from .tensor import Tensor

ATOMIC_TOL = 1e-6
COMPOSITE_TOL = 1e-4
STEP = 1e-5


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP,
                     coords: list[tuple[int, ...]] | None = None) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h per coordinate; unchecked coordinates stay 0."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in (coords if coords is not None else np.ndindex(*x.shape)):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_op(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
             h: float = STEP) -> float:
    """Worst relative error of d/d(inputs) sum(fn(*inputs) * P) for a random projection P."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    T.backward(T.sum_(T.mul(out, Tensor(proj))))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(arr, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = Tensor(arr)
            with T.no_grad():
                return float((fn(*args).data * proj).sum())
        num = finite_diff_grad(f, inputs[i], h)
        worst = max(worst, rel_error(leaf.grad, num))
    return worst


def check_graph(loss_fn: Callable[[], Tensor], leaves: list[Tensor], rng: np.random.Generator,
                max_coords: int = 6, h: float = STEP) -> float:
    """Composite check: perturb sampled coordinates of every leaf in place."""
    for leaf in leaves:
        leaf.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for leaf in leaves:
        flat = rng.permutation(leaf.size)[:max_coords]
        coords = [np.unravel_index(int(i), leaf.shape) for i in flat]
        analytic = leaf.grad.copy()

        def f(arr, leaf=leaf):
            saved = leaf.data
            leaf.data = arr
            try:
                with T.no_grad():
                    return float(loss_fn().data)
            finally:
                leaf.data = saved

        num = finite_diff_grad(f, leaf.data, h, coords)
        mask = np.zeros(leaf.shape, dtype=bool)
        for c in coords:
            mask[c] = True
        worst = max(worst, rel_error(analytic[mask], num[mask]))
    return worst


# ---------------------------------------------------------------------------
# the suite

def _signed(rng, shape, lo=0.1):
    return rng.uniform(lo, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _atomic_cases() -> dict[str, Callable[[np.random.Generator], float]]:
    return {
        "matmul": lambda g: check_op(T.matmul, [g.standard_normal((3, 4)), g.standard_normal((4, 2))], g),
        "matmul_batched": lambda g: check_op(T.matmul, [g.standard_normal((2, 3, 4)), g.standard_normal((4, 2))], g),
        "conv2d": lambda g: check_op(lambda x, w, b: T.conv2d(x, w, b), [
            g.standard_normal((2, 5, 5)), g.standard_normal((3, 2, 3, 3)), g.standard_normal(3)], g),
        "conv2d_1x1": lambda g: check_op(lambda x, w, b: T.conv2d(x, w, b), [
            g.standard_normal((2, 3, 4, 4)), g.standard_normal((3, 3, 1, 1)), g.standard_normal(3)], g),
        "conv2d_depthwise": lambda g: check_op(lambda x, w, b: T.conv2d(x, w, b, groups=4), [
            g.standard_normal((4, 5, 5)), g.standard_normal((4, 1, 3, 3)), g.standard_normal(4)], g),
        "conv2d_circular": lambda g: check_op(lambda x, w, b: T.conv2d(x, w, b, pad_mode="circular"), [
            g.standard_normal((2, 4, 5)), g.standard_normal((2, 2, 3, 3)), g.standard_normal(2)], g),
        "avg_pool2d": lambda g: check_op(lambda x: T.avg_pool2d(x, 8), [g.standard_normal((3, 8, 8))], g),
        "layer_norm": lambda g: check_op(lambda x, a, b: T.layer_norm(x, a, b), [
            g.standard_normal((4, 6)), g.standard_normal(6), g.standard_normal(6)], g),
        "softmax": lambda g: check_op(T.softmax_lastdim, [g.standard_normal((3, 5)) * 2], g),
        "gelu": lambda g: check_op(T.gelu, [g.standard_normal(12) * 2], g),
        "pixel_shuffle": lambda g: check_op(lambda x: T.pixel_shuffle(x, 2), [g.standard_normal((8, 2, 3))], g),
        "pixel_unshuffle": lambda g: check_op(lambda x: T.pixel_unshuffle(x, 2), [g.standard_normal((2, 4, 6))], g),
        "concat": lambda g: check_op(T.concat_lastdim, [g.standard_normal((3, 2)), g.standard_normal((3, 4))], g),
        "split": lambda g: check_op(lambda x: T.mul(*T.split_lastdim(x, 3)), [g.standard_normal((2, 6))], g),
        "transpose": lambda g: check_op(lambda x: T.transpose(x, (2, 0, 1)), [g.standard_normal((2, 3, 4))], g),
        "reshape": lambda g: check_op(lambda x: T.reshape(x, (6, 4)), [g.standard_normal((2, 3, 4))], g),
        "reflect_pad": lambda g: check_op(
            lambda x: T.gather_hw(x, np.pad(np.arange(5), (0, 3), mode="reflect"),
                                  np.pad(np.arange(4), (0, 4), mode="reflect")),
            [g.standard_normal((2, 5, 4))], g),
        "expand_batch": lambda g: check_op(lambda x: T.expand_batch(x, 3), [g.standard_normal((4, 2))], g),
        "add_bias": lambda g: check_op(T.add_bias, [g.standard_normal((3, 4)), g.standard_normal(4)], g),
        "add": lambda g: check_op(T.add, [g.standard_normal((3, 2)), g.standard_normal((3, 2))], g),
        "sub": lambda g: check_op(T.sub, [g.standard_normal((3, 2)), g.standard_normal((3, 2))], g),
        "mul": lambda g: check_op(T.mul, [g.standard_normal((3, 2)), g.standard_normal((3, 2))], g),
        "scale": lambda g: check_op(lambda x: T.scale(x, -1.7), [g.standard_normal((3, 2))], g),
        "abs": lambda g: check_op(T.abs_, [_signed(g, (3, 4))], g),
        "sum": lambda g: check_op(T.sum_, [g.standard_normal((3, 4))], g),
        "mean": lambda g: check_op(T.mean, [g.standard_normal((3, 4))], g),
    }


def _tiny_layer(rng: np.random.Generator, variant: str = "rpt") -> tuple[RpaLayer, np.ndarray]:
    layer = RpaLayer(4, 2, 2, 1, variant, rng)
    f = rng.standard_normal((4, 4, 4))
    layer(Tensor(f), init_priors=True)
    if layer.bank is not None:
        # move the bank off the local tokens so it is not a copy of the input path
        layer.bank.prior.data = layer.bank.prior.data + rng.standard_normal(layer.bank.prior.shape) * 0.5
    for p in layer.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * 0.1
    return layer, f


def _rpa_layer_case(g: np.random.Generator) -> float:
    layer, f = _tiny_layer(g)
    x = Tensor(f, requires_grad=True)
    proj = Tensor(g.standard_normal(f.shape))
    return check_graph(lambda: T.sum_(T.mul(layer(x), proj)), [x] + layer.parameters(), g)


def _rpa_block_case(g: np.random.Generator) -> float:
    l1, f = _tiny_layer(g)
    l2, _ = _tiny_layer(g)
    block = RpaBlock([l1, l2])
    x = Tensor(f, requires_grad=True)
    proj = Tensor(g.standard_normal(f.shape))
    return check_graph(lambda: T.sum_(T.mul(block(x), proj)), [x] + block.parameters(), g)


def _rpa_variant_case(variant: str):
    def case(g: np.random.Generator) -> float:
        layer, f = _tiny_layer(g, variant)
        x = Tensor(f, requires_grad=True)
        proj = Tensor(g.standard_normal(f.shape))
        return check_graph(lambda: T.sum_(T.mul(layer(x), proj)), [x] + layer.parameters(), g)
    return case


@dataclass
class CheckResult:
    name: str
    kind: str
    worst: float
    tol: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def suite() -> dict[str, tuple[str, Callable[[np.random.Generator], float]]]:
    cases = {name: ("atomic", fn) for name, fn in _atomic_cases().items()}
    cases["rpa_layer"] = ("composite", _rpa_layer_case)
    cases["rpa_layer_baseline"] = ("composite", _rpa_variant_case("baseline"))
    cases["rpa_layer_static"] = ("composite", _rpa_variant_case("static"))
    cases["rpa_block"] = ("composite", _rpa_block_case)
    return cases


def select(names: list[str], op: str | None) -> list[str]:
    if op is None:
        return names
    picked = [n for n in names if n == op or n.startswith(op + "_")]
    if not picked:
        raise KeyError(f"no gradient check named {op!r}")
    return picked


def run_gradcheck(op: str | None = None, seeds: int = 20) -> list[CheckResult]:
    cases = suite()
    results = []
    for name in select(list(cases), op):
        kind, fn = cases[name]
        t0 = time.perf_counter()
        worst = max(fn(np.random.default_rng([seed, 7])) for seed in range(seeds))
        results.append(CheckResult(name, kind, worst, ATOMIC_TOL if kind == "atomic" else COMPOSITE_TOL,
                                   seeds, time.perf_counter() - t0))
    return results
