"""Finite-difference verification of every backward rule.

Each check builds a small random problem, computes analytic gradients with
:func:`tacseg.autodiff.backward`, and compares every entry against central
differences with step 1e-5. The relative error per entry is
``|a - fd| / max(|a|, |fd|, 1e-8)``; a group passes when its maximum is below
1e-4.

The perturbed forward passes run in ``np.longdouble``. In f64 the difference
quotient carries roughly 1e-11 of rounding noise, which swamps the occasional
gradient entry that happens to sit near 1e-7; extended precision keeps the
oracle honest for those entries. The analytic side is always plain f64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig
from .fusion import fuse
from .model import ModelVariant, bce_loss, forward, init_params
from .rng import stream
from .tokens import TokenConfig, init_tokens, transformer_block

STEP = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-8
SCOPES = ("ops", "fusion", "block", "end2end")

Inputs = Dict[str, np.ndarray]
LossFn = Callable[[ad.Graph, Dict[str, ad.Node]], ad.Node]


@dataclass
class Case:
    """``build(rng)`` returns the inputs to differentiate and a loss builder."""

    scope: str
    name: str
    build: Callable[[np.random.Generator], Tuple[Inputs, LossFn]]


class GroupResult(NamedTuple):
    scope: str
    case: str
    group: str
    seed: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


ORACLE_DTYPE = np.longdouble


def _evaluate(inputs: Inputs, loss_fn: LossFn, dtype=ORACLE_DTYPE):
    g = ad.Graph(dtype)
    nodes = {k: g.param(k, v) for k, v in inputs.items()}
    return loss_fn(g, nodes).value[()]


def numerical_gradient(inputs: Inputs, loss_fn: LossFn, name: str, step: float = STEP,
                       dtype=ORACLE_DTYPE) -> np.ndarray:
    """Central differences ``(f(x + h) - f(x - h)) / 2h`` for every entry of ``inputs[name]``."""
    base = np.asarray(inputs[name], dtype=dtype)
    h = dtype(step)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        up = _evaluate({**inputs, name: bumped.reshape(base.shape)}, loss_fn, dtype)
        bumped[i] -= 2 * h
        down = _evaluate({**inputs, name: bumped.reshape(base.shape)}, loss_fn, dtype)
        flat[i] = float((up - down) / (2 * h))
    return grad


def analytic_gradient(inputs: Inputs, loss_fn: LossFn) -> Dict[str, np.ndarray]:
    g = ad.Graph()
    nodes = {k: g.param(k, v) for k, v in inputs.items()}
    return ad.backward(g, loss_fn(g, nodes))


def check(case: Case, seed: int, groups: Callable[[str], str] = lambda k: k) -> List[GroupResult]:
    """Run one case at one seed; inputs are pooled into groups by ``groups(name)``."""
    inputs, loss_fn = case.build(stream(seed, "gradcheck", case.scope, case.name))
    analytic = analytic_gradient(inputs, loss_fn)
    worst: Dict[str, float] = {}
    for name in inputs:
        err = relative_error(analytic[name], numerical_gradient(inputs, loss_fn, name))
        key = groups(name)
        worst[key] = max(worst.get(key, 0.0), float(err.max()) if err.size else 0.0)
    return [GroupResult(case.scope, case.name, k, seed, v) for k, v in worst.items()]


# ----------------------------------------------------------------------------
# cases
# ----------------------------------------------------------------------------

def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _dims(rng, n, lo=1, hi=5):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _probe(out: ad.Node, rng_seed: int) -> ad.Node:
    w = np.random.default_rng(rng_seed).uniform(-1, 1, size=out.shape)
    return ad.weighted_sum(out, w)


def _op_case(name: str, make: Callable) -> Case:
    def build(rng):
        inputs, fn = make(rng)
        probe_seed = int(rng.integers(2 ** 31))
        return inputs, lambda g, n: _probe(fn(n), probe_seed)
    return Case("ops", name, build)


def _matmul(rng):
    m, k, n = _dims(rng, 3)
    return {"a": _u(rng, m, k), "b": _u(rng, k, n)}, lambda n_: ad.matmul(n_["a"], n_["b"])


def _softmax(rng):
    m, n = _dims(rng, 2)
    return {"x": _u(rng, m, n)}, lambda n_: ad.softmax_rows(n_["x"])


def _conv(rng):
    cin, cout = _dims(rng, 2, 1, 3)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = _dims(rng, 2, max(k, 2), 5)
    inputs = {"x": _u(rng, cin, h, w), "k": _u(rng, cout, cin, k, k), "b": _u(rng, cout)}
    return inputs, lambda n_: ad.conv2d(n_["x"], n_["k"], stride=stride, pad=pad, bias=n_["b"])


def _add(rng):
    s = _dims(rng, 2)
    return {"a": _u(rng, *s), "b": _u(rng, *s)}, lambda n_: ad.add(n_["a"], n_["b"])


def _add_bias(rng):
    m, n = _dims(rng, 2)
    return {"x": _u(rng, m, n), "b": _u(rng, n)}, lambda n_: ad.add_bias(n_["x"], n_["b"])


def _mul_scalar(rng):
    c = float(rng.uniform(-2, 2))
    return {"x": _u(rng, *_dims(rng, 2))}, lambda n_: ad.mul_scalar(n_["x"], c)


def _relu(rng):
    x = _u(rng, *_dims(rng, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    return {"x": x}, lambda n_: ad.relu(n_["x"])


def _layer_norm(rng):
    m, n = _dims(rng, 2, 1, 5)
    n = max(n, 2)
    inputs = {"x": _u(rng, m, n), "gamma": _u(rng, n), "beta": _u(rng, n)}
    return inputs, lambda n_: ad.layer_norm(n_["x"], n_["gamma"], n_["beta"])


def _transpose(rng):
    return {"x": _u(rng, *_dims(rng, 2))}, lambda n_: ad.transpose2d(n_["x"])


def _reshape(rng):
    a, b, c = _dims(rng, 3)
    return {"x": _u(rng, a, b, c)}, lambda n_: ad.reshape(n_["x"], (a * b, c))


def _pool(rng):
    c = _dims(rng, 1, 1, 3)[0]
    h, w = (2 * v for v in _dims(rng, 2, 1, 2))
    return {"x": _u(rng, c, h, w)}, lambda n_: ad.mean_pool2x2(n_["x"])


def _upsample(rng):
    return {"x": _u(rng, *_dims(rng, 3, 1, 3))}, lambda n_: ad.upsample_nearest2x(n_["x"])


def _concat(rng):
    c1, c2 = _dims(rng, 2, 1, 3)
    h, w = _dims(rng, 2, 1, 4)
    inputs = {"a": _u(rng, c1, h, w), "b": _u(rng, c2, h, w)}
    return inputs, lambda n_: ad.concat([n_["a"], n_["b"]], axis=0)


def _slice(rng):
    m, n = _dims(rng, 2, 2, 5)
    lo = int(rng.integers(0, n - 1))
    hi = int(rng.integers(lo + 1, n + 1))
    return {"x": _u(rng, m, n)}, lambda n_: ad.slice_axis(n_["x"], 1, lo, hi)


def _sum_all(rng):
    return {"x": _u(rng, *_dims(rng, 2))}, lambda n_: ad.mul_scalar(ad.sum_all(n_["x"]), 1.0)


def _mean_all(rng):
    return {"x": _u(rng, *_dims(rng, 2))}, lambda n_: ad.mean_all(n_["x"])


def _bce_case(rng):
    shape = [1] + _dims(rng, 2)
    y = (rng.random(shape) < 0.5).astype(float)
    return {"z": _u(rng, *shape)}, lambda g, n_: ad.bce_with_logits(n_["z"], y)


OP_CASES: List[Case] = [
    _op_case("matmul", _matmul),
    _op_case("softmax_rows", _softmax),
    _op_case("conv2d", _conv),
    _op_case("add", _add),
    _op_case("add_bias", _add_bias),
    _op_case("mul_scalar", _mul_scalar),
    _op_case("relu", _relu),
    _op_case("layer_norm", _layer_norm),
    _op_case("transpose2d", _transpose),
    _op_case("reshape", _reshape),
    _op_case("mean_pool2x2", _pool),
    _op_case("upsample_nearest2x", _upsample),
    _op_case("concat", _concat),
    _op_case("slice_axis", _slice),
    _op_case("sum_all", _sum_all),
    _op_case("mean_all", _mean_all),
    Case("ops", "bce_loss", _bce_case),
]


def _fusion_build(rng):
    hw, l, e = 3, 2, 3
    inputs = {"C": _u(rng, hw, e), "T": _u(rng, l, e), "W_q": _u(rng, e, e), "W_k": _u(rng, e, e)}
    probe_seed = int(rng.integers(2 ** 31))
    return inputs, lambda g, n: _probe(fuse(n["C"], n["T"], n["W_q"], n["W_k"]), probe_seed)


def _block_build(rng):
    l, e, heads = 2, 4, 2
    cfg = TokenConfig(patch_size=1, embed_dim=e, depth=1, heads=heads, mlp_ratio=2, input_channels=1)
    params = init_tokens(cfg, (1, l), int(rng.integers(2 ** 31)))
    block = {k: v for k, v in params.items() if k.startswith("tokens.block0.")}
    # random (not unit/zero) norm affines and biases so every path carries gradient
    block = {k: _u(rng, *v.shape, lo=-1.0, hi=1.0) for k, v in block.items()}
    inputs = {"X": _u(rng, l, e), **block}
    probe_seed = int(rng.integers(2 ** 31))

    def loss(g, n):
        # the block's g.param lookups resolve to the leaves already on the graph
        p = {k: n[k].value for k in block}
        return _probe(transformer_block(g, n["X"], "tokens.block0", p, heads), probe_seed)

    return inputs, loss


def tiny_variant() -> ModelVariant:
    backbone = BackboneConfig(depth=2, stage_channels=(2, 3), embed_dim=4, input_channels=3)
    tokens = TokenConfig(patch_size=4, embed_dim=4, depth=2, heads=2, mlp_ratio=2, input_channels=3)
    return ModelVariant("fused", (8, 8), backbone, tokens)


def _end2end_build(rng):
    variant = tiny_variant()
    # O(1) values everywhere: training init keeps the fusion path near identity,
    # where many gradient entries fall to the finite-difference noise floor
    shapes = {k: v.shape for k, v in init_params(variant, 0).items()}
    params = {k: _u(rng, *shape, lo=-1.0, hi=1.0) for k, shape in shapes.items()}
    image = rng.uniform(0, 1, size=(3, 8, 8))
    target = (rng.random((1, 8, 8)) < 0.4).astype(float)

    def loss(g, n):
        return bce_loss(forward(variant, image, {k: n[k].value for k in n}, g), target)

    return params, loss


SCOPE_CASES: Dict[str, List[Case]] = {
    "ops": OP_CASES,
    "fusion": [Case("fusion", "fuse", _fusion_build)],
    "block": [Case("block", "transformer_block", _block_build)],
    "end2end": [Case("end2end", "fused_model_bce", _end2end_build)],
}


def group_of(scope: str) -> Callable[[str], str]:
    if scope == "end2end":
        return lambda name: ".".join(name.split(".")[:2])
    if scope == "block":
        return lambda name: name if name == "X" else ".".join(name.split(".")[2:-1])
    return lambda name: name


def run(scope: str, seeds: Iterable[int] = range(5), cases: Sequence[Case] = None) -> List[GroupResult]:
    if scope not in SCOPE_CASES and cases is None:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    results = []
    for case in (cases if cases is not None else SCOPE_CASES[scope]):
        for seed in seeds:
            results.extend(check(case, seed, group_of(case.scope)))
    return results


def summarize(results: Sequence[GroupResult]) -> List[GroupResult]:
    """Worst error per (scope, case, group) across seeds."""
    worst: Dict[tuple, GroupResult] = {}
    for r in results:
        key = (r.scope, r.case, r.group)
        if key not in worst or r.max_rel_err > worst[key].max_rel_err:
            worst[key] = r
    return list(worst.values())
