"""Gradient verification suite: every differentiable block against central
finite differences, plus an end-to-end check on the tiny model."""

from __future__ import annotations

import contextlib
import functools
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import blocks
from . import losses as L
from . import tensor as tc
from .gradcheck import GradcheckReport, gradcheck
from .taxonomy import NUM_LEVELS, builtin, leaf_levels
from .tensor import ParamSet, Tensor

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3
DEFAULT_SEEDS = 20

Case = Callable[[int], tuple[Callable[[], Tensor], dict]]


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    r = rng.standard_normal(out.shape) / max(out.size, 1) ** 0.5
    return tc.sum_(tc.mul(out, Tensor(r)))


def rng_fixed(seed: int) -> np.random.Generator:
    # the probe must be identical on every evaluation of f
    return np.random.default_rng(10_000 + seed)


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def case_conv(seed: int):
    rng = np.random.default_rng(seed)
    cin, cout, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    p = {"x": _param(rng, (2, cin, 5, 5)), "w": _param(rng, (cout, cin, k, k)), "b": _param(rng, (cout,))}
    return lambda: _probe(tc.conv2d(p["x"], p["w"], p["b"], stride, pad), rng_fixed(seed)), p


def case_softmax(seed: int):
    rng = np.random.default_rng(seed)
    p = {"z": _param(rng, (3, int(rng.integers(2, 7))), 2.0)}
    return lambda: _probe(tc.softmax(p["z"], axis=-1), rng_fixed(seed)), p


def case_log_filter(seed: int):
    rng = np.random.default_rng(seed)
    kern = blocks.log_kernel(int(rng.choice([3, 5])), float(rng.uniform(0.6, 1.5)))
    p = {"x": _param(rng, (2, 2, 6, 6))}
    return lambda: _probe(blocks.log_filter(p["x"], kern), rng_fixed(seed)), p


def case_attention(seed: int):
    rng = np.random.default_rng(seed)
    c, ca, d = 3, 2, 2
    params = ParamSet()
    for name, cout in (("g", ca), ("phi", ca), ("psi", ca), ("proj", d)):
        cin = ca if name == "proj" else c
        params[f"attn.{name}.w"] = _param(rng, (cout, cin, 1, 1), 0.7)
        params[f"attn.{name}.b"] = _param(rng, (cout,), 0.2)
    x = _param(rng, (2, c, 4, 4))
    stride = 1 + seed % 2
    residual = bool(seed % 3 == 0)

    def f():
        fp, emb = blocks.attention_localize(x, params, key_stride=stride, residual=residual)
        return tc.add(_probe(fp, rng_fixed(seed)), _probe(emb, rng_fixed(seed + 1)))
    return f, {"x": x, **dict(params.items())}


def case_partial_conv(seed: int):
    rng = np.random.default_rng(seed)
    mask = (rng.random((2, 1, 6, 6)) < 0.6).astype(np.float64)
    p = {"x": _param(rng, (2, 2, 6, 6)), "w": _param(rng, (3, 2, 3, 3)), "b": _param(rng, (3,))}
    pad = seed % 2

    def f():
        out, _ = blocks.partial_conv(p["x"], mask, p["w"], p["b"], 1, pad)
        return _probe(out, rng_fixed(seed))
    return f, p


def case_masked_embed(seed: int):
    rng = np.random.default_rng(seed)
    mask = (rng.random((2, 1, 7, 7)) < 0.7).astype(np.float64)
    params = ParamSet()
    params["pconv.0.w"] = _param(rng, (3, 3, 3, 3), 0.5)
    params["pconv.0.b"] = _param(rng, (3,), 0.2)
    params["pconv.1.w"] = _param(rng, (2, 3, 3, 3), 0.5)
    params["pconv.1.b"] = _param(rng, (2,), 0.2)
    img = _param(rng, (2, 3, 7, 7))
    return (lambda: _probe(blocks.masked_embed(img, mask, params), rng_fixed(seed)),
            {"image": img, **dict(params.items())})


def case_loc_loss(seed: int):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    center = rng.standard_normal(d)
    e = _param(rng, (2, d, 4, 4))
    mask = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)
    dist = L.pixel_distances(e.data, center)
    # margin away from every distance so no pixel sits on the hinge kink
    tau = float(np.median(dist)) + 0.013
    calib = L.LocalizationCalibration(center, tau, tau / 2.5)
    return lambda: L.localization_loss(e, mask, calib), {"e": e}


def case_hier_ce(seed: int):
    rng = np.random.default_rng(seed)
    tree = builtin("full" if seed % 2 else "mini")
    leaves = rng.integers(0, len(tree.leaves), size=3)
    tg = np.maximum(leaf_levels(tree, leaves), 0)
    p = {f"z{b}": _param(rng, (3, k), 1.5) for b, k in enumerate(tree.sizes, start=1)}
    hier = bool(seed % 4 != 3)

    def f():
        probs = L.hierarchical_probs(tree, [p[f"z{b}"] for b in range(1, NUM_LEVELS + 1)], hier)
        total = tc.sum_(L.level_cross_entropy(probs[0], tg[:, 0]))
        for b in range(1, NUM_LEVELS):
            total = tc.add(total, tc.sum_(L.level_cross_entropy(probs[b], tg[:, b])))
        return total
    return f, p


def case_matmul(seed: int):
    rng = np.random.default_rng(seed)
    p = {"a": _param(rng, (2, 3, 4)), "b": _param(rng, (2, 4, 2))}
    return lambda: _probe(tc.matmul(p["a"], p["b"]), rng_fixed(seed)), p


def case_resample(seed: int):
    rng = np.random.default_rng(seed)
    mode = "down_avg" if seed % 2 else "up_nearest"
    p = {"x": _param(rng, (2, 2, 4, 4))}
    return lambda: _probe(tc.resample(p["x"], 2, mode), rng_fixed(seed)), p


BLOCK_CASES: dict[str, Case] = {
    "conv2d": case_conv,
    "softmax": case_softmax,
    "log_filter": case_log_filter,
    "attention": case_attention,
    "partial_conv": case_partial_conv,
    "masked_embed": case_masked_embed,
    "localization_loss": case_loc_loss,
    "hierarchical_ce": case_hier_ce,
    "matmul": case_matmul,
    "resample": case_resample,
}


def model_case(seed: int = 3):
    """Tiny-preset network on a 4-image batch.

    Biases are randomised so no ReLU pre-activation sits exactly on its
    kink, and the predicted binary mask is frozen: thresholding is a
    stop-gradient, so finite differences must not be allowed to flip it.
    """
    from . import network as N

    tree = builtin("mini")
    model = N.init_model(N.preset("tiny"), tree, seed)
    brng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = brng.uniform(-0.2, 0.2, p.shape)
    rng = np.random.default_rng(seed)
    imgs = rng.random((4, 3, 8, 8))
    masks = np.zeros((4, 1, 8, 8))
    masks[2, :, 2:6, 1:5] = 1.0
    masks[3] = 1.0
    leaves = np.array([tree.real_index, tree.real_index, tree.leaf_index("splice"),
                       tree.leaf_index("synth_texture_a")])
    N.calibrate(model, imgs[:2])
    with tc.no_grad():
        fixed = N.forward(model, imgs).binary_mask.copy()
    fixed[2] = masks[2]

    def f():
        total, _, _ = N.batch_loss(model, imgs, masks, leaves, mask_override=fixed)
        return total
    return f, dict(model.params.items())


@dataclass
class SuiteResult:
    name: str
    seeds: int
    max_rel_error: float
    worst: str
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<18} seeds={self.seeds:<3d} max_rel={self.max_rel_error:.3e} "
                f"tol={self.tol:.0e} worst={self.worst} ({self.seconds:.2f}s)")


def run_case(name: str, case: Case, seeds: int, tol: float, first_seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for s in range(first_seed, first_seed + seeds):
        f, params = case(s)
        rep: GradcheckReport = gradcheck(f, params, tol=tol)
        if rep.max_rel_error >= worst:
            worst, where = rep.max_rel_error, f"seed {s}: {rep.worst}"
    return SuiteResult(name, seeds, worst, where, tol, time.perf_counter() - t0)


def run_suite(seeds: int = DEFAULT_SEEDS, tol: float = BLOCK_TOL, model_tol: float = MODEL_TOL,
              include_model: bool = True, only: list[str] | None = None) -> list[SuiteResult]:
    """Check every block over ``seeds`` random instances, then the tiny model."""
    results = []
    for name, case in BLOCK_CASES.items():
        if only is None or name in only:
            results.append(run_case(name, case, seeds, tol))
    if include_model and (only is None or "model" in only):
        t0 = time.perf_counter()
        f, params = model_case()
        rep = gradcheck(f, params, tol=model_tol)
        results.append(SuiteResult("model", 1, rep.max_rel_error, rep.worst, model_tol, time.perf_counter() - t0))
    return results


@contextlib.contextmanager
def sign_flipped(op_name: str) -> Iterator[None]:
    """Temporarily negate the gradient an engine op passes to its inputs.

    Test fixture for the harness itself: the suite must then fail and name
    the affected op.
    """
    orig = getattr(tc, op_name)

    @functools.wraps(orig)
    def flipped(*args, **kwargs):
        out = orig(*args, **kwargs)
        res = out[0] if isinstance(out, tuple) else out
        bw = res._backward
        if bw is not None:
            res._backward = lambda g: bw(-g)
        return out

    setattr(tc, op_name, flipped)
    try:
        yield
    finally:
        setattr(tc, op_name, orig)
