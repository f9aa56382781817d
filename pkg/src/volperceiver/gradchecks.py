"""Finite-difference checks for every differentiable op and a miniature end-to-end model.

Each check maps its input through the op, contracts the result with a fixed
random weight (so every output coordinate matters) and compares the tape
gradient with float64 central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from . import tensor as T
from .objectives import dice_loss, joint_loss, one_hot, soft_ce_loss
from .tensor import Tensor, gradcheck

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel error {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (gap + np.abs(x))


def _distinct(rng, shape):
    """Values spaced 0.05 apart, so perturbations cannot reorder a max."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025).reshape(shape)


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, np.ndarray]]]:
    def binary(fn, other_make=lambda r, s: r.normal(size=s), shape=(3, 4), other_shape=(4,), side=0):
        def case(rng):
            x = rng.normal(size=shape)
            other = Tensor(other_make(rng, other_shape))
            w = Tensor(rng.normal(size=np.broadcast_shapes(shape, other_shape)))
            if side == 0:
                return (lambda t: T.sum_(T.mul(fn(t, other), w))), x
            return (lambda t: T.sum_(T.mul(fn(other, t), w))), x
        return case

    def weighted(fn, x_make):
        def case(rng):
            x = x_make(rng)
            with T.default_dtype(np.float64), T.no_grad():
                shape = fn(Tensor(x)).shape
            w = Tensor(rng.normal(size=shape))
            return (lambda t: T.sum_(T.mul(fn(t), w))), x
        return case

    def conv_case(fn, x_shape, w_shape, wrt, **kw):
        def case(rng):
            x = rng.normal(size=x_shape)
            wt = rng.normal(size=w_shape)
            b = Tensor(rng.normal(size=w_shape[1] if "transpose" in fn.__name__ else w_shape[0]))
            with T.no_grad():
                shape = fn(Tensor(x), Tensor(wt), b, **kw).shape
            g = Tensor(rng.normal(size=shape))
            if wrt == "x":
                return (lambda t: T.sum_(T.mul(fn(t, Tensor(wt), b, **kw), g))), x
            if wrt == "w":
                return (lambda t: T.sum_(T.mul(fn(Tensor(x), t, b, **kw), g))), wt
            return (lambda t: T.sum_(T.mul(fn(Tensor(x), Tensor(wt), t, **kw), g))), b.data
        return case

    def loss_case(loss_fn):
        def case(rng):
            logits = rng.normal(size=(6, 3))
            labels = rng.integers(0, 3, size=6)
            y = one_hot(labels, 3, dtype=np.float64)
            return (lambda t: loss_fn(T.softmax(t, axis=-1), y)), logits
        return case

    cases = {
        "add": binary(T.add),
        "sub": binary(T.sub, side=1),
        "mul": binary(T.mul),
        "div": binary(T.div, other_make=lambda r, s: _away_from_zero(r, s, 0.5)),
        "div_denominator": binary(T.div, other_make=lambda r, s: r.normal(size=s), shape=(4,),
                                  other_shape=(3, 4), side=1),
        "relu": weighted(T.relu, lambda r: _away_from_zero(r, (3, 4))),
        "gelu": weighted(T.gelu, lambda r: r.normal(size=(3, 4))),
        "exp": weighted(T.exp, lambda r: r.normal(size=(3, 4))),
        "log": weighted(T.log, lambda r: 0.2 + np.abs(r.normal(size=(3, 4)))),
        "clamp": weighted(lambda t: T.clamp(t, -0.5, 0.5),
                          lambda r: np.concatenate([r.uniform(-0.4, 0.4, 6), r.uniform(0.6, 2, 3),
                                                    r.uniform(-2, -0.6, 3)]).reshape(3, 4)),
        "sum": weighted(lambda t: T.sum_(t, axis=1, keepdims=True), lambda r: r.normal(size=(3, 4))),
        "mean": weighted(lambda t: T.mean(t, axis=0), lambda r: r.normal(size=(3, 4))),
        "matmul": weighted(lambda t: T.matmul(t, Tensor(np.linspace(-1, 1, 20).reshape(4, 5))),
                           lambda r: r.normal(size=(2, 3, 4))),
        "matmul_rhs": weighted(lambda t: T.matmul(Tensor(np.linspace(-1, 1, 24).reshape(2, 3, 4)), t),
                               lambda r: r.normal(size=(4, 5))),
        "linear": weighted(lambda t: T.linear(t, Tensor(np.linspace(-1, 1, 12).reshape(4, 3)),
                                              Tensor(np.array([0.1, -0.2, 0.3]))),
                           lambda r: r.normal(size=(2, 4))),
        "softmax": weighted(lambda t: T.softmax(t, axis=-1), lambda r: r.normal(size=(3, 5))),
        "layer_norm": weighted(lambda t: T.layer_norm(t), lambda r: r.normal(size=(3, 6))),
        "reshape": weighted(lambda t: T.reshape(t, (6, 2)), lambda r: r.normal(size=(3, 4))),
        "permute": weighted(lambda t: T.permute(t, (2, 0, 1)), lambda r: r.normal(size=(2, 3, 4))),
        "concat": weighted(lambda t: T.concat([t, T.mul(t, 2.0)], axis=1), lambda r: r.normal(size=(3, 2))),
        "slice": weighted(lambda t: t[1:, ::2], lambda r: r.normal(size=(3, 4))),
        "pad": weighted(lambda t: T.pad(t, ((1, 0), (0, 2))), lambda r: r.normal(size=(3, 4))),
        "conv2d": conv_case(kernels.conv2d, (2, 3, 5, 6), (4, 3, 3, 3), "x", padding=1),
        "conv2d_weight": conv_case(kernels.conv2d, (2, 3, 5, 6), (4, 3, 3, 3), "w", stride=2, padding=1),
        "conv3d": conv_case(kernels.conv3d, (1, 2, 3, 4, 5), (3, 2, 3, 3, 3), "x", padding=1),
        "conv3d_weight": conv_case(kernels.conv3d, (2, 2, 3, 4, 4), (3, 2, 3, 3, 3), "w", padding=1),
        "conv3d_bias": conv_case(kernels.conv3d, (1, 2, 3, 4, 4), (3, 2, 3, 3, 3), "b", padding=1),
        "conv2d_transpose": conv_case(kernels.conv2d_transpose, (2, 3, 3, 4), (3, 2, 2, 2), "x", stride=2),
        "conv3d_transpose": conv_case(kernels.conv3d_transpose, (2, 3, 3, 2, 3), (3, 2, 3, 2, 2), "x",
                                      stride=(1, 2, 2), padding=(1, 0, 0)),
        "conv3d_transpose_weight": conv_case(kernels.conv3d_transpose, (2, 3, 3, 2, 3), (3, 2, 3, 2, 2), "w",
                                             stride=(1, 2, 2), padding=(1, 0, 0)),
        "maxpool2d": weighted(lambda t: kernels.maxpool2d(t, (2, 2)), lambda r: _distinct(r, (2, 2, 4, 6))),
        "maxpool3d": weighted(lambda t: kernels.maxpool3d(t, (1, 2, 2)), lambda r: _distinct(r, (1, 2, 3, 4, 4))),
        "dice_loss": loss_case(dice_loss),
        "soft_ce_loss": loss_case(soft_ce_loss),
        "joint_loss": loss_case(joint_loss),
    }
    return cases


OP_CASES = _op_cases()
SCOPES = tuple(OP_CASES) + ("attention", "end-to-end")


def _attention_case(rng):
    from .perceiver import CrossAttention
    with T.default_dtype(np.float64):
        attn = CrossAttention(4, 3, 2, np.random.default_rng(1)).astype(np.float64)
        q = Tensor(rng.normal(size=(1, 2, 4)))
        w = Tensor(rng.normal(size=(1, 2, 4)))
    return (lambda t: T.sum_(T.mul(attn(q, t), w))), rng.normal(size=(1, 5, 3))


def miniature_model(seed: int = 0):
    """M = 16 pixels (4x4 tile), N = 4 latents, D = 8, K = 3, small UNet3D in front."""
    from .model import SegmentationModel
    from .preprocess import PreprocessorKind
    perceiver = dict(num_classes=3, num_latents=4, latent_dim=8, num_heads=2, num_blocks=1, mlp_ratio=2,
                     num_bands=2, max_freq=4.0, decoder_queries="position+features")
    with T.default_dtype(np.float64):
        model = SegmentationModel(PreprocessorKind("unet3d", base_filters=2, out_features=4), perceiver,
                                  tile_size=4, seed=seed, feature_width=4)
    return model.astype(np.float64)


def end_to_end_checks(seed: int = 0) -> list[CheckResult]:
    """Joint loss of the miniature model, differentiated w.r.t. the input tile and several parameters."""
    rng = np.random.default_rng(seed)
    model = miniature_model(seed)
    tile = rng.uniform(0.0, 1.0, size=(1, 5, 4, 4))
    labels = rng.integers(0, 3, size=(1, 16))

    def loss_of(x: Tensor) -> Tensor:
        from .objectives import joint_loss_from_logits
        return joint_loss_from_logits(model(x), labels)

    out = []
    start = time.perf_counter()
    err = gradcheck(loss_of, tile, eps=EPS)
    out.append(CheckResult("end-to-end/input", err, END_TO_END_TOLERANCE, time.perf_counter() - start))
    targets = {
        "latents": (model.perceiver, "latents"),
        "encoder_q": (model.perceiver.encoder.cross.attn.to_q, "weight"),
        "decoder_v": (model.perceiver.decoder.cross.attn.to_v, "weight"),
        "head": (model.perceiver.head, "weight"),
        "unet3d_enc1": (model.preprocessor.enc1.conv1, "weight"),
        "unet3d_up1": (model.preprocessor.up1, "weight"),
    }
    x = Tensor(tile)
    for name, (owner, attr) in targets.items():
        original = getattr(owner, attr)

        def f(t: Tensor, owner=owner, attr=attr) -> Tensor:
            setattr(owner, attr, t)
            return loss_of(x)

        start = time.perf_counter()
        try:
            err = gradcheck(f, original.data, eps=EPS)
        finally:
            setattr(owner, attr, original)
        out.append(CheckResult(f"end-to-end/{name}", err, END_TO_END_TOLERANCE, time.perf_counter() - start))
    return out


def run_scope(scope: str, seed: int = 0) -> list[CheckResult]:
    """Run one op check, ``attention``, ``end-to-end``, or ``all``."""
    if scope == "all":
        return [r for s in SCOPES for r in run_scope(s, seed)]
    if scope == "end-to-end":
        return end_to_end_checks(seed)
    if scope == "attention":
        builder = _attention_case
    elif scope in OP_CASES:
        builder = OP_CASES[scope]
    else:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from all, {', '.join(SCOPES)}")
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    with T.default_dtype(np.float64):
        f, x = builder(rng)
        err = gradcheck(f, x, eps=EPS)
    return [CheckResult(scope, err, OP_TOLERANCE, time.perf_counter() - start)]
