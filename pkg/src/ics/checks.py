"""Finite-difference gradient checks for every differentiable operation at toy scale."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .model import (
    ModelConfig,
    WindowAttentionParams,
    feature_fusion,
    head_forward,
    init_params,
    projection_transformer_block,
    tail_forward,
    transformer_block,
    upsample,
    downsample,
    window_attention,
)
from .projection import McpParams, mcp_forward
from .sampling import MeasurementMatrix, PaddedMeasurements, SamplingConfig, random_measurement_matrix
from .sparsity import adaptive_measure, allocation_for

OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _weighted(out: Tensor, seed: int) -> Tensor:
    """Scalarise with fixed random weights so every output coordinate matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * w).sum()


def _param_check(params: dict, name: str, fn: Callable[[dict], Tensor], seed: int = 0) -> float:
    """Check d fn / d params[name], holding the other parameters fixed."""
    base = params[name]

    def f(t: Tensor) -> Tensor:
        local = dict(params)
        local[name] = t
        return _weighted(fn(local), seed)

    return grad_check(f, base)


def _toy_measurements(H: int, B: int, sr_t: float, seed: int, n: int = 1):
    rng = np.random.default_rng(seed)
    sc = SamplingConfig(sr_t=sr_t, B=B, seed=seed)
    mm = random_measurement_matrix(B, seed=seed, mode="orthonormal")
    sets = [adaptive_measure(rng.random((H, H)), mm, sc, "sm")[0] for _ in range(n)]
    return PaddedMeasurements.from_sets(sets), mm


def op_checks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    r = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    out: dict[str, float] = {}

    b = r(5, 3)
    out["matmul"] = grad_check(lambda a: _weighted(ad.matmul(a, b), 1), r(4, 5))
    w, bias = r(3, 2, 3, 3), r(3)
    out["conv2d_3x3"] = grad_check(lambda x: _weighted(ad.conv2d(x, w, bias), 2), r(2, 8, 8))
    x = r(2, 8, 8)
    out["conv2d_3x3.weight"] = grad_check(lambda k: _weighted(ad.conv2d(x, k, bias), 2), w)
    g, be = r(8), r(8)
    out["layer_norm"] = grad_check(lambda t: _weighted(ad.layer_norm(t, g, be), 3), r(4, 8))
    xl = r(4, 8)
    out["layer_norm.gamma"] = grad_check(lambda t: _weighted(ad.layer_norm(xl, t, be), 3), g)
    out["softmax"] = grad_check(lambda t: _weighted(ad.softmax(t), 4), r(3, 7))
    out["gelu"] = grad_check(lambda t: _weighted(ad.gelu(t), 5), r(20))
    out["pixel_shuffle"] = grad_check(lambda t: _weighted(ad.pixel_shuffle(t, 2), 6), r(8, 3, 3))
    out["pixel_unshuffle"] = grad_check(lambda t: _weighted(ad.pixel_unshuffle(t, 2), 7), r(2, 4, 4))
    out["roll"] = grad_check(lambda t: _weighted(ad.roll(t, (1, -2), (0, 1)), 8), r(4, 5))
    idx = np.array([[0, 2], [2, 1]])
    out["take"] = grad_check(lambda t: _weighted(ad.take(t, idx, axis=1), 9), r(2, 3))
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out["composite"] = grad_check(
        lambda t: _weighted(ad.softmax(ad.layer_norm(ad.conv2d(t, w, bias).transpose(1, 2, 0), ones, zeros)), 10),
        r(2, 6, 6),
    )
    return out


def model_checks(seed: int = 0) -> dict[str, float]:
    """Gradient checks of the network components on an 8×8 / 32×32 toy scale."""
    out: dict[str, float] = {}
    rng = np.random.default_rng(seed)
    cfg = ModelConfig.toy(B=4, windows=(4, 2, 2, 2))
    params = init_params(cfg, seed)
    # non-trivial values for parameters that start at constants
    for name, p in params.items():
        if name.endswith(".b") or name.endswith(".alpha") or name.endswith(".g"):
            p.data = p.data + rng.normal(0.0, 0.1, p.shape)

    x8 = Tensor(rng.random((1, 1, 8, 8)))
    out["head"] = _param_check(params, "head.conv2.w", lambda p: head_forward(x8, p))
    out["head.input"] = grad_check(lambda t: _weighted(head_forward(t, params), 0), x8)

    f8 = Tensor(rng.normal(size=(1, 8, 8, 8)))
    out["tail"] = grad_check(lambda t: _weighted(tail_forward(t, x8, params), 1), f8)
    out["tail.weights"] = _param_check(params, "tail.res.conv1.w", lambda p: tail_forward(f8, x8, p))

    attn = WindowAttentionParams.from_params(params, "enc0.blk0.attn", 1, 4)
    out["window_attention"] = grad_check(lambda t: _weighted(window_attention(t, attn, False), 2), Tensor(rng.normal(size=(8, 8, 8))))
    out["window_attention.shifted"] = grad_check(lambda t: _weighted(window_attention(t, attn, True), 3), Tensor(rng.normal(size=(8, 8, 8))))
    out["window_attention.bias"] = _param_check(
        params,
        "enc0.blk1.attn.bias",
        lambda p: window_attention(f8, WindowAttentionParams.from_params(p, "enc0.blk1.attn", 1, 4), True),
    )

    tok = Tensor(rng.normal(size=(1, 8, 8, 8)))
    out["transformer_block"] = grad_check(lambda t: _weighted(transformer_block(t, params, "enc0.blk1", 1, 4, True), 4), tok)
    out["transformer_block.ffn"] = _param_check(params, "enc0.blk0.ffn1.w", lambda p: transformer_block(tok, p, "enc0.blk0", 1, 4, False))

    out["downsample"] = grad_check(lambda t: _weighted(downsample(t, params, "down0"), 5), f8)
    f16 = Tensor(rng.normal(size=(1, 16, 4, 4)))
    out["upsample"] = grad_check(lambda t: _weighted(upsample(t, params, "up0"), 6), f16)
    enc = Tensor(rng.normal(size=(1, 8, 8, 8)))
    out["feature_fusion"] = grad_check(lambda t: _weighted(feature_fusion(t, enc, params, "fuse0"), 7), f8)

    Y, _ = _toy_measurements(8, 4, 0.5, seed)
    params["phi"] = Tensor(random_measurement_matrix(4, seed=seed, mode="orthonormal").phi, True)
    mcp = lambda p: McpParams(2, 1, p)  # noqa: E731
    alpha = Tensor(rng.uniform(0.0, 1.0, 2))
    f_mcp = Tensor(rng.normal(size=(1, 8, 4, 4)))
    out["mcp"] = grad_check(lambda t: _weighted(mcp_forward(t, Y, params["phi"], mcp(alpha)), 8), f_mcp)
    out["mcp.alpha"] = grad_check(lambda t: _weighted(mcp_forward(f_mcp, Y, params["phi"], mcp(t)), 8), alpha)
    out["mcp.phi"] = grad_check(lambda t: _weighted(mcp_forward(f_mcp, Y, t, mcp(alpha)), 8), params["phi"])
    out["projection_transformer_block"] = grad_check(
        lambda t: _weighted(projection_transformer_block(t, Y, params, cfg, 0, "enc0"), 9), f8
    )
    return out


def end_to_end_check(seed: int = 0, n_coords: int = 100) -> float:
    """Total-loss gradient vs finite differences on 100 sampled parameter coordinates.

    Uses the toy network on one 64×64 image at sampling ratio 0.25; the
    allocation is fixed so that only smooth paths are perturbed.
    """
    from .data import synthetic_images
    from .train import batch_losses

    cfg = ModelConfig.toy()
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith(".alpha") or name.endswith(".b"):
            p.data = p.data + rng.normal(0.0, 0.05, p.shape)
    img = synthetic_images(1, 64, seed)
    mm = MeasurementMatrix(params["phi"].data, params["psi"].data)
    alloc = np.stack([allocation_for(img[0], mm, SamplingConfig(0.25, B=cfg.B), "sm").m])

    names = list(params)
    sizes = np.array([params[n].size for n in names])
    # spread the sample across tensors: pick a tensor uniformly, then a coordinate in it
    picks = [(names[k], int(rng.integers(sizes[k]))) for k in rng.integers(len(names), size=n_coords)]

    def loss() -> float:
        return batch_losses(img, params, cfg, 0.25, allocations=alloc)[0]

    total = loss()
    ad.zero_grad(params.values())
    ad.backward(total)
    grads = {n: params[n].grad.copy() for n in names}
    eps = 1e-5
    worst = 0.0
    for name, i in picks:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = loss().item()
        flat[i] = orig - eps
        fm = loss().item()
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        a = grads[name].reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def gradient_suite(seed: int = 0, end_to_end: bool = True) -> dict[str, tuple[float, float]]:
    """name -> (max relative error, tolerance) for the whole suite."""
    res = {k: (v, OP_TOL) for k, v in op_checks(seed).items()}
    res.update({k: (v, OP_TOL) for k, v in model_checks(seed).items()})
    if end_to_end:
        res["uformer_forward.total_loss"] = (end_to_end_check(seed), END_TO_END_TOL)
    return res
