"""Minimal pre-norm Vision Transformer with a per-patch linear segmentation head.

Parameters live in a flat ``dict[str, ndarray]`` (:data:`ModelParams`). The
compute dtype follows the parameters: float32 for training, float64 for
gradient checks. Logit maps are arrays of shape ``(..., T, T, 2)`` where
class 0 is background and class 1 is muscularis.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .errors import IndivisibleTile, ShapeMismatch
from .types import PipelineConfig

ModelParams = dict  # name -> ndarray

LN_EPS = 1e-6
MLP_RATIO = 4
# plain floats: numpy float64 scalars would promote float32 activations
_GELU_K = float(np.sqrt(2.0 / np.pi))
_GELU_C = 0.044715


def param_shapes(config: PipelineConfig) -> "OrderedDict[str, tuple[int, ...]]":
    p, d = config.patch_size, config.embed_dim
    hidden = MLP_RATIO * d
    shapes = OrderedDict()
    shapes["patch_proj"] = (p * p * 3, d)
    shapes["patch_bias"] = (d,)
    shapes["pos_embed"] = (config.n_tokens, d)
    for l in range(config.depth):
        pre = f"layer{l}."
        shapes[pre + "ln1_scale"] = (d,)
        shapes[pre + "ln1_offset"] = (d,)
        for name in "qkvo":
            shapes[pre + f"{name}_weight"] = (d, d)
            shapes[pre + f"{name}_bias"] = (d,)
        shapes[pre + "ln2_scale"] = (d,)
        shapes[pre + "ln2_offset"] = (d,)
        shapes[pre + "mlp1_weight"] = (d, hidden)
        shapes[pre + "mlp1_bias"] = (hidden,)
        shapes[pre + "mlp2_weight"] = (hidden, d)
        shapes[pre + "mlp2_bias"] = (d,)
    shapes["final_ln_scale"] = (d,)
    shapes["final_ln_offset"] = (d,)
    shapes["head_weight"] = (d, p * p * 2)
    shapes["head_bias"] = (p * p * 2,)
    return shapes


def is_decayed(name: str) -> bool:
    """Weight decay applies to projection matrices only."""
    return not (name.endswith("_bias") or "ln" in name or name == "pos_embed")


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(config: PipelineConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Truncated-normal (std 0.02) matrices, zero biases/offsets, unit scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_scale"):
            arr = np.ones(shape)
        elif name.endswith("_bias") or name.endswith("_offset"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: ModelParams, config: PipelineConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


def zeros_like_params(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


def patchify(tiles, patch_size: int, dtype=np.float64) -> np.ndarray:
    """Split ``(..., T, T, 3)`` tiles into ``(..., n_tokens, p*p*3)`` rows in [0, 1].

    Patches are taken in row-major order; inside a patch values run
    pixel-major, then channel.
    """
    x = np.asarray(tiles)
    if x.ndim < 3 or x.shape[-1] != 3 or x.shape[-2] != x.shape[-3]:
        raise ShapeMismatch(f"tiles must be (..., T, T, 3), got {x.shape}")
    t = x.shape[-2]
    if t % patch_size:
        raise IndivisibleTile(f"tile size {t} is not divisible by patch size {patch_size}")
    g, p = t // patch_size, patch_size
    lead = x.shape[:-3]
    x = x.reshape(lead + (g, p, g, p, 3))
    nd = len(lead)
    x = x.transpose(tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4))
    return x.reshape(lead + (g * g, p * p * 3)).astype(dtype) / 255.0


def unpatchify_logits(head_out: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, N, p*p*2)`` head outputs -> ``(B, T, T, 2)`` pixel logits."""
    b, n, _ = head_out.shape
    g, p = int(round(np.sqrt(n))), patch_size
    x = head_out.reshape(b, g, g, p, p, 2).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * p, g * p, 2)


def patchify_grad(grad_logits: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse layout of :func:`unpatchify_logits`."""
    b, t, _, _ = grad_logits.shape
    g, p = t // patch_size, patch_size
    x = grad_logits.reshape(b, g, p, g, p, 2).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * 2)


def _layernorm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * scale + offset, (xhat, rstd)


def _layernorm_backward(dy, cache, scale):
    xhat, rstd = cache
    dxhat = dy * scale
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dscale = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    doffset = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dscale, doffset


def gelu(x):
    """Tanh-form GELU."""
    return _gelu(x)[0]


def _gelu(x):
    t = np.tanh(_GELU_K * (x + _GELU_C * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    # 0.5 (1 + t) + 0.5 x (1 - t^2) k (1 + 3 c x^2), with few temporaries
    inner = x * x
    inner *= 3.0 * _GELU_C * _GELU_K
    inner += _GELU_K
    inner *= x
    inner *= 0.5
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    inner *= sech2
    inner += 0.5
    sech2[:] = t
    sech2 *= 0.5
    inner += sech2
    return inner


def softmax(x, axis: int = -1):
    e = x - x.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _dense(x, w, b):
    # 2-D matmul: the broadcasting 3-D path is several times slower
    out = x.reshape(-1, w.shape[0]) @ w
    out += b
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def _dense_backward(dy, x, w):
    d_in, d_out = w.shape
    x2, dy2 = x.reshape(-1, d_in), dy.reshape(-1, d_out)
    dx = (dy2 @ w.T).reshape(dy.shape[:-1] + (d_in,))
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def _geometry(params: ModelParams) -> tuple[int, int, int]:
    """Patch size, width and depth implied by the parameter shapes."""
    pdim, d = params["patch_proj"].shape
    p = int(round(np.sqrt(pdim // 3)))
    depth = sum(1 for k in params if k.endswith(".ln1_scale"))
    return p, d, depth


def _forward(params: ModelParams, tiles, heads: int, keep_cache: bool):
    dtype = params["patch_proj"].dtype
    x_in = np.asarray(tiles)
    single = x_in.ndim == 3
    if single:
        x_in = x_in[None]
    p, d, depth = _geometry(params)
    tokens = patchify(x_in, p, dtype=dtype)
    b, n, _ = tokens.shape
    if params["pos_embed"].shape != (n, d):
        raise ShapeMismatch(f"pos_embed {params['pos_embed'].shape} does not fit {n} tokens")
    if d % heads:
        raise ShapeMismatch(f"embed_dim {d} is not divisible by {heads} heads")
    dh = d // heads
    scale = float(1.0 / np.sqrt(dh))

    x = _dense(tokens, params["patch_proj"], params["patch_bias"]) + params["pos_embed"]
    caches = []
    for l in range(depth):
        pre = f"layer{l}."
        h, ln1 = _layernorm(x, params[pre + "ln1_scale"], params[pre + "ln1_offset"])
        q = _dense(h, params[pre + "q_weight"], params[pre + "q_bias"])
        k = _dense(h, params[pre + "k_weight"], params[pre + "k_bias"])
        v = _dense(h, params[pre + "v_weight"], params[pre + "v_bias"])
        qh = q.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        attn = softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale)
        o = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + _dense(o, params[pre + "o_weight"], params[pre + "o_bias"])
        h2, ln2 = _layernorm(x, params[pre + "ln2_scale"], params[pre + "ln2_offset"])
        u = _dense(h2, params[pre + "mlp1_weight"], params[pre + "mlp1_bias"])
        a, tanh_u = _gelu(u)
        x = x + _dense(a, params[pre + "mlp2_weight"], params[pre + "mlp2_bias"])
        if keep_cache:
            caches.append((h, ln1, qh, kh, vh, attn, o, h2, ln2, u, a, tanh_u))
    xf, lnf = _layernorm(x, params["final_ln_scale"], params["final_ln_offset"])
    head = _dense(xf, params["head_weight"], params["head_bias"])
    logits = unpatchify_logits(head, p)
    cache = (tokens, caches, xf, lnf, heads, p, scale) if keep_cache else None
    return (logits[0] if single else logits), cache


def forward(params: ModelParams, tiles, heads: int) -> np.ndarray:
    """Pixel logits ``(..., T, T, 2)`` for one tile ``(T, T, 3)`` or a batch."""
    return _forward(params, tiles, heads, keep_cache=False)[0]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.where(labels, z[..., 1], z[..., 0])
    return float(np.mean(lse - picked))


def backward(params: ModelParams, tiles, labels, heads: int) -> tuple[float, ModelParams]:
    """Mean pixel cross-entropy and its gradient with respect to every parameter.

    ``tiles`` may be a single tile or a batch; the loss averages over every
    pixel of every tile.
    """
    tiles = np.asarray(tiles)
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != tiles.shape[:-1]:
        raise ShapeMismatch(f"label shape {labels.shape} does not match tiles {tiles.shape[:-1]}")
    if tiles.ndim == 3:
        tiles, labels = tiles[None], labels[None]
    logits, cache = _forward(params, tiles, heads, keep_cache=True)
    tokens, caches, xf, lnf, heads, p, scale = cache
    b, n, _ = tokens.shape
    d = params["patch_proj"].shape[1]
    dh = d // heads
    grads: ModelParams = {}

    prob = softmax(logits)
    loss = cross_entropy(logits, labels)
    dlogits = prob
    dlogits[..., 1] -= labels
    dlogits[..., 0] -= ~labels
    dlogits /= labels.size

    dhead = patchify_grad(dlogits, p)
    dxf, grads["head_weight"], grads["head_bias"] = _dense_backward(dhead, xf, params["head_weight"])
    dx, grads["final_ln_scale"], grads["final_ln_offset"] = _layernorm_backward(
        dxf, lnf, params["final_ln_scale"])

    for l in reversed(range(len(caches))):
        pre = f"layer{l}."
        h, ln1, qh, kh, vh, attn, o, h2, ln2, u, a, tanh_u = caches[l]
        da, grads[pre + "mlp2_weight"], grads[pre + "mlp2_bias"] = _dense_backward(
            dx, a, params[pre + "mlp2_weight"])
        du = da * _gelu_grad(u, tanh_u)
        dh2, grads[pre + "mlp1_weight"], grads[pre + "mlp1_bias"] = _dense_backward(
            du, h2, params[pre + "mlp1_weight"])
        dln2, grads[pre + "ln2_scale"], grads[pre + "ln2_offset"] = _layernorm_backward(
            dh2, ln2, params[pre + "ln2_scale"])
        dx = dx + dln2

        do, grads[pre + "o_weight"], grads[pre + "o_bias"] = _dense_backward(
            dx, o, params[pre + "o_weight"])
        doh = do.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
        dattn = doh @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ doh
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 1, 3, 2) @ qh
        dh_total = np.zeros_like(h)
        for name, g in (("q", dqh), ("k", dkh), ("v", dvh)):
            g = g.transpose(0, 2, 1, 3).reshape(b, n, d)
            dhi, grads[pre + f"{name}_weight"], grads[pre + f"{name}_bias"] = _dense_backward(
                g, h, params[pre + f"{name}_weight"])
            dh_total += dhi
        dln1, grads[pre + "ln1_scale"], grads[pre + "ln1_offset"] = _layernorm_backward(
            dh_total, ln1, params[pre + "ln1_scale"])
        dx = dx + dln1

    grads["pos_embed"] = dx.sum(axis=0)
    _, grads["patch_proj"], grads["patch_bias"] = _dense_backward(dx, tokens, params["patch_proj"])
    return loss, {k: grads[k] for k in params}


def muscularis_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the muscularis class per pixel."""
    return softmax(np.asarray(logits, dtype=np.float64))[..., 1]


def predict_mask(logits: np.ndarray, threshold: float) -> np.ndarray:
    """Pixel is muscularis iff its softmax probability is >= ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return muscularis_probability(logits) >= threshold
