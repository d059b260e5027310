"""Visible/event fusion: early (input), middle (feature) and late (score).

Feature-level ops take maps shaped ``(C, HW)`` or batched ``(N, C, HW)``;
use :func:`flatten_spatial` for ``(..., C, H, W)`` maps.

The cross-modality transformer (``cmt``) builds a base vector from the
channel-summed maps of both modalities, uses it as the query of one
MLP-scored spatial attention per modality, refines each result with a
non-local self-attention block and concatenates the two.
"""
from __future__ import annotations

import numpy as np

from .nn import functional as F

FUSION_STRATEGIES = ("early.add", "early.concat", "mid.concat", "mid.add", "mid.conv1x1",
                     "mid.catt", "mid.satt", "cmt", "late.average")
MIDDLE_STRATEGIES = ("concat", "add", "conv1x1", "catt", "satt")


def flatten_spatial(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValueError(f"expected (C, HW) or (N, C, HW) features, got shape {a.shape}")


def _lin(w, x):
    """Apply ``w`` (out, C) along the channel axis of ``x`` (..., C, HW)."""
    return np.einsum("oc,...cs->...os", w, x, optimize=True)


def _lin_grad(dy, x):
    """Weight gradient for :func:`_lin`, summed over leading axes."""
    return np.einsum("...os,...cs->oc", dy, x, optimize=True)


# ---------------------------------------------------------------- early / late

def early_fuse(frame_tensor, event_tensor, mode: str = "add") -> np.ndarray:
    """Input-level fusion of (..., C, H, W) tensors."""
    a, b = np.asarray(frame_tensor), np.asarray(event_tensor)
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ValueError(f"spatial shape mismatch: {a.shape} vs {b.shape}")
    if mode == "add":
        if a.shape != b.shape:
            raise ValueError(f"add fusion needs equal channels: {a.shape} vs {b.shape}")
        return np.clip(a + b, 0.0, 1.0)
    if mode == "concat":
        return np.concatenate([a, b], axis=-3)
    raise ValueError(f"unknown early fusion mode {mode!r}")


def late_fuse(score_v, score_e, mode: str = "average") -> np.ndarray:
    """Combine per-class scores of two identically structured heads."""
    a, b = np.asarray(score_v, dtype=float), np.asarray(score_e, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"score arity mismatch: {a.shape} vs {b.shape}")
    if mode != "average":
        raise ValueError(f"unknown late fusion mode {mode!r}")
    return (a + b) / 2


# ---------------------------------------------------------------- CMT pieces

def base_vector(f_v, f_e) -> np.ndarray:
    """Element-wise product of the channel-summed maps, length HW."""
    f_v, f_e = np.asarray(f_v), np.asarray(f_e)
    _check_pair(f_v, f_e)
    return f_v.sum(axis=-2) * f_e.sum(axis=-2)


def cross_attend_forward(m, f_ctx, mlp: dict):
    m, f_ctx = np.asarray(m), np.asarray(f_ctx)
    hw = f_ctx.shape[-1]
    if m.shape != f_ctx.shape[:-2] + (hw,):
        raise ValueError(f"query length {m.shape} does not match context {f_ctx.shape}")
    z = F.fc(m, mlp["w1"], mlp["b1"])
    h = F.relu(z)
    s = F.fc(h, mlp["w2"], mlp["b2"])
    if s.shape != m.shape:
        raise ValueError(f"cross-attention MLP maps to {s.shape[-1]} scores, need {hw}")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    # hw * softmax(s); dividing by the mean keeps the uniform case exactly 1
    w = e / (e.sum(axis=-1, keepdims=True) / hw)
    out = f_ctx * w[..., None, :]
    return out, (m, f_ctx, mlp, z, h, w)


def cross_attend(m, f_ctx, mlp: dict) -> np.ndarray:
    """Spatially re-weight ``f_ctx`` by ``HW * softmax(mlp(m))``."""
    return cross_attend_forward(m, f_ctx, mlp)[0]


def attention_weights(m, mlp: dict) -> np.ndarray:
    """The softmax attention (summing to 1) used by :func:`cross_attend`."""
    s = F.fc(F.relu(F.fc(m, mlp["w1"], mlp["b1"])), mlp["w2"], mlp["b2"])
    return F.softmax(s)


def cross_attend_backward(dout, cache):
    """Returns ``(dm, df_ctx, grads)`` with grads keyed w1, b1, w2, b2."""
    m, f_ctx, mlp, z, h, w = cache
    hw = f_ctx.shape[-1]
    df_ctx = dout * w[..., None, :]
    dw = (dout * f_ctx).sum(axis=-2)
    alpha = w / hw
    ds = F.softmax_backward(dw * hw, alpha)
    dh, dw2, db2 = F.fc_backward(ds, h, mlp["w2"])
    dz = F.relu_backward(dh, z)
    dm, dw1, db1 = F.fc_backward(dz, m, mlp["w1"])
    return dm, df_ctx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def self_attend_forward(f, wh, wg, wo, wp, gamma):
    f = np.asarray(f)
    c = f.shape[-2]
    for name, w in (("W_h", wh), ("W_g", wg), ("W_o", wo)):
        if w.ndim != 2 or w.shape[1] != c:
            raise ValueError(f"{name} shape {w.shape} incompatible with {c} channels")
    if wp.ndim != 2 or wp.shape != (c, wo.shape[0]):
        raise ValueError(f"W_p shape {wp.shape} != {(c, wo.shape[0])}")
    q, k, v = _lin(wh, f), _lin(wg, f), _lin(wo, f)
    a = F.softmax(np.swapaxes(q, -1, -2) @ k, axis=-1)  # rows: query position
    y = v @ np.swapaxes(a, -1, -2)
    zp = _lin(wp, y)
    out = f + gamma * zp
    return out, (f, wh, wg, wo, wp, gamma, q, k, v, a, y, zp)


def self_attend(f, wh, wg, wo, wp, gamma) -> np.ndarray:
    """Non-local block with residual: ``F + gamma * W_p (W_o F) A^T``.

    ``A = softmax_j((W_h F)^T (W_g F))`` is the position-to-position
    attention matrix.
    """
    return self_attend_forward(f, wh, wg, wo, wp, gamma)[0]


def self_attention_matrix(f, wh, wg) -> np.ndarray:
    return F.softmax(np.swapaxes(_lin(wh, f), -1, -2) @ _lin(wg, f), axis=-1)


def self_attend_backward(dout, cache):
    """Returns ``(df, grads)`` with grads keyed wh, wg, wo, wp, gamma."""
    f, wh, wg, wo, wp, gamma, q, k, v, a, y, zp = cache
    dgamma = np.sum(dout * zp)
    dzp = gamma * dout
    dwp = _lin_grad(dzp, y)
    dy = _lin(wp.T, dzp)
    dv = dy @ a
    da = np.swapaxes(dy, -1, -2) @ v
    ds = F.softmax_backward(da, a)
    dq = k @ np.swapaxes(ds, -1, -2)
    dk = q @ ds
    df = dout + _lin(wh.T, dq) + _lin(wg.T, dk) + _lin(wo.T, dv)
    grads = {"wh": _lin_grad(dq, f), "wg": _lin_grad(dk, f), "wo": _lin_grad(dv, f),
             "wp": dwp, "gamma": np.asarray(dgamma, dtype=np.asarray(gamma).dtype).reshape(np.shape(gamma))}
    return df, grads


# ---------------------------------------------------------------- CMT weights

def attention_dim(channels: int) -> int:
    return max(1, channels // 8)


class CMTWeights:
    """Parameters of the cross-modality transformer, as a flat named dict.

    Keys: ``cross_ve.{w1,b1,w2,b2}`` (query -> event context),
    ``cross_ev.{...}`` (query -> visible context), ``self_v.{wh,wg,wo,wp}``,
    ``self_e.{...}``, ``gamma_v``, ``gamma_e``.
    """

    def __init__(self, params: dict):
        self.params = params
        self.channels = params["self_v.wp"].shape[0]
        self.hw = params["cross_ve.w1"].shape[1]
        self._validate()

    def _validate(self):
        c, hw, d = self.channels, self.hw, self.params["self_v.wh"].shape[0]
        expected = self.shapes(c, hw, d)
        for name, shape in expected.items():
            if name not in self.params:
                raise KeyError(f"missing CMT parameter {name!r}")
            if tuple(np.shape(self.params[name])) != shape:
                raise ValueError(f"{name}: shape {np.shape(self.params[name])} != {shape}")

    @staticmethod
    def shapes(channels: int, hw: int, d: int | None = None) -> dict:
        d = attention_dim(channels) if d is None else d
        shapes = {}
        for direction in ("cross_ve", "cross_ev"):
            shapes.update({f"{direction}.w1": (hw, hw), f"{direction}.b1": (hw,),
                           f"{direction}.w2": (hw, hw), f"{direction}.b2": (hw,)})
        for mod in ("v", "e"):
            shapes.update({f"self_{mod}.wh": (d, channels), f"self_{mod}.wg": (d, channels),
                           f"self_{mod}.wo": (d, channels), f"self_{mod}.wp": (channels, d)})
        shapes["gamma_v"] = ()
        shapes["gamma_e"] = ()
        return shapes

    @classmethod
    def zeros(cls, channels: int, hw: int, dtype=np.float64) -> "CMTWeights":
        return cls({k: np.zeros(s, dtype=dtype) for k, s in cls.shapes(channels, hw).items()})

    @classmethod
    def init(cls, channels: int, hw: int, rng=None, dtype=np.float64) -> "CMTWeights":
        """Random projections; the score layer of each cross MLP and both
        residual gains start at zero so the module starts as plain concat."""
        rng = np.random.default_rng(rng)
        params = {}
        for name, shape in cls.shapes(channels, hw).items():
            last = name.rsplit(".", 1)[-1]
            if last in ("b1", "b2", "w2") or name.startswith("gamma"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = shape[1]
                params[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
        return cls(params)

    def group(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def astype(self, dtype) -> "CMTWeights":
        return CMTWeights({k: np.asarray(v, dtype=dtype) for k, v in self.params.items()})


def _self_args(w: CMTWeights, mod: str):
    p = w.params
    return (p[f"self_{mod}.wh"], p[f"self_{mod}.wg"], p[f"self_{mod}.wo"],
            p[f"self_{mod}.wp"], p[f"gamma_{mod}"])


def cmt_fuse_forward(f_v, f_e, weights: CMTWeights):
    f_v, f_e = np.asarray(f_v), np.asarray(f_e)
    m = base_vector(f_v, f_e)
    te, c_e = cross_attend_forward(m, f_e, weights.group("cross_ve"))
    tv, c_v = cross_attend_forward(m, f_v, weights.group("cross_ev"))
    ae, s_e = self_attend_forward(te, *_self_args(weights, "e"))
    av, s_v = self_attend_forward(tv, *_self_args(weights, "v"))
    lead = f_v.shape[:-2]
    out = np.concatenate([av.reshape(lead + (-1,)), ae.reshape(lead + (-1,))], axis=-1)
    return out, (f_v, f_e, c_e, c_v, s_e, s_v)


def cmt_fuse(f_v, f_e, weights: CMTWeights) -> np.ndarray:
    """Fused feature ``flatten(attended visible) ++ flatten(attended event)``."""
    return cmt_fuse_forward(f_v, f_e, weights)[0]


def cmt_fuse_backward(dout, cache):
    """Returns ``(df_v, df_e, grads)`` with grads keyed like :class:`CMTWeights`."""
    f_v, f_e, c_e, c_v, s_e, s_v = cache
    n = f_v.shape[-2] * f_v.shape[-1]
    dav = dout[..., :n].reshape(f_v.shape)
    dae = dout[..., n:].reshape(f_e.shape)
    dtv, gv = self_attend_backward(dav, s_v)
    dte, ge = self_attend_backward(dae, s_e)
    dm_v, df_v, gcv = cross_attend_backward(dtv, c_v)
    dm_e, df_e, gce = cross_attend_backward(dte, c_e)
    dm = dm_v + dm_e
    sv, se = f_v.sum(axis=-2), f_e.sum(axis=-2)
    df_v = df_v + (dm * se)[..., None, :]
    df_e = df_e + (dm * sv)[..., None, :]
    grads = {}
    grads.update({f"cross_ev.{k}": v for k, v in gcv.items()})
    grads.update({f"cross_ve.{k}": v for k, v in gce.items()})
    for mod, g in (("v", gv), ("e", ge)):
        grads.update({f"self_{mod}.{k}": g[k] for k in ("wh", "wg", "wo", "wp")})
        grads[f"gamma_{mod}"] = g["gamma"]
    return df_v, df_e, grads


# ---------------------------------------------------------------- middle fusion

def middle_fusion_shapes(strategy: str, channels: int) -> dict:
    c2 = 2 * channels
    return {
        "concat": {}, "add": {},
        "conv1x1": {"w": (channels, c2), "b": (channels,)},
        "catt": {"w": (c2, c2), "b": (c2,)},
        "satt": {"w": (1, c2), "b": (1,)},
    }[strategy]


def init_middle_params(strategy: str, channels: int, dtype=np.float64) -> dict:
    """conv1x1 starts as the average of both modalities; gates start at 0.5."""
    if strategy not in MIDDLE_STRATEGIES:
        raise ValueError(f"unknown middle fusion strategy {strategy!r}")
    params = {k: np.zeros(s, dtype=dtype) for k, s in middle_fusion_shapes(strategy, channels).items()}
    if strategy == "conv1x1":
        eye = np.eye(channels, dtype=dtype) / 2
        params["w"] = np.concatenate([eye, eye], axis=1)
    return params


def middle_fuse_forward(f_v, f_e, strategy: str, params: dict | None = None):
    f_v, f_e = np.asarray(f_v), np.asarray(f_e)
    if strategy not in MIDDLE_STRATEGIES:
        raise ValueError(f"unknown middle fusion strategy {strategy!r}")
    _check_pair(f_v, f_e)
    if strategy == "add":
        return f_v + f_e, None
    stack = np.concatenate([f_v, f_e], axis=-2)
    if strategy == "concat":
        return stack, None
    if params is None:
        raise ValueError(f"strategy {strategy!r} needs parameters")
    if strategy == "conv1x1":
        return _lin(params["w"], stack) + params["b"][:, None], (stack,)
    if strategy == "catt":
        pooled = stack.mean(axis=-1)
        g = F.sigmoid(F.fc(pooled, params["w"], params["b"]))
        return stack * g[..., :, None], (stack, pooled, g)
    g = F.sigmoid(_lin(params["w"], stack) + params["b"][:, None])  # (..., 1, HW)
    return stack * g, (stack, g)


def middle_fuse(f_v, f_e, strategy: str, params: dict | None = None) -> np.ndarray:
    return middle_fuse_forward(f_v, f_e, strategy, params)[0]


def middle_fuse_backward(dout, f_v, strategy: str, params: dict | None, cache):
    """Returns ``(df_v, df_e, grads)``."""
    c = f_v.shape[-2]
    if strategy == "add":
        return dout, dout, {}
    if strategy == "concat":
        return dout[..., :c, :], dout[..., c:, :], {}
    if strategy == "conv1x1":
        (stack,) = cache
        dstack = _lin(params["w"].T, dout)
        grads = {"w": _lin_grad(dout, stack), "b": dout.sum(axis=tuple(i for i in range(dout.ndim) if i != dout.ndim - 2))}
    elif strategy == "catt":
        stack, pooled, g = cache
        dg = (dout * stack).sum(axis=-1)
        dpre = dg * g * (1 - g)
        dpooled, dw, db = F.fc_backward(dpre, pooled, params["w"])
        dstack = dout * g[..., :, None] + dpooled[..., :, None] / stack.shape[-1]
        grads = {"w": dw, "b": db}
    else:
        stack, g = cache
        dg = (dout * stack).sum(axis=-2, keepdims=True)
        dpre = dg * g * (1 - g)
        dstack = dout * g + _lin(params["w"].T, dpre)
        grads = {"w": _lin_grad(dpre, stack), "b": dpre.sum(axis=tuple(i for i in range(dpre.ndim) if i != dpre.ndim - 2))}
    return dstack[..., :c, :], dstack[..., c:, :], grads
