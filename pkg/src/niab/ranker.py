"""Joint step-action scoring model.

Pipeline: project step and candidate embeddings to the model dimension,
add sinusoidal positional encodings to the projected steps, run L post-norm
transformer encoder layers over the steps (padded steps masked), cross-attend
with candidates as queries over the encoded steps, then score every
(step, candidate) pair with an MLP over the concatenated pair vector.
Masked positions of the returned logit matrix hold ``MASKED_LOGIT``.

Everything is plain numpy with an explicit cache so the trainer can run
exact reverse-mode gradients through every operation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    AllKeysMasked,
    BadCheckpoint,
    NonFiniteActivation,
    NonFiniteGradient,
    OddDim,
    ShapeMismatch,
)

MASKED_LOGIT = -1.0e9
CKPT_MAGIC = b"NIAB-CKPT1"
_LN_EPS = 1e-5
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class RankerConfig:
    d_model: int = 256
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 256
    max_steps: int = 12
    max_candidates: int = 22
    input_dim: int = 64

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2 != 0:
            raise OddDim("d_model must be even for the positional encoding")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LogitMatrix:
    values: np.ndarray  # (B, S, C), masked entries = MASKED_LOGIT
    step_mask: np.ndarray  # (B, S) bool
    cand_mask: np.ndarray  # (B, C) bool

    @property
    def mask(self) -> np.ndarray:
        return self.step_mask[:, :, None] & self.cand_mask[:, None, :]


def positional_encoding(S: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding, positions 0-based:
    PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same)."""
    if d_model % 2 != 0:
        raise OddDim(f"d_model must be even, got {d_model}")
    pos = np.arange(S, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i2 / d_model)
    pe = np.empty((S, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / _SQRT_2PI


def attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.

    ``key_mask`` marks real keys along the last key axis; masked keys get
    exactly zero weight. Raises AllKeysMasked when any query row has no
    unmasked key.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"attention shapes {Q.shape} {K.shape} {V.shape}")
    d_k = Q.shape[-1]
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(d_k)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any(axis=-1).all():
            raise AllKeysMasked("a query row has no unmasked key")
        bias = np.where(key_mask, 0.0, MASKED_LOGIT)
        scores = scores + np.expand_dims(bias, axis=-2)
    w = _softmax_last(scores)
    if key_mask is not None:
        w = w * np.expand_dims(key_mask, axis=-2)
    out = w @ V
    return (out, w) if return_weights else out


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# -- parameters ----------------------------------------------------------------

def _param_shapes(config: RankerConfig) -> dict[str, tuple[int, ...]]:
    d, hid = config.d_model, config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "proj_h.W": (config.input_dim, d),
        "proj_h.b": (d,),
        "proj_a.W": (config.input_dim, d),
        "proj_a.b": (d,),
    }
    for l in range(config.n_layers):
        p = f"enc{l}"
        for m in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{p}.attn.{m}"] = (d, d)
        for m in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{m}"] = (d,)
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ff.W1"] = (d, 4 * d)
        shapes[f"{p}.ff.b1"] = (4 * d,)
        shapes[f"{p}.ff.W2"] = (4 * d, d)
        shapes[f"{p}.ff.b2"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
    for m in ("Wq", "Wk", "Wv", "Wo"):
        shapes[f"cross.{m}"] = (d, d)
    for m in ("bq", "bk", "bv", "bo"):
        shapes[f"cross.{m}"] = (d,)
    shapes["mlp.W1"] = (2 * d, hid)
    shapes["mlp.b1"] = (hid,)
    shapes["mlp.W2"] = (hid, 1)
    shapes["mlp.b2"] = (1,)
    return shapes


def init_params(config: RankerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform fan-in init for weights, zeros for biases, ones for LN gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W"):
            limit = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, h, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dk)


def _mha_forward(params, prefix, q_in, kv_in, key_mask, n_heads):
    Q = q_in @ params[f"{prefix}.Wq"] + params[f"{prefix}.bq"]
    K = kv_in @ params[f"{prefix}.Wk"] + params[f"{prefix}.bk"]
    V = kv_in @ params[f"{prefix}.Wv"] + params[f"{prefix}.bv"]
    Qh, Kh, Vh = (_split_heads(t, n_heads) for t in (Q, K, V))
    ctx, w = attention(Qh, Kh, Vh, key_mask=key_mask[:, None, :], return_weights=True)
    ctx_m = _merge_heads(ctx)
    out = ctx_m @ params[f"{prefix}.Wo"] + params[f"{prefix}.bo"]
    cache = {"q_in": q_in, "kv_in": kv_in, "Qh": Qh, "Kh": Kh, "Vh": Vh, "w": w, "ctx_m": ctx_m}
    return out, cache


def _mha_backward(dout, cache, params, prefix, grads, key_mask):
    q_in, kv_in = cache["q_in"], cache["kv_in"]
    Qh, Kh, Vh, w, ctx_m = cache["Qh"], cache["Kh"], cache["Vh"], cache["w"], cache["ctx_m"]
    d_k = Qh.shape[-1]
    B, Tq, D = dout.shape

    grads[f"{prefix}.Wo"] += ctx_m.reshape(-1, D).T @ dout.reshape(-1, D)
    grads[f"{prefix}.bo"] += dout.sum(axis=(0, 1))
    dctx_m = dout @ params[f"{prefix}.Wo"].T
    dctx = _split_heads(dctx_m, w.shape[1])

    dw = dctx @ np.swapaxes(Vh, -1, -2)
    dVh = np.swapaxes(w, -1, -2) @ dctx
    ds = (dw - (dw * w).sum(axis=-1, keepdims=True)) * w
    dQh = ds @ Kh / np.sqrt(d_k)
    dKh = np.swapaxes(ds, -1, -2) @ Qh / np.sqrt(d_k)

    dQ, dK, dV = (_merge_heads(t) for t in (dQh, dKh, dVh))
    for name, src, dmat in (("Wq", q_in, dQ), ("Wk", kv_in, dK), ("Wv", kv_in, dV)):
        grads[f"{prefix}.{name}"] += src.reshape(-1, D).T @ dmat.reshape(-1, D)
        grads[f"{prefix}.b{name[1]}"] += dmat.sum(axis=(0, 1))
    dq_in = dQ @ params[f"{prefix}.Wq"].T
    dkv_in = dK @ params[f"{prefix}.Wk"].T + dV @ params[f"{prefix}.Wv"].T
    return dq_in, dkv_in


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, {"xhat": xhat, "inv": inv}


def _ln_backward(dy, cache, g):
    xhat, inv = cache["xhat"], cache["inv"]
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _validate_forward_shapes(config, H_emb, A_emb, step_mask, cand_mask):
    B, S, D = H_emb.shape
    Ba, C, Da = A_emb.shape
    if D != config.input_dim or Da != config.input_dim:
        raise ShapeMismatch(f"input_dim {config.input_dim} vs embeddings {D}/{Da}")
    if Ba != B:
        raise ShapeMismatch("batch size mismatch between H_emb and A_emb")
    if S > config.max_steps or C > config.max_candidates:
        raise ShapeMismatch(
            f"S={S} C={C} exceed config limits {config.max_steps}/{config.max_candidates}"
        )
    if step_mask.shape != (B, S) or cand_mask.shape != (B, C):
        raise ShapeMismatch("mask shapes do not match embeddings")
    if not step_mask.any(axis=1).all() or not cand_mask.any(axis=1).all():
        raise AllKeysMasked("every example needs at least one real step and candidate")


def forward(
    params: dict[str, np.ndarray],
    config: RankerConfig,
    H_emb: np.ndarray,
    A_emb: np.ndarray,
    step_mask: np.ndarray,
    cand_mask: np.ndarray,
    action_only: bool = False,
    want_cache: bool = False,
):
    """Compute the masked logit matrix.

    Returns LogitMatrix of shape (B, S, C); with ``action_only`` the step
    axis is collapsed by masked mean pooling and the result is (B, 1, C).
    """
    H_emb = np.asarray(H_emb, dtype=np.float64)
    A_emb = np.asarray(A_emb, dtype=np.float64)
    step_mask = np.asarray(step_mask, dtype=bool)
    cand_mask = np.asarray(cand_mask, dtype=bool)
    _validate_forward_shapes(config, H_emb, A_emb, step_mask, cand_mask)
    B, S, _ = H_emb.shape
    C = A_emb.shape[1]
    cache: dict = {
        "H_emb": H_emb, "A_emb": A_emb,
        "step_mask": step_mask, "cand_mask": cand_mask,
        "action_only": action_only, "layers": [],
    }

    # projections carry the standard sqrt(d_model) embedding scaling so the
    # positional encoding does not swamp the projected token content
    scale = np.sqrt(config.d_model)
    Ht = (H_emb @ params["proj_h.W"] + params["proj_h.b"]) * scale
    At = (A_emb @ params["proj_a.W"] + params["proj_a.b"]) * scale
    cache["At"] = At
    Ht = Ht + positional_encoding(S, config.d_model)[None, :, :]

    x = Ht
    for l in range(config.n_layers):
        p = f"enc{l}"
        attn_out, attn_cache = _mha_forward(params, f"{p}.attn", x, x, step_mask, config.n_heads)
        u1 = x + attn_out
        x1, ln1_cache = _ln_forward(u1, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        ff_pre = x1 @ params[f"{p}.ff.W1"] + params[f"{p}.ff.b1"]
        ff_act = gelu(ff_pre)
        ff_out = ff_act @ params[f"{p}.ff.W2"] + params[f"{p}.ff.b2"]
        u2 = x1 + ff_out
        x2, ln2_cache = _ln_forward(u2, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        cache["layers"].append(
            {"x_in": x, "attn": attn_cache, "ln1": ln1_cache, "x1": x1,
             "ff_pre": ff_pre, "ff_act": ff_act, "ln2": ln2_cache}
        )
        x = x2
    H = x
    cache["H"] = H

    A_att, cross_cache = _mha_forward(params, "cross", At, H, step_mask, config.n_heads)
    cache["cross"] = cross_cache
    cache["A_att"] = A_att

    d = config.d_model
    W1h, W1a = params["mlp.W1"][:d], params["mlp.W1"][d:]
    AW = A_att @ W1a  # (B, C, hid)
    if action_only:
        counts = step_mask.sum(axis=1, keepdims=True).astype(np.float64)
        Hbar = (H * step_mask[:, :, None]).sum(axis=1) / counts  # (B, Dm)
        pre = Hbar[:, None, :] @ W1h + AW + params["mlp.b1"]  # (B, C, hid) via (B,1,hid)
        pre = pre.reshape(B, 1, C, params["mlp.b1"].shape[0])
        cache["Hbar"] = Hbar
        out_step_mask = np.ones((B, 1), dtype=bool)
    else:
        HW = H @ W1h  # (B, S, hid)
        pre = HW[:, :, None, :] + AW[:, None, :, :] + params["mlp.b1"]  # (B,S,C,hid)
        out_step_mask = step_mask
    act = gelu(pre)
    logits = act @ params["mlp.W2"][:, 0] + params["mlp.b2"][0]  # (B, S|1, C)

    mask = out_step_mask[:, :, None] & cand_mask[:, None, :]
    values = np.where(mask, logits, MASKED_LOGIT)
    if not np.isfinite(values[mask]).all():
        raise NonFiniteActivation("non-finite logits")
    cache["pre"] = pre
    cache["act"] = act
    cache["mask"] = mask
    result = LogitMatrix(values=values, step_mask=out_step_mask, cand_mask=cand_mask)
    return (result, cache) if want_cache else result


def backward(
    params: dict[str, np.ndarray],
    config: RankerConfig,
    cache: dict,
    grad_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode parameter gradients for a cached forward pass."""
    grads = zeros_like_params(params)
    step_mask = cache["step_mask"]
    cand_mask = cache["cand_mask"]
    H, A_att, At = cache["H"], cache["A_att"], cache["At"]
    B = H.shape[0]
    d = config.d_model

    g = np.asarray(grad_logits, dtype=np.float64) * cache["mask"]
    act, pre = cache["act"], cache["pre"]

    grads["mlp.b2"][0] += g.sum()
    grads["mlp.W2"][:, 0] += np.einsum("bsch,bsc->h", act, g)
    dact = g[..., None] * params["mlp.W2"][:, 0]
    dpre = dact * gelu_grad(pre)
    grads["mlp.b1"] += dpre.sum(axis=(0, 1, 2))

    W1h, W1a = params["mlp.W1"][:d], params["mlp.W1"][d:]
    dAW = dpre.sum(axis=1)  # (B, C, hid)
    grads["mlp.W1"][d:] += np.einsum("bcd,bch->dh", A_att, dAW)
    dA_att = dAW @ W1a.T

    if cache["action_only"]:
        dHbar = dpre.sum(axis=(1, 2)) @ W1h.T  # (B, Dm)
        counts = step_mask.sum(axis=1, keepdims=True).astype(np.float64)
        dH_pairs = dHbar[:, None, :] * (step_mask[:, :, None] / counts[:, :, None])
        grads["mlp.W1"][:d] += np.einsum(
            "bd,bh->dh", cache["Hbar"], dpre.sum(axis=(1, 2))
        )
    else:
        dHW = dpre.sum(axis=2)  # (B, S, hid)
        grads["mlp.W1"][:d] += np.einsum("bsd,bsh->dh", H, dHW)
        dH_pairs = dHW @ W1h.T

    dAt, dH_cross = _mha_backward(dA_att, cache["cross"], params, "cross", grads, step_mask)
    dx = dH_pairs + dH_cross

    for l in reversed(range(config.n_layers)):
        p = f"enc{l}"
        lc = cache["layers"][l]
        dx, dg2, db2 = _ln_backward(dx, lc["ln2"], params[f"{p}.ln2.g"])
        grads[f"{p}.ln2.g"] += dg2
        grads[f"{p}.ln2.b"] += db2
        dff_out = dx
        grads[f"{p}.ff.W2"] += np.einsum("bsf,bsd->fd", lc["ff_act"], dff_out)
        grads[f"{p}.ff.b2"] += dff_out.sum(axis=(0, 1))
        dff_act = dff_out @ params[f"{p}.ff.W2"].T
        dff_pre = dff_act * gelu_grad(lc["ff_pre"])
        grads[f"{p}.ff.W1"] += np.einsum("bsd,bsf->df", lc["x1"], dff_pre)
        grads[f"{p}.ff.b1"] += dff_pre.sum(axis=(0, 1))
        dx1 = dx + dff_pre @ params[f"{p}.ff.W1"].T
        dx1, dg1, db1 = _ln_backward(dx1, lc["ln1"], params[f"{p}.ln1.g"])
        grads[f"{p}.ln1.g"] += dg1
        grads[f"{p}.ln1.b"] += db1
        dq, dkv = _mha_backward(dx1, lc["attn"], params, f"{p}.attn", grads, step_mask)
        dx = dx1 + dq + dkv

    dHt = dx  # positional encoding adds a constant: gradient passes through
    grads["proj_h.W"] += cache["H_emb"].reshape(-1, config.input_dim).T @ dHt.reshape(-1, d)
    grads["proj_h.b"] += dHt.sum(axis=(0, 1))
    grads["proj_a.W"] += cache["A_emb"].reshape(-1, config.input_dim).T @ dAt.reshape(-1, d)
    grads["proj_a.b"] += dAt.sum(axis=(0, 1))

    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteGradient(name)
    return grads


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], config: RankerConfig) -> None:
    blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.ndim))
            for dim in tensor.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(tensor.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], RankerConfig]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise BadCheckpoint("bad magic bytes")
    off = len(CKPT_MAGIC)
    try:
        (blob_len,) = struct.unpack_from("<I", data, off)
        off += 4
        config = RankerConfig(**json.loads(data[off : off + blob_len].decode("utf-8")))
        off += blob_len
        (n_tensors,) = struct.unpack_from("<I", data, off)
        off += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            tensor = np.frombuffer(data[off : off + 4 * size], dtype="<f4").astype(np.float64)
            off += 4 * size
            params[name] = tensor.reshape(shape)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, TypeError, ValueError) as exc:
        raise BadCheckpoint(str(exc)) from exc
    expected = _param_shapes(config)
    if set(params) != set(expected):
        raise BadCheckpoint("tensor names do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise BadCheckpoint(f"{name}: shape {params[name].shape} != {shape}")
    return params, config
