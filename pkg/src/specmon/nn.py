"""Minimal differentiable substrate for the agents.

Implements exactly the layer kinds the agents need -- dense, 1-D convolution
along the frequency axis, a ConvLSTM cell (convolutional in frequency,
recurrent in time), a dueling action-value head -- with hand-written
backward passes, an adaptive-moment optimizer, and finite-difference
gradient checking.  Forward/backward run in 32-bit floats by default;
gradient checks construct 64-bit networks.

Not a general autodiff graph: the shared network hard-wires the two
topologies used by the agents (conv stack and dense stack) and exposes
step/head forward-backward pairs for whole-episode unrolls.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"SPECMON1"


class NonFiniteGradient(RuntimeError):
    """A parameter gradient went non-finite; message names the parameter."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Functional primitives (forward + backward pairs)
# ---------------------------------------------------------------------------

def dense_apply(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                relu: bool = True) -> Tuple[np.ndarray, tuple]:
    """Affine map over the last axis, optional ReLU (omitted on output heads)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weights {w.shape}")
    pre = x @ w + b
    y = np.maximum(pre, 0.0) if relu else pre
    return y, (x, w, pre if relu else None)


def dense_backward(dy: np.ndarray, cache: tuple):
    x, w, pre = cache
    if pre is not None:
        dy = dy * (pre > 0)
    dw = np.tensordot(x, dy, axes=(tuple(range(x.ndim - 1)),) * 2)
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dx = dy @ w.T
    return dx, dw, db


def conv1d_apply(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """Same-length cross-correlation along the band axis.

    x: (B, bands, c_in); w: (k, c_in, c_out) with odd k; zero padding.
    Parameter count is independent of the number of bands.
    """
    k, c_in, c_out = w.shape
    if k % 2 != 1:
        raise ValueError(f"kernel width must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ValueError(f"conv shape mismatch: input {x.shape} vs kernel {w.shape}")
    batch, n, _ = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    cols = np.empty((batch, n, k, c_in), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, j:j + n, :]
    cols2 = cols.reshape(batch, n, k * c_in)
    y = cols2 @ w.reshape(k * c_in, c_out) + b
    return y, (cols2, x.shape, w)


def conv1d_backward(dy: np.ndarray, cache: tuple):
    cols2, x_shape, w = cache
    k, c_in, c_out = w.shape
    batch, n, _ = x_shape
    dw = np.tensordot(cols2, dy, axes=((0, 1), (0, 1))).reshape(k, c_in, c_out)
    db = dy.sum(axis=(0, 1))
    dcols = (dy @ w.reshape(k * c_in, c_out).T).reshape(batch, n, k, c_in)
    pad = k // 2
    dxp = np.zeros((batch, n + 2 * pad, c_in), dtype=dy.dtype)
    for j in range(k):
        dxp[:, j:j + n, :] += dcols[:, :, j, :]
    return dxp[:, pad:pad + n, :], dw, db


def _gate_update(pre: np.ndarray, c: np.ndarray, hidden: int):
    i = sigmoid(pre[..., :hidden])
    f = sigmoid(pre[..., hidden:2 * hidden])
    g = np.tanh(pre[..., 2 * hidden:3 * hidden])
    o = sigmoid(pre[..., 3 * hidden:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, (i, f, g, o, c, tanh_c)


def _gate_backward(dh: np.ndarray, dc: np.ndarray, gate_cache: tuple):
    i, f, g, o, c_prev, tanh_c = gate_cache
    do = dh * tanh_c
    dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
    df = dc_total * c_prev
    dc_prev = dc_total * f
    di = dc_total * g
    dg = dc_total * i
    dpre = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ], axis=-1)
    return dpre, dc_prev


def convlstm_step(x: np.ndarray, state: Tuple[np.ndarray, np.ndarray],
                  w: np.ndarray, b: np.ndarray):
    """One recurrent step: gates are 1-D convolutions over (input, hidden).

    x: (B, bands, c_in); hidden/cell: (B, bands, H); w: (k, c_in + H, 4H).
    """
    h, c = state
    hidden = h.shape[-1]
    z = np.concatenate([x, h], axis=-1)
    pre, conv_cache = conv1d_apply(z, w, b)
    h_new, c_new, gate_cache = _gate_update(pre, c, hidden)
    return (h_new, c_new), (conv_cache, gate_cache, x.shape[-1])


def convlstm_backward(dh: np.ndarray, dc: np.ndarray, cache: tuple):
    conv_cache, gate_cache, c_in = cache
    dpre, dc_prev = _gate_backward(dh, dc, gate_cache)
    dz, dw, db = conv1d_backward(dpre, conv_cache)
    dx, dh_prev = dz[..., :c_in], dz[..., c_in:]
    return dx, (dh_prev, dc_prev), dw, db


def lstm_step(x: np.ndarray, state: Tuple[np.ndarray, np.ndarray],
              w: np.ndarray, b: np.ndarray):
    """Dense LSTM step; x: (B, F), hidden/cell: (B, H), w: (F + H, 4H)."""
    h, c = state
    hidden = h.shape[-1]
    z = np.concatenate([x, h], axis=-1)
    pre = z @ w + b
    h_new, c_new, gate_cache = _gate_update(pre, c, hidden)
    return (h_new, c_new), (z, w, gate_cache, x.shape[-1])


def lstm_backward(dh: np.ndarray, dc: np.ndarray, cache: tuple):
    z, w, gate_cache, f_in = cache
    dpre, dc_prev = _gate_backward(dh, dc, gate_cache)
    dw = z.reshape(-1, z.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    db = dpre.sum(axis=tuple(range(dpre.ndim - 1)))
    dz = dpre @ w.T
    return dz[..., :f_in], (dz[..., f_in:], dc_prev), dw, db


def dueling_combine(value: np.ndarray, advantage: np.ndarray) -> np.ndarray:
    """Q(b) = V + A(b) - mean_b A(b); adding a constant to A leaves Q unchanged."""
    return value + advantage - advantage.mean(axis=-1, keepdims=True)


def dueling_backward(dq: np.ndarray):
    dvalue = dq.sum(axis=-1, keepdims=True)
    dadv = dq - dq.mean(axis=-1, keepdims=True)
    return dvalue, dadv


# ---------------------------------------------------------------------------
# Shared network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkConfig:
    """Topology description for the shared multi-head network.

    heads: subset of {"q", "m", "p"}; "m" (state prediction) is always
    required, "q" produces per-band action values, "p" predicts next-step
    state for the prediction-change bonus.
    """

    arch: str = "convlstm"          # "convlstm" or "dense"
    n_bands: int = 20
    in_channels: int = 2
    heads: tuple = ("q", "m")
    dueling: bool = True
    n_classes: int = 1
    feat_channels: int = 12
    hidden: int = 24
    feat_kernel: int = 5
    cell_kernel: int = 3
    dense_feat: int = 96

    def __post_init__(self):
        if self.arch not in ("convlstm", "dense"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if "m" not in self.heads:
            raise ValueError("the state-prediction head 'm' is always present")
        for k in (self.feat_kernel, self.cell_kernel):
            if k % 2 != 1:
                raise ValueError(f"kernel widths must be odd, got {k}")

    @property
    def m_channels(self) -> int:
        return 1 if self.n_classes == 1 else self.n_classes + 1


class SharedNet:
    """Shared trunk with Q/M(/P) heads; explicit step/head backward passes."""

    def __init__(self, config: NetworkConfig, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------

    def _add(self, name: str, shape, rng, fan_in: int, bias: bool = False):
        if bias:
            value = np.zeros(shape, dtype=self.dtype)
        else:
            limit = float(np.sqrt(1.0 / fan_in))
            value = rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def _init_params(self, rng):
        cfg = self.config
        hid = cfg.hidden
        if cfg.arch == "convlstm":
            fk, ck = cfg.feat_kernel, cfg.cell_kernel
            cf = cfg.feat_channels
            self._add("feat.w", (fk, cfg.in_channels, cf), rng, fk * cfg.in_channels)
            self._add("feat.b", (cf,), rng, 1, bias=True)
            self._add("cell.w", (ck, cf + hid, 4 * hid), rng, ck * (cf + hid))
            self._add("cell.b", (4 * hid,), rng, 1, bias=True)
            self._add("m.w", (1, hid, cfg.m_channels), rng, hid)
            self._add("m.b", (cfg.m_channels,), rng, 1, bias=True)
            if "p" in cfg.heads:
                self._add("p.w", (1, hid, cfg.m_channels), rng, hid)
                self._add("p.b", (cfg.m_channels,), rng, 1, bias=True)
            if "q" in cfg.heads:
                if cfg.dueling:
                    self._add("q_adv.w", (1, hid, 1), rng, hid)
                    self._add("q_adv.b", (1,), rng, 1, bias=True)
                    self._add("q_val.w", (hid, 1), rng, hid)
                    self._add("q_val.b", (1,), rng, 1, bias=True)
                else:
                    self._add("q.w", (1, hid, 1), rng, hid)
                    self._add("q.b", (1,), rng, 1, bias=True)
        else:
            df = cfg.dense_feat
            in_flat = cfg.n_bands * cfg.in_channels
            self._add("feat.w", (in_flat, df), rng, in_flat)
            self._add("feat.b", (df,), rng, 1, bias=True)
            self._add("cell.w", (df + hid, 4 * hid), rng, df + hid)
            self._add("cell.b", (4 * hid,), rng, 1, bias=True)
            self._add("m.w", (hid, cfg.n_bands * cfg.m_channels), rng, hid)
            self._add("m.b", (cfg.n_bands * cfg.m_channels,), rng, 1, bias=True)
            if "p" in cfg.heads:
                self._add("p.w", (hid, cfg.n_bands * cfg.m_channels), rng, hid)
                self._add("p.b", (cfg.n_bands * cfg.m_channels,), rng, 1, bias=True)
            if "q" in cfg.heads:
                if cfg.dueling:
                    self._add("q_adv.w", (hid, cfg.n_bands), rng, hid)
                    self._add("q_adv.b", (cfg.n_bands,), rng, 1, bias=True)
                    self._add("q_val.w", (hid, 1), rng, hid)
                    self._add("q_val.b", (1,), rng, 1, bias=True)
                else:
                    self._add("q.w", (hid, cfg.n_bands), rng, hid)
                    self._add("q.b", (cfg.n_bands,), rng, 1, bias=True)
        # Start with the cell inclined to remember.
        self.params["cell.b"][hid:2 * hid] = 1.0

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy(self) -> "SharedNet":
        clone = SharedNet(self.config, seed=0, dtype=self.dtype)
        for name, value in self.params.items():
            clone.params[name][...] = value
        return clone

    def load_params_from(self, other: "SharedNet") -> None:
        for name, value in other.params.items():
            self.params[name][...] = value

    # -- recurrent trunk ----------------------------------------------------

    def init_state(self, batch: int) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        if cfg.arch == "convlstm":
            shape = (batch, cfg.n_bands, cfg.hidden)
        else:
            shape = (batch, cfg.hidden)
        return (np.zeros(shape, dtype=self.dtype), np.zeros(shape, dtype=self.dtype))

    def step(self, x: np.ndarray, state):
        """Consume one encoded step (B, bands, channels) -> new state."""
        x = np.asarray(x, dtype=self.dtype)
        if self.config.arch == "convlstm":
            feat, feat_cache = conv1d_apply(x, self.params["feat.w"], self.params["feat.b"])
            feat_pre = feat
            feat = np.maximum(feat, 0.0)
            new_state, cell_cache = convlstm_step(feat, state, self.params["cell.w"],
                                                  self.params["cell.b"])
        else:
            flat = x.reshape(x.shape[0], -1)
            feat, feat_cache = dense_apply(flat, self.params["feat.w"],
                                           self.params["feat.b"], relu=True)
            feat_pre = None
            new_state, cell_cache = lstm_step(feat, state, self.params["cell.w"],
                                              self.params["cell.b"])
        return new_state, (feat_cache, feat_pre, cell_cache, x.shape)

    def step_backward(self, dstate, cache):
        feat_cache, feat_pre, cell_cache, x_shape = cache
        dh, dc = dstate
        if self.config.arch == "convlstm":
            dfeat, dstate_prev, dw, db = convlstm_backward(dh, dc, cell_cache)
            self.grads["cell.w"] += dw
            self.grads["cell.b"] += db
            dfeat = dfeat * (feat_pre > 0)
            dx, dw, db = conv1d_backward(dfeat, feat_cache)
            self.grads["feat.w"] += dw
            self.grads["feat.b"] += db
        else:
            dfeat, dstate_prev, dw, db = lstm_backward(dh, dc, cell_cache)
            self.grads["cell.w"] += dw
            self.grads["cell.b"] += db
            dflat, dw, db = dense_backward(dfeat, feat_cache)
            self.grads["feat.w"] += dw
            self.grads["feat.b"] += db
            dx = dflat.reshape(x_shape)
        return dx, dstate_prev

    # -- heads --------------------------------------------------------------

    def _pred_head(self, name: str, h: np.ndarray):
        cfg = self.config
        if cfg.arch == "convlstm":
            logits, cache = conv1d_apply(h, self.params[f"{name}.w"],
                                         self.params[f"{name}.b"])
        else:
            flat, cache = dense_apply(h, self.params[f"{name}.w"],
                                      self.params[f"{name}.b"], relu=False)
            logits = flat.reshape(h.shape[0], cfg.n_bands, cfg.m_channels)
        if cfg.m_channels == 1:
            probs = sigmoid(logits[..., 0])
        else:
            probs = softmax(logits, axis=-1)
        return probs, (cache, logits.shape)

    def _pred_head_backward(self, name: str, dlogits: np.ndarray, cache):
        layer_cache, logits_shape = cache
        cfg = self.config
        if cfg.m_channels == 1 and dlogits.ndim == 2:
            dlogits = dlogits[..., None]
        if cfg.arch == "convlstm":
            dh, dw, db = conv1d_backward(dlogits, layer_cache)
        else:
            dflat, dw, db = dense_backward(dlogits.reshape(dlogits.shape[0], -1),
                                           layer_cache)
            dh = dflat
        self.grads[f"{name}.w"] += dw
        self.grads[f"{name}.b"] += db
        return dh

    def m_head(self, state):
        """State-prediction probabilities from the hidden state."""
        return self._pred_head("m", state[0])

    def m_head_backward(self, dlogits, cache):
        return self._pred_head_backward("m", dlogits, cache)

    def p_head(self, state):
        if "p" not in self.config.heads:
            raise ValueError("network has no next-state head")
        return self._pred_head("p", state[0])

    def p_head_backward(self, dlogits, cache):
        return self._pred_head_backward("p", dlogits, cache)

    def q_head(self, state):
        """Per-band action values (dueling value/advantage combination)."""
        if "q" not in self.config.heads:
            raise ValueError("network has no action-value head")
        cfg = self.config
        h = state[0]
        if not cfg.dueling:
            if cfg.arch == "convlstm":
                out, cache = conv1d_apply(h, self.params["q.w"], self.params["q.b"])
                return out[..., 0], ("plain", cache)
            out, cache = dense_apply(h, self.params["q.w"], self.params["q.b"],
                                     relu=False)
            return out, ("plain", cache)
        if cfg.arch == "convlstm":
            adv3, adv_cache = conv1d_apply(h, self.params["q_adv.w"],
                                           self.params["q_adv.b"])
            adv = adv3[..., 0]
            pooled = h.mean(axis=1)
            val, val_cache = dense_apply(pooled, self.params["q_val.w"],
                                         self.params["q_val.b"], relu=False)
        else:
            adv, adv_cache = dense_apply(h, self.params["q_adv.w"],
                                         self.params["q_adv.b"], relu=False)
            val, val_cache = dense_apply(h, self.params["q_val.w"],
                                         self.params["q_val.b"], relu=False)
        q = dueling_combine(val, adv)
        return q, ("dueling", adv_cache, val_cache, h.shape)

    def q_head_backward(self, dq, cache):
        cfg = self.config
        if cache[0] == "plain":
            if cfg.arch == "convlstm":
                dh, dw, db = conv1d_backward(dq[..., None], cache[1])
            else:
                dh, dw, db = dense_backward(dq, cache[1])
            self.grads["q.w"] += dw
            self.grads["q.b"] += db
            return dh
        _, adv_cache, val_cache, h_shape = cache
        dval, dadv = dueling_backward(dq)
        if cfg.arch == "convlstm":
            dh_adv, dw, db = conv1d_backward(dadv[..., None], adv_cache)
            self.grads["q_adv.w"] += dw
            self.grads["q_adv.b"] += db
            dpooled, dw, db = dense_backward(dval, val_cache)
            self.grads["q_val.w"] += dw
            self.grads["q_val.b"] += db
            dh = dh_adv + dpooled[:, None, :] / h_shape[1]
        else:
            dh_adv, dw, db = dense_backward(dadv, adv_cache)
            self.grads["q_adv.w"] += dw
            self.grads["q_adv.b"] += db
            dh_val, dw, db = dense_backward(dval, val_cache)
            self.grads["q_val.w"] += dw
            self.grads["q_val.b"] += db
            dh = dh_adv + dh_val
        return dh


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with bias correction; deterministic."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in sorted(params):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            params[name] -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                params[name].dtype)


def optimizer_step(params, grads, optimizer: Adam) -> None:
    optimizer.step(params, grads)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(net: SharedNet, loss_and_grad, eps: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_and_grad() must run the full forward/backward on the current
    parameters, accumulate into net.grads, and return the scalar loss.
    Intended for small float64 networks.
    """
    net.zero_grads()
    loss_and_grad()
    analytic = {k: v.copy() for k, v in net.grads.items()}

    def loss_only() -> float:
        net.zero_grads()
        return float(loss_and_grad())

    max_rel = 0.0
    for name in sorted(net.params):
        p = net.params[name]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            lp = loss_only()
            p[idx] = orig - eps
            lm = loss_only()
            p[idx] = orig
            numeric = (lp - lm) / (2.0 * eps)
            ana = float(analytic[name][idx])
            scale = max(abs(numeric), abs(ana))
            if scale < 1e-10:
                continue
            rel = abs(numeric - ana) / max(scale, 1e-8)
            max_rel = max(max_rel, rel)
    net.zero_grads()
    loss_and_grad()
    return max_rel


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: SharedNet, path) -> None:
    """Self-describing header (config + shapes) then flat little-endian f32."""
    names = sorted(net.params)
    header = {
        "config": asdict(net.config),
        "params": [[name, list(net.params[name].shape)] for name in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> SharedNet:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (blob_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset:offset + blob_len].decode("utf-8"))
    offset += blob_len
    cfg_dict = dict(header["config"])
    cfg_dict["heads"] = tuple(cfg_dict["heads"])
    config = NetworkConfig(**cfg_dict)
    net = SharedNet(config, seed=0)
    for name, shape in header["params"]:
        size = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
        offset += size * 4
        net.params[name][...] = arr.reshape(shape)
    return net
