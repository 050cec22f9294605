"""BiLSTM inversion network with a depthwise 1-D smoothing convolution.

Architecture (per frame): dense(429 -> 400) + ReLU, two stacked
bidirectional LSTM layers (200 hidden per direction, concatenated to 400),
dense(400 -> 16), then a 50-tap depthwise convolution along time. The
smoothing taps are either the designed windowed-sinc kernel, frozen, or
random and trainable.

Everything is plain numpy in float64 with hand-written backpropagation
through time. Batches are right-padded; ``lengths`` gives the valid prefix
of every sequence and padded frames never influence valid outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ema import ChannelStats, design_windowed_sinc, reflect_index
from .errors import PersistenceError, ShapeError

FORMAT_VERSION = 1
MAGIC = b"ARTINV-MODEL\n"
GATES = ("f", "i", "c", "o")
SMOOTHER_MODES = ("fixed", "adaptive")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 429
    dense_units: int = 400
    lstm_hidden: int = 200
    output_dim: int = 16
    kernel_taps: int = 50
    cutoff_hz: float = 25.0
    frame_rate: float = 100.0
    per_channel_kernel: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class LstmCellParams:
    w_f: np.ndarray
    w_i: np.ndarray
    w_c: np.ndarray
    w_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden(self) -> int:
        return self.b_f.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Gate-stacked (4H x (H + in)) weight and (4H,) bias, order f, i, c, o."""
        return (np.vstack([self.w_f, self.w_i, self.w_c, self.w_o]),
                np.concatenate([self.b_f, self.b_i, self.b_c, self.b_o]))


@dataclass
class BiLstmLayer:
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams

    @property
    def hidden_per_direction(self) -> int:
        return self.forward_cell.hidden


@dataclass
class InversionModel:
    config: ModelConfig
    params: dict
    smoother_mode: str = "fixed"
    frozen: bool = True
    seed: int = 0
    acoustic_stats: Optional[ChannelStats] = None
    target_stats: Optional[ChannelStats] = None
    meta: dict = field(default_factory=dict)

    def dense(self, name: str) -> DenseLayer:
        return DenseLayer(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def cell(self, layer: str, direction: str) -> LstmCellParams:
        p = self.params
        pre = f"{layer}.{direction}"
        return LstmCellParams(*(p[f"{pre}.w_{g}"] for g in GATES), *(p[f"{pre}.b_{g}"] for g in GATES))

    def bilstm(self, layer: str) -> BiLstmLayer:
        return BiLstmLayer(self.cell(layer, "fwd"), self.cell(layer, "bwd"))

    @property
    def smoother_taps(self) -> np.ndarray:
        return self.params["smoother.taps"]

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if not (self.frozen and n.startswith("smoother."))]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "InversionModel":
        return InversionModel(self.config, {k: v.copy() for k, v in self.params.items()},
                              self.smoother_mode, self.frozen, self.seed,
                              self.acoustic_stats, self.target_stats, dict(self.meta))


def parameter_count(cfg: ModelConfig) -> int:
    H = cfg.lstm_hidden
    lstm = lambda n_in: 2 * 4 * (H * (H + n_in) + H)
    taps = cfg.kernel_taps * (cfg.output_dim if cfg.per_channel_kernel else 1)
    return (cfg.input_dim * cfg.dense_units + cfg.dense_units + lstm(cfg.dense_units) + lstm(2 * H)
            + 2 * H * cfg.output_dim + cfg.output_dim + taps)


def _sigmoid(x):
    # tanh form: overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sinc_taps(cfg: ModelConfig) -> np.ndarray:
    taps = design_windowed_sinc(cfg.cutoff_hz, cfg.frame_rate, cfg.kernel_taps).taps
    if cfg.per_channel_kernel:
        taps = np.repeat(taps[:, None], cfg.output_dim, axis=1)
    return taps


def init_model(seed: int = 0, smoother_mode: str = "fixed", config: ModelConfig = ModelConfig()) -> InversionModel:
    """Seeded uniform(+/- sqrt(1/fan_in)) initialisation.

    ``fixed`` loads and freezes the windowed-sinc taps; ``adaptive`` draws
    the taps at random and leaves them trainable.
    """
    if smoother_mode not in SMOOTHER_MODES:
        raise ValueError(f"smoother_mode must be one of {SMOOTHER_MODES}")
    rng = np.random.default_rng(seed)
    cfg = config
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params["input_dense.weight"] = uniform((cfg.dense_units, cfg.input_dim), cfg.input_dim)
    params["input_dense.bias"] = uniform((cfg.dense_units,), cfg.input_dim)
    H = cfg.lstm_hidden
    for layer, n_in in (("bilstm1", cfg.dense_units), ("bilstm2", 2 * H)):
        for direction in ("fwd", "bwd"):
            for g in GATES:
                params[f"{layer}.{direction}.w_{g}"] = uniform((H, H + n_in), H + n_in)
            for g in GATES:
                params[f"{layer}.{direction}.b_{g}"] = uniform((H,), H + n_in)
    params["output_dense.weight"] = uniform((cfg.output_dim, 2 * H), 2 * H)
    params["output_dense.bias"] = uniform((cfg.output_dim,), 2 * H)
    if smoother_mode == "fixed":
        params["smoother.taps"] = sinc_taps(cfg)
    else:
        shape = (cfg.kernel_taps, cfg.output_dim) if cfg.per_channel_kernel else (cfg.kernel_taps,)
        params["smoother.taps"] = uniform(shape, cfg.kernel_taps)
    return InversionModel(cfg, params, smoother_mode, smoother_mode == "fixed", seed)


# ---------------------------------------------------------------------------
# LSTM


def lstm_step(params: LstmCellParams, h_prev: np.ndarray, c_prev: np.ndarray, x: np.ndarray):
    """One cell update. Works on single vectors or (batch, dim) rows."""
    W, b = params.stacked()
    H = params.hidden
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H or W.shape[1] != H + x.shape[-1]:
        raise ShapeError(f"lstm_step: h {h_prev.shape}, c {c_prev.shape}, x {x.shape}, W {W.shape}")
    z = np.concatenate([h_prev, x], axis=-1) @ W.T + b
    f = _sigmoid(z[..., :H])
    i = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _scan(cell: LstmCellParams, X: np.ndarray):
    """Left-to-right scan from zero state over X (B, T, in).

    Buffers are time-major so every step touches contiguous memory.
    """
    W, b = cell.stacked()
    H = cell.hidden
    B, T, n_in = X.shape
    if W.shape[1] != H + n_in:
        raise ShapeError(f"LSTM expects input width {W.shape[1] - H}, got {n_in}")
    Wh, Wx = W[:, :H], W[:, H:]
    WhT = np.ascontiguousarray(Wh.T)
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2))
    pre = Xt @ Wx.T + b  # becomes the activations in place
    C = np.empty((T, B, H))
    tanhC = np.empty((T, B, H))
    Hs = np.empty((T + 1, B, H))
    Hs[0] = 0.0
    c = np.zeros((B, H))
    for t in range(T):
        a = pre[t]
        a += Hs[t] @ WhT
        a[:, :2 * H] = _sigmoid(a[:, :2 * H])
        np.tanh(a[:, 2 * H:3 * H], out=a[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        c = a[:, :H] * c + a[:, H:2 * H] * a[:, 2 * H:3 * H]
        C[t] = c
        np.tanh(c, out=tanhC[t])
        np.multiply(a[:, 3 * H:], tanhC[t], out=Hs[t + 1])
    out = Hs[1:].transpose(1, 0, 2)
    return out, (Xt, Wh, Wx, pre, C, tanhC, Hs)


def _scan_backward(cache, dHs: np.ndarray):
    """Backpropagation through time for :func:`_scan`; dHs is (B, T, H)."""
    Xt, Wh, Wx, acts, C, tanhC, Hs = cache
    T, B, H = C.shape
    dHt = np.ascontiguousarray(dHs.transpose(1, 0, 2))
    dpre = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        a = acts[t]
        f, i, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        dh = dHt[t] + dh_next
        tc = tanhC[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = C[t - 1] if t > 0 else zeros
        d = dpre[t]
        d[:, :H] = dc * c_prev * f * (1.0 - f)
        d[:, H:2 * H] = dc * g * i * (1.0 - i)
        d[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ Wh
    flat = dpre.reshape(-1, 4 * H)
    dWh = flat.T @ Hs[:-1].reshape(-1, H)
    dWx = flat.T @ Xt.reshape(-1, Xt.shape[2])
    db = flat.sum(axis=0)
    dX = (dpre @ Wx).transpose(1, 0, 2)
    return dX, np.hstack([dWh, dWx]), db


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row time reversal of the valid prefix; padding stays in place."""
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


def _bilstm(layer: BiLstmLayer, X: np.ndarray, lengths: np.ndarray):
    B, T, _ = X.shape
    rev = _reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    Hf, cf = _scan(layer.forward_cell, X)
    Hb_rev, cb = _scan(layer.backward_cell, X[rows, rev])
    return np.concatenate([Hf, Hb_rev[rows, rev]], axis=2), (cf, cb, rev)


def _bilstm_backward(cache, dOut: np.ndarray):
    cf, cb, rev = cache
    B = dOut.shape[0]
    H = dOut.shape[2] // 2
    rows = np.arange(B)[:, None]
    dXf, dWf, dbf = _scan_backward(cf, dOut[:, :, :H])
    dXb_rev, dWb, dbb = _scan_backward(cb, dOut[:, :, H:][rows, rev])
    return dXf + dXb_rev[rows, rev], (dWf, dbf), (dWb, dbb)


def bilstm_forward(layer: BiLstmLayer, seq: np.ndarray) -> np.ndarray:
    """T x d -> T x 2H: forward and backward hidden states side by side."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ShapeError(f"bilstm_forward expects a non-empty T x d matrix, got {seq.shape}")
    out, _ = _bilstm(layer, seq[None], np.array([seq.shape[0]]))
    return out[0]


# ---------------------------------------------------------------------------
# smoother


def smooth(raw: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Depthwise same-length correlation of a T x C matrix, reflect-padded."""
    gathered = raw[reflect_index(raw.shape[0], taps.shape[0])]  # (T, N, C)
    if taps.ndim == 1:
        return np.einsum("tnc,n->tc", gathered, taps)
    return np.einsum("tnc,nc->tc", gathered, taps)


def _smooth_backward(raw: np.ndarray, taps: np.ndarray, d_out: np.ndarray):
    idx = reflect_index(raw.shape[0], taps.shape[0])
    gathered = raw[idx]
    if taps.ndim == 1:
        d_taps = np.einsum("tnc,tc->n", gathered, d_out)
        contrib = d_out[:, None, :] * taps[None, :, None]
    else:
        d_taps = np.einsum("tnc,tc->nc", gathered, d_out)
        contrib = d_out[:, None, :] * taps[None, :, :]
    d_raw = np.zeros_like(raw)
    np.add.at(d_raw, idx, contrib)
    return d_raw, d_taps


# ---------------------------------------------------------------------------
# full network


def _check_batch(m: InversionModel, X: np.ndarray, lengths) -> np.ndarray:
    if X.ndim != 3 or X.shape[2] != m.config.input_dim:
        raise ShapeError(f"expected (B, T, {m.config.input_dim}) input, got {X.shape}")
    lengths = np.asarray(lengths if lengths is not None else [X.shape[1]] * X.shape[0], dtype=np.int64)
    if lengths.shape != (X.shape[0],) or np.any(lengths < 0) or np.any(lengths > X.shape[1]):
        raise ShapeError(f"lengths {lengths} inconsistent with batch {X.shape}")
    return lengths


def _forward(m: InversionModel, X: np.ndarray, lengths: np.ndarray):
    p = m.params
    Z1 = X @ p["input_dense.weight"].T + p["input_dense.bias"]
    A1 = np.maximum(Z1, 0.0)
    H1, c1 = _bilstm(m.bilstm("bilstm1"), A1, lengths)
    H2, c2 = _bilstm(m.bilstm("bilstm2"), H1, lengths)
    raw = H2 @ p["output_dense.weight"].T + p["output_dense.bias"]
    smoothed = np.zeros_like(raw)
    taps = p["smoother.taps"]
    for b, L in enumerate(lengths):
        if L > 0:
            smoothed[b, :L] = smooth(raw[b, :L], taps)
    return raw, smoothed, (X, Z1, A1, H1, c1, H2, c2, raw)


def forward_batch(m: InversionModel, X: np.ndarray, lengths=None):
    """(B, T, 429) -> raw and smoothed (B, T, 16); padded frames are left unsmoothed zeros."""
    X = np.asarray(X, dtype=np.float64)
    lengths = _check_batch(m, X, lengths)
    raw, smoothed, _ = _forward(m, X, lengths)
    return raw, smoothed


def model_forward(m: InversionModel, seq) -> tuple[np.ndarray, np.ndarray]:
    """T x 429 -> (raw T x 16, smoothed T x 16)."""
    frames = getattr(seq, "frames", seq)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ShapeError(f"expected T x {m.config.input_dim}, got {frames.shape}")
    raw, smoothed = forward_batch(m, frames[None], [frames.shape[0]])
    return raw[0], smoothed[0]


def mask_lengths(mask: np.ndarray) -> np.ndarray:
    """Valid-prefix lengths of a (B, T) boolean mask; rejects holes."""
    mask = np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=1)
    prefix = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(prefix, mask):
        raise ShapeError("mask must mark a contiguous valid prefix per sequence")
    return lengths


def loss_and_gradients(m: InversionModel, X: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Masked MSE of the smoothed output and its gradient for every trainable parameter.

    Returns ``(loss, grads)``. A fully masked batch gives loss 0 and zero
    gradients. Frozen smoother taps get no entry.
    """
    X = np.asarray(X, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if X.ndim == 2:
        X, target, mask = X[None], target[None], mask[None]
    lengths = _check_batch(m, X, mask_lengths(mask))
    if target.shape != X.shape[:2] + (m.config.output_dim,):
        raise ShapeError(f"target shape {target.shape} does not match batch {X.shape}")
    names = m.trainable_names()
    n_valid = int(lengths.sum())
    if n_valid == 0:
        return 0.0, {n: np.zeros_like(m.params[n]) for n in names}

    p = m.params
    raw, smoothed, (X, Z1, A1, H1, c1, H2, c2, _) = _forward(m, X, lengths)
    scale = 1.0 / (n_valid * m.config.output_dim)
    err = np.where(mask[:, :, None], smoothed - target, 0.0)
    loss = float(np.sum(err * err) * scale)
    d_smooth = 2.0 * scale * err

    taps = p["smoother.taps"]
    d_raw = np.zeros_like(raw)
    d_taps = np.zeros_like(taps)
    for b, L in enumerate(lengths):
        if L > 0:
            dr, dt = _smooth_backward(raw[b, :L], taps, d_smooth[b, :L])
            d_raw[b, :L] = dr
            d_taps += dt

    grads = {}
    grads["output_dense.weight"] = d_raw.reshape(-1, d_raw.shape[2]).T @ H2.reshape(-1, H2.shape[2])
    grads["output_dense.bias"] = d_raw.sum(axis=(0, 1))
    dH2 = d_raw @ p["output_dense.weight"]
    dH1 = _collect_bilstm_grads(grads, "bilstm2", c2, dH2)
    dA1 = _collect_bilstm_grads(grads, "bilstm1", c1, dH1)
    dZ1 = dA1 * (Z1 > 0)
    grads["input_dense.weight"] = dZ1.reshape(-1, dZ1.shape[2]).T @ X.reshape(-1, X.shape[2])
    grads["input_dense.bias"] = dZ1.sum(axis=(0, 1))
    if not m.frozen:
        grads["smoother.taps"] = d_taps
    return loss, {n: grads[n] for n in names}


def _collect_bilstm_grads(grads: dict, layer: str, cache, d_out):
    dX, (dWf, dbf), (dWb, dbb) = _bilstm_backward(cache, d_out)
    for direction, dW, db in (("fwd", dWf, dbf), ("bwd", dWb, dbb)):
        H = db.shape[0] // 4
        for k, g in enumerate(GATES):
            grads[f"{layer}.{direction}.w_{g}"] = dW[k * H:(k + 1) * H]
            grads[f"{layer}.{direction}.b_{g}"] = db[k * H:(k + 1) * H]
    return dX


def compute_gradients(m: InversionModel, seq: np.ndarray, target: np.ndarray, mask: np.ndarray) -> dict:
    """Gradient set of the masked smoothed-output MSE (see :func:`loss_and_gradients`)."""
    return loss_and_gradients(m, seq, target, mask)[1]


def masked_loss(m: InversionModel, X: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Loss only (used by finite-difference checks and validation)."""
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if X.ndim == 2:
        X, target, mask = X[None], np.asarray(target)[None], mask[None]
    lengths = mask_lengths(mask)
    n_valid = int(lengths.sum())
    if n_valid == 0:
        return 0.0
    _, smoothed = forward_batch(m, X, lengths)
    err = np.where(mask[:, :, None], smoothed - target, 0.0)
    return float(np.sum(err * err) / (n_valid * m.config.output_dim))


# ---------------------------------------------------------------------------
# persistence


def _stats_dict(s: Optional[ChannelStats]):
    return None if s is None else s.to_dict()


def _stats_from(d) -> Optional[ChannelStats]:
    return None if d is None else ChannelStats.from_dict(d)


def model_to_bytes(m: InversionModel) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in m.params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(m.config),
        "smoother_mode": m.smoother_mode,
        "frozen": m.frozen,
        "seed": m.seed,
        "acoustic_stats": _stats_dict(m.acoustic_stats),
        "target_stats": _stats_dict(m.target_stats),
        "meta": m.meta,
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    # repr-exact floats in the header keep the round trip bit-identical
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def model_from_bytes(blob: bytes) -> InversionModel:
    if not blob.startswith(MAGIC):
        raise PersistenceError("not a model file (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise PersistenceError("truncated model header")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except ValueError as exc:
        raise PersistenceError(f"corrupt model header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise PersistenceError(f"model format version {version} unsupported (expected {FORMAT_VERSION})")
    payload = blob[end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise PersistenceError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise PersistenceError("payload checksum mismatch")
    params = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except TypeError as exc:
        raise PersistenceError(f"bad architecture block: {exc}") from None
    return InversionModel(cfg, params, header["smoother_mode"], header["frozen"], header["seed"],
                          _stats_from(header.get("acoustic_stats")), _stats_from(header.get("target_stats")),
                          header.get("meta", {}))


def save_model(m: InversionModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def load_model(path: str | Path) -> InversionModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read model file {path}: {exc}") from None
    return model_from_bytes(blob)
