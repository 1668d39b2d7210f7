"""Toy-scale bridged speech-translation model.

Two frozen feature encoders, a window-level query connector that turns
frames into a fixed number of tokens per window, and a frozen causal
decoder LM carrying LoRA adapters on selected projections. Every forward
returns a backward closure built from the paired ops in ``numerics``;
parameter grads are accumulated into the shared store, which silently
drops grads of frozen entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from .errors import CapacityError, ConfigError, DimensionError
from .textkit import BOS_ID, EOS_ID, Vocab


@dataclass
class EncoderConfig:
    feature_dim_in: int
    d_model: int
    n_layers: int = 1
    seed: int = 0
    hop: int = 2  # input frames per output frame

    def __post_init__(self):
        if min(self.feature_dim_in, self.d_model, self.n_layers, self.hop) < 1:
            raise ConfigError(f"encoder config fields must be positive: {self}")


@dataclass
class QFormerConfig:
    window_len_frames: int = 17
    queries_per_window: int = 1
    d_model: int = 16
    n_layers: int = 1
    n_heads: int = 1

    def __post_init__(self):
        if min(self.window_len_frames, self.queries_per_window, self.d_model,
               self.n_layers, self.n_heads) < 1:
            raise ConfigError(f"connector config fields must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


LORA_PROJECTIONS = ("wq", "wk", "wv", "wo")


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 32.0
    targets: tuple[str, ...] = ("wq", "wv")
    init_seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")
        bad = set(self.targets) - set(LORA_PROJECTIONS)
        if bad:
            raise ConfigError(f"unknown LoRA target(s) {sorted(bad)}; allowed {LORA_PROJECTIONS}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoRALayer:
    """Frozen base projection plus a scaled low-rank trainable bypass."""

    w: nm.Tensor  # (in, out), frozen
    a: nm.Tensor  # (rank, in), small random init
    b: nm.Tensor  # (out, rank), exactly zero at init
    scaling: float


@dataclass
class DecoderConfig:
    vocab_size: int
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 1
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.max_seq_len) < 1:
            raise ConfigError(f"decoder config fields must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    qformer: QFormerConfig
    decoder: DecoderConfig
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    audio_encoder: Optional[EncoderConfig] = None
    prompt: str = ""  # per-direction prompt text, tokenized through the vocab

    def fused_dim(self) -> int:
        d = self.encoder.d_model
        if self.audio_encoder is not None:
            d += self.audio_encoder.d_model
        return d

    def validate(self) -> None:
        if self.qformer.d_model != self.decoder.d_model:
            raise ConfigError(
                f"connector d_model {self.qformer.d_model} must equal decoder "
                f"d_model {self.decoder.d_model}"
            )


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh-form gelu: smooth everywhere, so finite-difference checks stay tight
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Classic fixed sin/cos position table, (n, d)."""
    pos = np.arange(n, dtype=nm.default_dtype())[:, None]
    div = np.exp(np.arange(0, d, 2, dtype=nm.default_dtype()) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d), dtype=nm.default_dtype())
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def init_speech_encoder(store: nm.ParameterStore, cfg: EncoderConfig,
                        prefix: str = "speech_encoder") -> None:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    store.add(f"{prefix}.in_proj.w", rng.normal(size=(cfg.feature_dim_in, d)) / math.sqrt(cfg.feature_dim_in))
    store.add(f"{prefix}.in_proj.b", np.zeros(d))
    for i in range(cfg.n_layers):
        p = f"{prefix}.layers.{i}"
        store.add(f"{p}.fc.w", rng.normal(size=(d, d)) / math.sqrt(d))
        store.add(f"{p}.fc.b", np.zeros(d))
        store.add(f"{p}.ln.gamma", np.ones(d))
        store.add(f"{p}.ln.beta", np.zeros(d))


def init_qformer(store: nm.ParameterStore, cfg: QFormerConfig, d_in: int, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    store.add("qformer.queries", rng.normal(size=(cfg.queries_per_window, d)))
    for i in range(cfg.n_layers):
        p = f"qformer.layers.{i}"
        store.add(f"{p}.attn.wq.w", rng.normal(size=(d, d)) / math.sqrt(d))
        store.add(f"{p}.attn.wk.w", rng.normal(size=(d_in, d)) / math.sqrt(d_in))
        store.add(f"{p}.attn.wv.w", rng.normal(size=(d_in, d)) / math.sqrt(d_in))
        store.add(f"{p}.attn.wo.w", rng.normal(size=(d, d)) / math.sqrt(d))
        store.add(f"{p}.ln1.gamma", np.ones(d))
        store.add(f"{p}.ln1.beta", np.zeros(d))
        store.add(f"{p}.ffn.w1", rng.normal(size=(d, 4 * d)) / math.sqrt(d))
        store.add(f"{p}.ffn.b1", np.zeros(4 * d))
        store.add(f"{p}.ffn.w2", rng.normal(size=(4 * d, d)) / math.sqrt(4 * d))
        store.add(f"{p}.ffn.b2", np.zeros(d))
        store.add(f"{p}.ln2.gamma", np.ones(d))
        store.add(f"{p}.ln2.beta", np.zeros(d))


def init_decoder(store: nm.ParameterStore, cfg: DecoderConfig, lora: LoRAConfig | None) -> None:
    # Base weights are drawn first with the decoder's own rng so the frozen
    # LM is identical whether or not adapters are attached.
    rng = np.random.default_rng(cfg.seed)
    d, v = cfg.d_model, cfg.vocab_size
    store.add("decoder.tok_emb", rng.normal(size=(v, d)))
    for i in range(cfg.n_layers):
        p = f"decoder.layers.{i}"
        for proj in LORA_PROJECTIONS:
            store.add(f"{p}.attn.{proj}.w", rng.normal(size=(d, d)) / math.sqrt(d))
        store.add(f"{p}.ln1.gamma", np.ones(d))
        store.add(f"{p}.ln1.beta", np.zeros(d))
        store.add(f"{p}.ffn.w1", rng.normal(size=(d, 4 * d)) / math.sqrt(d))
        store.add(f"{p}.ffn.b1", np.zeros(4 * d))
        store.add(f"{p}.ffn.w2", rng.normal(size=(4 * d, d)) / math.sqrt(4 * d))
        store.add(f"{p}.ffn.b2", np.zeros(d))
        store.add(f"{p}.ln2.gamma", np.ones(d))
        store.add(f"{p}.ln2.beta", np.zeros(d))
    store.add("decoder.ln_f.gamma", np.ones(d))
    store.add("decoder.ln_f.beta", np.zeros(d))
    store.add("decoder.out_proj.w", rng.normal(size=(d, v)) * (0.7 / math.sqrt(d)))
    if lora is not None and lora.targets:
        lrng = np.random.default_rng(lora.init_seed)
        for i in range(cfg.n_layers):
            for proj in LORA_PROJECTIONS:
                if proj in lora.targets:
                    base = f"decoder.layers.{i}.attn.{proj}"
                    store.add(f"{base}.lora.A",
                              lrng.normal(size=(lora.rank, d)) / math.sqrt(d))
                    store.add(f"{base}.lora.B", np.zeros((d, lora.rank)))


DEFAULT_TRAINABLE_PATTERNS = ("qformer.*", "*.lora.*")


def apply_default_freeze(store: nm.ParameterStore) -> None:
    """Connector and adapters trainable, everything else frozen."""
    for name in store.names():
        store.set_trainable(name, False)
    for pattern in DEFAULT_TRAINABLE_PATTERNS:
        store.set_trainable(pattern, True, require_match=False)


# ---------------------------------------------------------------------------
# forward / backward building blocks
# ---------------------------------------------------------------------------


def _multihead(q, k, v, n_heads: int, causal: bool = False) -> np.ndarray:
    dh = q.shape[1] // n_heads
    outs = [
        nm.attention(q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh],
                     v[:, h * dh:(h + 1) * dh], causal=causal)
        for h in range(n_heads)
    ]
    return np.concatenate(outs, axis=1)


def _multihead_backward(dout, q, k, v, n_heads: int, causal: bool = False):
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    dh = q.shape[1] // n_heads
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        dq[:, sl], dk[:, sl], dv[:, sl] = nm.attention_backward(
            dout[:, sl], q[:, sl], k[:, sl], v[:, sl], causal=causal)
    return dq, dk, dv


def lora_forward(x, layer: LoRALayer) -> np.ndarray:
    """y = x w + scaling * (x aT) bT; reduces to the exact base path at b = 0."""
    y = nm.linear(x, layer.w.data)
    u = nm.as_array(x) @ layer.a.data.T
    return y + layer.scaling * (u @ layer.b.data.T)


def lora_backward(dy, x, layer: LoRALayer):
    """Grads for lora_forward: (dx, da, db). The frozen base gets none."""
    dy, x = nm.as_array(dy), nm.as_array(x)
    dx = dy @ layer.w.data.T
    u = x @ layer.a.data.T
    db = layer.scaling * (dy.T @ u)
    du = layer.scaling * (dy @ layer.b.data)
    da = du.T @ x
    dx = dx + du @ layer.a.data
    return dx, da, db


def _proj_pair(store: nm.ParameterStore, base: str, x, lora_cfg: LoRAConfig | None):
    """Projection y = x @ w, with the low-rank bypass when this name carries one."""
    wt = store[f"{base}.w"]
    lora_name = f"{base}.lora.A"
    if lora_cfg is not None and lora_name in store:
        layer = LoRALayer(w=wt, a=store[lora_name], b=store[f"{base}.lora.B"],
                          scaling=lora_cfg.scaling)
        y = lora_forward(x, layer)

        def backward(dy):
            dx, da, db = lora_backward(dy, x, layer)
            store.accumulate(f"{base}.lora.A", da)
            store.accumulate(f"{base}.lora.B", db)
            return dx

    else:
        y = nm.linear(x, wt.data)

        def backward(dy):
            dx, dw, _ = nm.linear_backward(dy, x, wt.data)
            store.accumulate(f"{base}.w", dw)
            return dx

    return y, backward


def _pool_mean(x: np.ndarray, hop: int):
    """Mean-pool blocks of `hop` frames; the last block may be short."""
    t = x.shape[0]
    n_out = -(-t // hop)
    out = np.stack([x[i * hop: min((i + 1) * hop, t)].mean(axis=0) for i in range(n_out)])

    def backward(dy):
        dx = np.zeros_like(x)
        for i in range(n_out):
            lo, hi = i * hop, min((i + 1) * hop, t)
            dx[lo:hi] = dy[i] / (hi - lo)
        return dx

    return out, backward


def _encoder_apply(store: nm.ParameterStore, cfg: EncoderConfig, prefix: str, features):
    x = nm.as_array(features)
    if x.ndim != 2:
        raise DimensionError(f"{prefix}: features must be 2-D, got shape {x.shape}")
    if x.shape[0] < 1:
        raise DimensionError(f"{prefix}: empty feature sequence")
    if x.shape[1] != cfg.feature_dim_in:
        raise DimensionError(
            f"{prefix}: feature dim {x.shape[1]} != configured {cfg.feature_dim_in}"
        )
    pooled, pool_bwd = _pool_mean(x, cfg.hop)
    w_in, b_in = store[f"{prefix}.in_proj.w"], store[f"{prefix}.in_proj.b"]
    h = nm.linear(pooled, w_in.data, b_in.data)
    caches = []
    for i in range(cfg.n_layers):
        p = f"{prefix}.layers.{i}"
        a = nm.linear(h, store[f"{p}.fc.w"].data, store[f"{p}.fc.b"].data)
        t = np.tanh(a)
        u = h + t
        out = nm.layer_norm(u, store[f"{p}.ln.gamma"].data, store[f"{p}.ln.beta"].data)
        caches.append((h, t, u))
        h = out

    def backward(dh):
        for i in reversed(range(cfg.n_layers)):
            p = f"{prefix}.layers.{i}"
            h_in, t, u = caches[i]
            du, dg, dbeta = nm.layer_norm_backward(dh, u, store[f"{p}.ln.gamma"].data)
            store.accumulate(f"{p}.ln.gamma", dg)
            store.accumulate(f"{p}.ln.beta", dbeta)
            da = du * (1.0 - t * t)
            dh_lin, dw, db = nm.linear_backward(da, h_in, store[f"{p}.fc.w"].data)
            store.accumulate(f"{p}.fc.w", dw)
            store.accumulate(f"{p}.fc.b", db)
            dh = du + dh_lin
        dpooled, dw, db = nm.linear_backward(dh, pooled, w_in.data)
        store.accumulate(f"{prefix}.in_proj.w", dw)
        store.accumulate(f"{prefix}.in_proj.b", db)
        return pool_bwd(dpooled)

    return h, backward


def encode_speech(features, cfg: EncoderConfig, store: nm.ParameterStore | None = None,
                  prefix: str = "speech_encoder") -> np.ndarray:
    """Frozen feature extractor: (T, feature_dim_in) -> (ceil(T/hop), d_model).

    Without a store, weights are derived deterministically from cfg.seed.
    """
    if store is None:
        store = nm.ParameterStore()
        init_speech_encoder(store, cfg, prefix)
    out, _ = _encoder_apply(store, cfg, prefix, features)
    return out


def fuse_features(speech, audio_events=None) -> np.ndarray:
    """Frame-wise feature concatenation after truncating to the shorter stream."""
    speech = nm.as_array(speech)
    if speech.ndim != 2 or speech.shape[0] == 0:
        raise DimensionError(f"fuse_features: speech stream has shape {speech.shape}")
    if audio_events is None:
        return speech
    ev = nm.as_array(audio_events)
    if ev.ndim != 2 or ev.shape[0] == 0:
        raise DimensionError(f"fuse_features: audio-event stream has shape {ev.shape}")
    t = min(speech.shape[0], ev.shape[0])
    return np.concatenate([speech[:t], ev[:t]], axis=1)


def window_partition(frames, window_len: int) -> list[np.ndarray]:
    """Contiguous windows of at most window_len frames; the tail keeps the remainder."""
    frames = nm.as_array(frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise DimensionError(f"window_partition: frames have shape {frames.shape}")
    if window_len < 1:
        raise ConfigError(f"window_len must be >= 1, got {window_len}")
    return [frames[i: i + window_len] for i in range(0, frames.shape[0], window_len)]


def _qformer_apply(store: nm.ParameterStore, cfg: QFormerConfig, fused):
    fused = nm.as_array(fused)
    queries = store["qformer.queries"].data
    windows = window_partition(fused, cfg.window_len_frames)
    outs = []
    caches = []
    for frames in windows:
        x = queries
        layer_caches = []
        for i in range(cfg.n_layers):
            p = f"qformer.layers.{i}"
            q = nm.linear(x, store[f"{p}.attn.wq.w"].data)
            k = nm.linear(frames, store[f"{p}.attn.wk.w"].data)
            v = nm.linear(frames, store[f"{p}.attn.wv.w"].data)
            ao = _multihead(q, k, v, cfg.n_heads)
            proj = nm.linear(ao, store[f"{p}.attn.wo.w"].data)
            u1 = x + proj
            x1 = nm.layer_norm(u1, store[f"{p}.ln1.gamma"].data, store[f"{p}.ln1.beta"].data)
            a1 = nm.linear(x1, store[f"{p}.ffn.w1"].data, store[f"{p}.ffn.b1"].data)
            r = _gelu(a1)
            f = nm.linear(r, store[f"{p}.ffn.w2"].data, store[f"{p}.ffn.b2"].data)
            u2 = x1 + f
            x2 = nm.layer_norm(u2, store[f"{p}.ln2.gamma"].data, store[f"{p}.ln2.beta"].data)
            layer_caches.append((x, q, k, v, ao, u1, x1, a1, r, u2))
            x = x2
        outs.append(x)
        caches.append(layer_caches)
    out = np.concatenate(outs, axis=0)

    def backward(dout):
        dfused = np.zeros_like(fused)
        dqueries = np.zeros_like(queries)
        nq = cfg.queries_per_window
        for w_idx, frames in enumerate(windows):
            dx = dout[w_idx * nq:(w_idx + 1) * nq]
            for i in reversed(range(cfg.n_layers)):
                p = f"qformer.layers.{i}"
                x_in, q, k, v, ao, u1, x1, a1, r, u2 = caches[w_idx][i]
                du2, dg2, db2 = nm.layer_norm_backward(dx, u2, store[f"{p}.ln2.gamma"].data)
                store.accumulate(f"{p}.ln2.gamma", dg2)
                store.accumulate(f"{p}.ln2.beta", db2)
                dr, dw2, db2f = nm.linear_backward(du2, r, store[f"{p}.ffn.w2"].data)
                store.accumulate(f"{p}.ffn.w2", dw2)
                store.accumulate(f"{p}.ffn.b2", db2f)
                da1 = dr * _gelu_grad(a1)
                dx1, dw1, db1f = nm.linear_backward(da1, x1, store[f"{p}.ffn.w1"].data)
                store.accumulate(f"{p}.ffn.w1", dw1)
                store.accumulate(f"{p}.ffn.b1", db1f)
                dx1 = dx1 + du2
                du1, dg1, db1 = nm.layer_norm_backward(dx1, u1, store[f"{p}.ln1.gamma"].data)
                store.accumulate(f"{p}.ln1.gamma", dg1)
                store.accumulate(f"{p}.ln1.beta", db1)
                dao, dwo, _ = nm.linear_backward(du1, ao, store[f"{p}.attn.wo.w"].data)
                store.accumulate(f"{p}.attn.wo.w", dwo)
                dq, dk, dv = _multihead_backward(dao, q, k, v, cfg.n_heads)
                dxq, dwq, _ = nm.linear_backward(dq, x_in, store[f"{p}.attn.wq.w"].data)
                store.accumulate(f"{p}.attn.wq.w", dwq)
                dfk, dwk, _ = nm.linear_backward(dk, frames, store[f"{p}.attn.wk.w"].data)
                store.accumulate(f"{p}.attn.wk.w", dwk)
                dfv, dwv, _ = nm.linear_backward(dv, frames, store[f"{p}.attn.wv.w"].data)
                store.accumulate(f"{p}.attn.wv.w", dwv)
                lo = w_idx * cfg.window_len_frames
                dfused[lo: lo + frames.shape[0]] += dfk + dfv
                dx = du1 + dxq
            dqueries += dx
        store.accumulate("qformer.queries", dqueries)
        return dfused

    return out, backward


def qformer_forward(fused, cfg: QFormerConfig, store: nm.ParameterStore) -> np.ndarray:
    """Per window, the learned queries cross-attend to that window's frames
    only; outputs are concatenated in window order: (ceil(T/W) * Q, d_model)."""
    out, _ = _qformer_apply(store, cfg, fused)
    return out


def _decoder_apply(store: nm.ParameterStore, cfg: DecoderConfig,
                   lora_cfg: LoRAConfig | None, x0: np.ndarray):
    """Causal trunk over an embedded sequence: returns (logits, backward)."""
    x = x0
    layer_bwds = []
    for i in range(cfg.n_layers):
        p = f"decoder.layers.{i}"
        q, q_bwd = _proj_pair(store, f"{p}.attn.wq", x, lora_cfg)
        k, k_bwd = _proj_pair(store, f"{p}.attn.wk", x, lora_cfg)
        v, v_bwd = _proj_pair(store, f"{p}.attn.wv", x, lora_cfg)
        ao = _multihead(q, k, v, cfg.n_heads, causal=True)
        proj, o_bwd = _proj_pair(store, f"{p}.attn.wo", ao, lora_cfg)
        u1 = x + proj
        x1 = nm.layer_norm(u1, store[f"{p}.ln1.gamma"].data, store[f"{p}.ln1.beta"].data)
        a1 = nm.linear(x1, store[f"{p}.ffn.w1"].data, store[f"{p}.ffn.b1"].data)
        r = _gelu(a1)
        f = nm.linear(r, store[f"{p}.ffn.w2"].data, store[f"{p}.ffn.b2"].data)
        u2 = x1 + f
        x2 = nm.layer_norm(u2, store[f"{p}.ln2.gamma"].data, store[f"{p}.ln2.beta"].data)

        def layer_backward(dx2, p=p, x_in=x, q=q, k=k, v=v, ao=ao, u1=u1, x1=x1,
                           a1=a1, r=r, u2=u2, q_bwd=q_bwd, k_bwd=k_bwd,
                           v_bwd=v_bwd, o_bwd=o_bwd):
            du2, dg2, db2 = nm.layer_norm_backward(dx2, u2, store[f"{p}.ln2.gamma"].data)
            store.accumulate(f"{p}.ln2.gamma", dg2)
            store.accumulate(f"{p}.ln2.beta", db2)
            dr, dw2, db2f = nm.linear_backward(du2, r, store[f"{p}.ffn.w2"].data)
            store.accumulate(f"{p}.ffn.w2", dw2)
            store.accumulate(f"{p}.ffn.b2", db2f)
            da1 = dr * _gelu_grad(a1)
            dx1, dw1, db1f = nm.linear_backward(da1, x1, store[f"{p}.ffn.w1"].data)
            store.accumulate(f"{p}.ffn.w1", dw1)
            store.accumulate(f"{p}.ffn.b1", db1f)
            dx1 = dx1 + du2
            du1, dg1, db1 = nm.layer_norm_backward(dx1, u1, store[f"{p}.ln1.gamma"].data)
            store.accumulate(f"{p}.ln1.gamma", dg1)
            store.accumulate(f"{p}.ln1.beta", db1)
            dao = o_bwd(du1)
            dq, dk, dv = _multihead_backward(dao, q, k, v, cfg.n_heads, causal=True)
            dx_in = du1 + q_bwd(dq) + k_bwd(dk) + v_bwd(dv)
            return dx_in

        layer_bwds.append(layer_backward)
        x = x2
    gf, bf = store["decoder.ln_f.gamma"], store["decoder.ln_f.beta"]
    xf = nm.layer_norm(x, gf.data, bf.data)
    logits = nm.linear(xf, store["decoder.out_proj.w"].data)
    x_last = x

    def backward(dlogits):
        dxf, dwout, _ = nm.linear_backward(dlogits, xf, store["decoder.out_proj.w"].data)
        store.accumulate("decoder.out_proj.w", dwout)
        dx, dgf, dbf = nm.layer_norm_backward(dxf, x_last, gf.data)
        store.accumulate("decoder.ln_f.gamma", dgf)
        store.accumulate("decoder.ln_f.beta", dbf)
        for layer_bwd in reversed(layer_bwds):
            dx = layer_bwd(dx)
        return dx

    return logits, backward


def _embed_sequence(store: nm.ParameterStore, cfg: DecoderConfig,
                    audio_tokens: np.ndarray, ids: Sequence[int]):
    emb = store["decoder.tok_emb"].data
    a = audio_tokens.shape[0] if audio_tokens is not None and audio_tokens.size else 0
    length = a + len(ids)
    if length > cfg.max_seq_len:
        raise CapacityError(
            f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}"
        )
    parts = []
    if a:
        if audio_tokens.shape[1] != cfg.d_model:
            raise DimensionError(
                f"audio tokens dim {audio_tokens.shape[1]} != decoder d_model {cfg.d_model}"
            )
        parts.append(audio_tokens)
    if ids:
        parts.append(emb[np.asarray(ids, dtype=np.int64)])
    x0 = np.concatenate(parts, axis=0) + sinusoidal_positions(length, cfg.d_model)
    return x0, a


def decoder_forward(audio_tokens, prompt_ids: Sequence[int], target_ids: Sequence[int],
                    cfg: DecoderConfig, store: nm.ParameterStore,
                    lora_cfg: LoRAConfig | None = None):
    """Loss and logits for [audio] + [prompt] + [target] under causal masking.

    Cross-entropy is taken only at the positions that predict target tokens.
    Returns (loss, logits, backward) where backward(scale) seeds the chain
    with d(loss)/d(loss) = scale and returns the grad w.r.t. audio tokens.
    """
    audio_tokens = nm.as_array(audio_tokens) if audio_tokens is not None else np.zeros((0, cfg.d_model))
    m = len(target_ids)
    if m == 0:
        raise DimensionError("decoder_forward: empty target, nothing to score")
    if audio_tokens.shape[0] + len(prompt_ids) == 0:
        raise DimensionError("decoder_forward: need at least one audio or prompt position")
    ids = list(prompt_ids) + list(target_ids)
    x0, a = _embed_sequence(store, cfg, audio_tokens, ids)
    logits, trunk_bwd = _decoder_apply(store, cfg, lora_cfg, x0)
    first = a + len(prompt_ids) - 1
    rows = slice(first, first + m)
    loss = nm.cross_entropy(logits[rows], target_ids)

    def backward(scale: float = 1.0):
        dlogits = np.zeros_like(logits)
        dlogits[rows] = nm.cross_entropy_backward(logits[rows], target_ids) * scale
        dx0 = trunk_bwd(dlogits)
        if ids:
            demb = np.zeros_like(store["decoder.tok_emb"].data)
            np.add.at(demb, np.asarray(ids, dtype=np.int64), dx0[a:])
            store.accumulate("decoder.tok_emb", demb)
        return dx0[:a]

    return loss, logits, backward


def generate(audio_tokens, prompt_ids: Sequence[int], cfg: DecoderConfig,
             store: nm.ParameterStore, max_new_tokens: int,
             lora_cfg: LoRAConfig | None = None, eos_id: int = EOS_ID) -> list[int]:
    """Greedy decoding; stops at EOS or max_new_tokens. Ties pick the lowest id."""
    if max_new_tokens < 1:
        raise ConfigError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    audio_tokens = nm.as_array(audio_tokens) if audio_tokens is not None else np.zeros((0, cfg.d_model))
    a = audio_tokens.shape[0]
    if a + len(prompt_ids) == 0:
        raise DimensionError("generate: need at least one audio or prompt position")
    if a + len(prompt_ids) + 1 > cfg.max_seq_len:
        raise CapacityError(
            f"no room to generate: context {a + len(prompt_ids)} fills max_seq_len {cfg.max_seq_len}"
        )
    ids = list(prompt_ids)
    out: list[int] = []
    while len(out) < max_new_tokens and a + len(ids) < cfg.max_seq_len:
        x0, _ = _embed_sequence(store, cfg, audio_tokens, ids)
        logits, _ = _decoder_apply(store, cfg, lora_cfg, x0)
        nxt = int(np.argmax(logits[-1]))  # argmax returns the lowest index on ties
        if nxt == eos_id:
            break
        out.append(nxt)
        ids.append(nxt)
    return out


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------


class BridgeModel:
    """Full pipeline: features -> encoders -> fusion -> connector -> decoder."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, store: nm.ParameterStore):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.store = store
        self.prompt_ids = [BOS_ID] + (vocab.encode(cfg.prompt) if cfg.prompt else [])

    @classmethod
    def build(cls, cfg: ModelConfig, vocab: Vocab, connector_seed: int = 0) -> "BridgeModel":
        cfg.validate()
        if cfg.decoder.vocab_size != len(vocab):
            raise ConfigError(
                f"decoder vocab_size {cfg.decoder.vocab_size} != vocabulary size {len(vocab)}"
            )
        store = nm.ParameterStore()
        init_speech_encoder(store, cfg.encoder, "speech_encoder")
        if cfg.audio_encoder is not None:
            init_speech_encoder(store, cfg.audio_encoder, "audio_encoder")
        init_qformer(store, cfg.qformer, cfg.fused_dim(), seed=connector_seed)
        init_decoder(store, cfg.decoder, cfg.lora)
        apply_default_freeze(store)
        return cls(cfg, vocab, store)

    def audio_tokens(self, features):
        """Connector tokens for one utterance; returns (tokens, backward)."""
        enc, enc_bwd = _encoder_apply(self.store, self.cfg.encoder, "speech_encoder", features)
        ev_bwd = None
        if self.cfg.audio_encoder is not None:
            ev, ev_bwd = _encoder_apply(self.store, self.cfg.audio_encoder, "audio_encoder", features)
            fused = fuse_features(enc, ev)
        else:
            ev = None
            fused = fuse_features(enc)
        toks, qf_bwd = _qformer_apply(self.store, self.cfg.qformer, fused)

        def backward(dtoks):
            dfused = qf_bwd(dtoks)
            if ev_bwd is not None:
                t = dfused.shape[0]
                d1 = enc.shape[1]
                denc = np.zeros_like(enc)
                denc[:t] = dfused[:, :d1]
                dev = np.zeros_like(ev)
                dev[:t] = dfused[:, d1:]
                enc_bwd(denc)
                ev_bwd(dev)
            else:
                enc_bwd(dfused)

        return toks, backward

    def example_loss(self, features, target_ids: Sequence[int],
                     backward: bool = False, scale: float = 1.0) -> float:
        """Loss for one utterance; with backward=True, accumulates grads scaled by `scale`."""
        toks, pipe_bwd = self.audio_tokens(features)
        loss, _, dec_bwd = decoder_forward(
            toks, self.prompt_ids, target_ids, self.cfg.decoder, self.store, self.cfg.lora)
        if backward:
            d_audio = dec_bwd(scale)
            pipe_bwd(d_audio)
        return loss

    def generate_ids(self, features, max_new_tokens: int) -> list[int]:
        toks, _ = self.audio_tokens(features)
        return generate(toks, self.prompt_ids, self.cfg.decoder, self.store,
                        max_new_tokens, self.cfg.lora)

    def generate_text(self, features, max_new_tokens: int) -> str:
        return self.vocab.decode(self.generate_ids(features, max_new_tokens))

    def target_ids(self, target_text: str) -> list[int]:
        return self.vocab.encode(target_text) + [EOS_ID]
