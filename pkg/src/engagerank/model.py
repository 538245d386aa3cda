"""The scoring network and its exact reverse-mode gradients.

The model encodes chunked frame summaries with a stack of causal dilated
convolutions, pools the encoding with attention weights computed from the
global video feature, concatenates a projection of that global feature, and
scores the result with a cosine head (normalized feature against a normalized
weight vector, no bias), so every score lands in [-1, 1].  An optional audio
branch projects a speech embedding, concatenates it with the visual feature
and the acoustic metadata, and scores through a second cosine head.

Everything is float64 numpy.  Forward passes record the intermediates needed
for an exact backward pass; gradients come back as a single flat vector
aligned with ``ModelParams.flat()``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import featurepipe
from .featurepipe import AUDIO_META_DIM, SampleRecord

FUSIONS = ("openface_only", "attention_only", "concat_only", "concat+attention")
HEADS = ("scalar", "categorical")

CLASS_THRESHOLDS = np.array([-0.5, 0.0, 0.5])


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and switches of the scoring network."""

    n_channels: int = 17          # per-frame feature channels (chunk input is 3x this)
    n_chunks: int = 10
    width: int = 64               # channels of the temporal encoder and fusion MLPs
    global_dim: int = 64
    speech_dim: int = featurepipe.SPEECH_DIM
    dropout: float = 0.1
    kernel_size: int = 3
    dilations: tuple = (1, 2, 4)
    fusion: str = "concat+attention"
    head: str = "scalar"
    with_audio: bool = False
    min_frames: int = featurepipe.DEFAULT_MIN_FRAMES
    strict_pad: bool = False

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.with_audio and self.head != "scalar":
            raise ValueError("the audio branch requires the scalar head")

    @property
    def chunk_rows(self) -> int:
        return 3 * self.n_channels

    @property
    def uses_attention(self) -> bool:
        return self.fusion in ("attention_only", "concat+attention")

    @property
    def uses_concat(self) -> bool:
        return self.fusion in ("concat_only", "concat+attention")

    @property
    def embed_dim(self) -> int:
        return 2 * self.width if self.uses_concat else self.width

    @property
    def audio_embed_dim(self) -> int:
        return self.embed_dim + self.speech_dim + AUDIO_META_DIM


class ModelParams:
    """All trainable tensors, addressable by name and as one flat vector."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.slices: dict[str, slice] = {}
        offset = 0
        for k, v in self._arrays.items():
            self.slices[k] = slice(offset, offset + v.size)
            offset += v.size
        self.n_params = offset

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def __contains__(self, key) -> bool:
        return key in self._arrays

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self._arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"flat vector must have length {self.n_params}")
        for k, v in self._arrays.items():
            v[...] = vec[self.slices[k]].reshape(v.shape)

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """View a flat vector as named blocks shaped like the parameters."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"flat vector must have length {self.n_params}")
        return {k: vec[self.slices[k]].reshape(v.shape) for k, v in self._arrays.items()}

    def key_at(self, flat_index: int) -> str:
        for k, s in self.slices.items():
            if s.start <= flat_index < s.stop:
                return k
        raise IndexError(flat_index)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def grads_to_flat(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self._arrays])

    def visual_keys(self) -> list[str]:
        return [k for k in self._arrays if not k.startswith("audio.")]

    def audio_keys(self) -> list[str]:
        return [k for k in self._arrays if k.startswith("audio.")]


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded initialization: N(0, 1/fan_in) weights, zero biases."""
    rng = np.random.default_rng(seed)

    def w(shape, fan_in):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    arrays: dict[str, np.ndarray] = {}
    c, k = config.width, config.kernel_size
    in_ch = config.chunk_rows
    for i, _ in enumerate(config.dilations):
        arrays[f"tcn.{i}.conv1.w"] = w((c, in_ch, k), in_ch * k)
        arrays[f"tcn.{i}.conv1.b"] = np.zeros(c)
        arrays[f"tcn.{i}.conv2.w"] = w((c, c, k), c * k)
        arrays[f"tcn.{i}.conv2.b"] = np.zeros(c)
        if in_ch != c:
            arrays[f"tcn.{i}.down.w"] = w((c, in_ch), in_ch)
            arrays[f"tcn.{i}.down.b"] = np.zeros(c)
        in_ch = c
    if config.uses_attention:
        arrays["mlp1.fc1.w"] = w((c, config.global_dim), config.global_dim)
        arrays["mlp1.fc1.b"] = np.zeros(c)
        arrays["mlp1.fc2.w"] = w((c, c), c)
        arrays["mlp1.fc2.b"] = np.zeros(c)
    if config.uses_concat:
        arrays["mlp2.fc1.w"] = w((c, config.global_dim), config.global_dim)
        arrays["mlp2.fc1.b"] = np.zeros(c)
        arrays["mlp2.fc2.w"] = w((c, c), c)
        arrays["mlp2.fc2.b"] = np.zeros(c)
    if config.head == "scalar":
        arrays["head.w"] = w(config.embed_dim, config.embed_dim)
    else:
        arrays["cat.w"] = w((featurepipe.N_CLASSES, config.embed_dim), config.embed_dim)
        arrays["cat.b"] = np.zeros(featurepipe.N_CLASSES)
    if config.with_audio:
        arrays["audio.fc.w"] = w((config.speech_dim, config.speech_dim), config.speech_dim)
        arrays["audio.fc.b"] = np.zeros(config.speech_dim)
        arrays["audio.head.w"] = w(config.audio_embed_dim, config.audio_embed_dim)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------------------
# Primitive layers (batched, with caches for backward)
# ---------------------------------------------------------------------------

def _causal_cols(x: np.ndarray, kernel: int, dilation: int) -> np.ndarray:
    """Stack the kernel taps of a left-padded sequence: (B,C,T) -> (B,C,K,T).

    Tap j of output column t reads input column t - (kernel-1-j)*dilation, so
    no output column ever sees a later input column.
    """
    b, ch, t = x.shape
    pad = (kernel - 1) * dilation
    xp = np.concatenate([np.zeros((b, ch, pad)), x], axis=2)
    cols = np.empty((b, ch, kernel, t))
    for j in range(kernel):
        cols[:, :, j, :] = xp[:, :, j * dilation:j * dilation + t]
    return cols


def _causal_cols_backward(dcols: np.ndarray, dilation: int, t: int) -> np.ndarray:
    b, ch, kernel, _ = dcols.shape
    pad = (kernel - 1) * dilation
    dxp = np.zeros((b, ch, t + pad))
    for j in range(kernel):
        dxp[:, :, j * dilation:j * dilation + t] += dcols[:, :, j, :]
    return dxp[:, :, pad:]


def _dropout_mask(shape, rate: float, train: bool, rng) -> Optional[np.ndarray]:
    if not train or rate <= 0.0:
        return None
    if rng is None:
        raise ValueError("training mode with dropout requires an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _apply_mask(x, mask):
    return x if mask is None else x * mask


def _conv_apply(w: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(O,I,K) kernel applied to (B,I,K,T) taps -> (B,O,T), via one matmul."""
    b, i, k, t = cols.shape
    o = w.shape[0]
    return np.matmul(w.reshape(o, i * k), cols.reshape(b, i * k, t))


def _conv_weight_grad(dout: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Gradient of _conv_apply w.r.t. its kernel, folded into one matmul."""
    b, i, k, t = cols.shape
    o = dout.shape[1]
    dout2 = dout.transpose(1, 0, 2).reshape(o, b * t)
    cols2 = cols.transpose(1, 2, 0, 3).reshape(i * k, b * t)
    return (dout2 @ cols2.T).reshape(o, i, k)


def _conv_cols_grad(w: np.ndarray, dout: np.ndarray, shape4) -> np.ndarray:
    o, i, k = w.shape
    return np.matmul(w.reshape(o, i * k).T, dout).reshape(shape4)


def _tcn_block_forward(x, params, prefix, dilation, kernel, train, rng, dropout):
    cache = {"x": x, "dilation": dilation}
    cols1 = _causal_cols(x, kernel, dilation)
    pre1 = _conv_apply(params[f"{prefix}.conv1.w"], cols1) \
        + params[f"{prefix}.conv1.b"][:, None]
    m1 = _dropout_mask(pre1.shape, dropout, train, rng)
    h1 = _apply_mask(np.maximum(pre1, 0.0), m1)
    cols2 = _causal_cols(h1, kernel, dilation)
    pre2 = _conv_apply(params[f"{prefix}.conv2.w"], cols2) \
        + params[f"{prefix}.conv2.b"][:, None]
    m2 = _dropout_mask(pre2.shape, dropout, train, rng)
    h2 = _apply_mask(np.maximum(pre2, 0.0), m2)
    if f"{prefix}.down.w" in params:
        res = np.matmul(params[f"{prefix}.down.w"], x) \
            + params[f"{prefix}.down.b"][:, None]
    else:
        res = x
    pre_out = h2 + res
    out = np.maximum(pre_out, 0.0)
    cache.update(cols1=cols1, s1=pre1 > 0, m1=m1, cols2=cols2, s2=pre2 > 0, m2=m2,
                 s_out=pre_out > 0)
    return out, cache


def _tcn_block_backward(dout, cache, params, prefix, grads):
    dilation = cache["dilation"]
    t = dout.shape[2]
    dpre_out = dout * cache["s_out"]
    dh2 = dpre_out
    dpre2 = _apply_mask(dh2, cache["m2"]) * cache["s2"]
    grads[f"{prefix}.conv2.w"] += _conv_weight_grad(dpre2, cache["cols2"])
    grads[f"{prefix}.conv2.b"] += dpre2.sum(axis=(0, 2))
    dcols2 = _conv_cols_grad(params[f"{prefix}.conv2.w"], dpre2,
                             cache["cols2"].shape)
    dh1 = _causal_cols_backward(dcols2, dilation, t)
    dpre1 = _apply_mask(dh1, cache["m1"]) * cache["s1"]
    grads[f"{prefix}.conv1.w"] += _conv_weight_grad(dpre1, cache["cols1"])
    grads[f"{prefix}.conv1.b"] += dpre1.sum(axis=(0, 2))
    dcols1 = _conv_cols_grad(params[f"{prefix}.conv1.w"], dpre1,
                             cache["cols1"].shape)
    dx = _causal_cols_backward(dcols1, dilation, t)
    if f"{prefix}.down.w" in params:
        o = dpre_out.shape[1]
        dp2 = dpre_out.transpose(1, 0, 2).reshape(o, -1)
        x2 = cache["x"].transpose(1, 0, 2).reshape(cache["x"].shape[1], -1)
        grads[f"{prefix}.down.w"] += dp2 @ x2.T
        grads[f"{prefix}.down.b"] += dpre_out.sum(axis=(0, 2))
        dx += np.matmul(params[f"{prefix}.down.w"].T, dpre_out)
    else:
        dx += dpre_out
    return dx


def _affine_forward(x, w, b):
    return x @ w.T + b


def _affine_backward(dout, x, w, grads, wkey, bkey):
    grads[wkey] += dout.T @ x
    grads[bkey] += dout.sum(axis=0)
    return dout @ w


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _cosine_score(x: np.ndarray, w: np.ndarray):
    """Cosine of each row of x against w; zero rows score 0 with a warning."""
    xn = np.linalg.norm(x, axis=-1)
    wn = np.linalg.norm(w)
    degenerate = xn == 0.0
    if np.any(degenerate):
        warnings.warn("zero-norm feature vector scored as 0", RuntimeWarning, stacklevel=3)
    safe_xn = np.where(degenerate, 1.0, xn)
    s = (x @ w) / (safe_xn * wn)
    s = np.where(degenerate, 0.0, s)
    return s, {"x": x, "w": w, "xn": safe_xn, "wn": wn, "degenerate": degenerate, "s": s}


def _cosine_score_backward(ds, cache, dw_out):
    x, w = cache["x"], cache["w"]
    xn, wn = cache["xn"], cache["wn"]
    s = cache["s"]
    live = ~cache["degenerate"]
    ds = ds * live
    x_hat = x / xn[:, None]
    w_hat = w / wn
    dx = ds[:, None] * (w_hat[None, :] - s[:, None] * x_hat) / xn[:, None]
    dw_out += ((ds[:, None] * (x_hat - s[:, None] * w_hat[None, :])).sum(axis=0)) / wn
    return dx


# ---------------------------------------------------------------------------
# Spec surface: individual operations
# ---------------------------------------------------------------------------

def temporal_encoder(chunks, params: ModelParams, train: bool = False, rng=None) -> np.ndarray:
    """Encode chunk summaries (3D x T, or batched B x 3D x T) to width x T."""
    values = chunks.values if isinstance(chunks, featurepipe.ChunkedFeatures) else np.asarray(chunks)
    single = values.ndim == 2
    if single:
        values = values[None]
    out, _ = _tcn_forward(values, params, train, rng)
    return out[0] if single else out


def _tcn_forward(x, params: ModelParams, train, rng):
    cfg = params.config
    if x.shape[1] != cfg.chunk_rows:
        raise ValueError(
            f"temporal encoder expects {cfg.chunk_rows} input channels, got {x.shape[1]}")
    caches = []
    for i, dil in enumerate(cfg.dilations):
        x, cache = _tcn_block_forward(x, params, f"tcn.{i}", dil, cfg.kernel_size,
                                      train, rng, cfg.dropout)
        caches.append(cache)
    return x, caches


def _tcn_backward(dout, caches, params: ModelParams, grads):
    for i in reversed(range(len(params.config.dilations))):
        dout = _tcn_block_backward(dout, caches[i], params, f"tcn.{i}", grads)
    return dout


def attention_fuse(encoded, global_feat, params: ModelParams, train: bool = False, rng=None):
    """Pool the encoding with softmax attention driven by the global feature.

    Returns (pooled, attention weights).  Accepts single (C x T, d) or batched
    (B x C x T, B x d) inputs.
    """
    encoded = np.asarray(encoded, dtype=np.float64)
    global_feat = np.asarray(global_feat, dtype=np.float64)
    single = encoded.ndim == 2
    if single:
        encoded, global_feat = encoded[None], global_feat[None]
    pooled, attn, _ = _attention_forward(encoded, global_feat, params, train, rng)
    if single:
        return pooled[0], attn[0]
    return pooled, attn


def _attention_forward(encoded, global_feat, params: ModelParams, train, rng):
    cfg = params.config
    cache = {}
    if cfg.uses_attention:
        h = _affine_forward(global_feat, params["mlp1.fc1.w"], params["mlp1.fc1.b"])
        m = _dropout_mask(h.shape, cfg.dropout, train, rng)
        hd = _apply_mask(h, m)
        q = _affine_forward(hd, params["mlp1.fc2.w"], params["mlp1.fc2.b"])
        logits = np.einsum("bc,bct->bt", q, encoded)
        attn = _softmax(logits)
        cache.update(h=h, m=m, hd=hd, q=q, attn=attn, global_feat=global_feat)
    else:
        t = encoded.shape[2]
        attn = np.full((encoded.shape[0], t), 1.0 / t)
    pooled = np.einsum("bct,bt->bc", encoded, attn)
    cache.update(encoded=encoded, attn_out=attn)
    return pooled, attn, cache


def _attention_backward(dpooled, cache, params: ModelParams, grads):
    cfg = params.config
    encoded, attn = cache["encoded"], cache["attn_out"]
    denc = np.einsum("bc,bt->bct", dpooled, attn)
    if not cfg.uses_attention:
        return denc, None, None
    dattn = np.einsum("bct,bc->bt", encoded, dpooled)
    dlogits = attn * (dattn - (attn * dattn).sum(axis=1, keepdims=True))
    dq = np.einsum("bct,bt->bc", encoded, dlogits)
    denc += np.einsum("bc,bt->bct", cache["q"], dlogits)
    dhd = _affine_backward(dq, cache["hd"], params["mlp1.fc2.w"], grads,
                           "mlp1.fc2.w", "mlp1.fc2.b")
    dh = _apply_mask(dhd, cache["m"])
    dglobal = _affine_backward(dh, cache["global_feat"], params["mlp1.fc1.w"], grads,
                               "mlp1.fc1.w", "mlp1.fc1.b")
    return denc, dglobal, None


def concat_fuse(global_feat, pooled, params: ModelParams):
    """Concatenate the projected global feature with the pooled encoding."""
    global_feat = np.asarray(global_feat, dtype=np.float64)
    pooled = np.asarray(pooled, dtype=np.float64)
    single = pooled.ndim == 1
    if single:
        global_feat, pooled = global_feat[None], pooled[None]
    fused, _ = _concat_forward(global_feat, pooled, params)
    return fused[0] if single else fused


def _concat_forward(global_feat, pooled, params: ModelParams):
    cfg = params.config
    cache = {"pooled_dim": pooled.shape[1]}
    if cfg.uses_concat:
        if global_feat.shape[1] != cfg.global_dim:
            raise ValueError(
                f"global feature must have length {cfg.global_dim}, got {global_feat.shape[1]}")
        pre = _affine_forward(global_feat, params["mlp2.fc1.w"], params["mlp2.fc1.b"])
        h = np.maximum(pre, 0.0)
        z = _affine_forward(h, params["mlp2.fc2.w"], params["mlp2.fc2.b"])
        fused = np.concatenate([z, pooled], axis=1)
        cache.update(s=pre > 0, h=h, global_feat=global_feat, z_dim=z.shape[1])
    else:
        fused = pooled
        cache.update(z_dim=0)
    return fused, cache


def _concat_backward(dfused, cache, params: ModelParams, grads):
    zd = cache["z_dim"]
    if zd == 0:
        return dfused, None
    dz, dpooled = dfused[:, :zd], dfused[:, zd:]
    dh = _affine_backward(dz, cache["h"], params["mlp2.fc2.w"], grads,
                          "mlp2.fc2.w", "mlp2.fc2.b")
    dpre = dh * cache["s"]
    dglobal = _affine_backward(dpre, cache["global_feat"], params["mlp2.fc1.w"], grads,
                               "mlp2.fc1.w", "mlp2.fc1.b")
    return dpooled, dglobal


def score_head(x, params: ModelParams):
    """Cosine score of a feature vector against the (normalized) head weight."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    s, _ = _cosine_score(x[None] if single else x, params["head.w"])
    return float(s[0]) if single else s


def classify(score):
    """Map scores to engagement levels with thresholds at -0.5, 0, and 0.5.

    Intervals are closed on the left of each upper threshold: a score of
    exactly 0 is ENGAGED, exactly 0.5 is HIGHLY_ENGAGED.
    """
    s = np.asarray(score, dtype=np.float64)
    if np.any(np.abs(s) > 1.0 + 1e-9):
        raise ValueError("score out of range")
    levels = np.digitize(s, CLASS_THRESHOLDS, right=False)
    if np.isscalar(score) or s.ndim == 0:
        return int(levels)
    return levels.astype(np.int64)


def audio_fuse(fused, speech_embedding, audio_meta, params: ModelParams):
    """Score through the audio branch; returns (score, multimodal embedding)."""
    if speech_embedding is None or audio_meta is None:
        raise ValueError("no audio modality")
    fused = np.asarray(fused, dtype=np.float64)
    single = fused.ndim == 1
    if single:
        fused = fused[None]
        speech_embedding = np.asarray(speech_embedding, dtype=np.float64)[None]
        audio_meta = np.asarray(audio_meta, dtype=np.float64)[None]
    s, xprime, _ = _audio_forward(fused, speech_embedding, audio_meta, params)
    if single:
        return float(s[0]), xprime[0]
    return s, xprime


def _audio_forward(fused, speech, meta, params: ModelParams):
    if "audio.fc.w" not in params:
        raise ValueError("model has no audio branch; build params with with_audio=True")
    xsp = _affine_forward(speech, params["audio.fc.w"], params["audio.fc.b"])
    xprime = np.concatenate([fused, xsp, meta], axis=1)
    s, head_cache = _cosine_score(xprime, params["audio.head.w"])
    cache = {"speech": speech, "fused_dim": fused.shape[1], "xsp_dim": xsp.shape[1],
             "head": head_cache}
    return s, xprime, cache


def _audio_backward(ds, dxprime_extra, cache, params: ModelParams, grads):
    dxprime = _cosine_score_backward(ds, cache["head"], grads["audio.head.w"])
    if dxprime_extra is not None:
        dxprime = dxprime + dxprime_extra
    fd, sd = cache["fused_dim"], cache["xsp_dim"]
    dfused = dxprime[:, :fd]
    dxsp = dxprime[:, fd:fd + sd]
    _affine_backward(dxsp, cache["speech"], params["audio.fc.w"], grads,
                     "audio.fc.w", "audio.fc.b")
    return dfused


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    """Everything one forward pass produced, plus caches for backward."""

    config: ModelConfig
    mode: str
    encoded: np.ndarray            # (B, C, T)
    attn: np.ndarray               # (B, T)
    pooled: np.ndarray             # (B, C)
    fused: np.ndarray              # (B, embed_dim) visual pre-head feature
    score: np.ndarray              # (B,) final score per record
    embedding: Optional[np.ndarray]  # (B, E) pre-head feature the score used
    logits: Optional[np.ndarray]   # (B, 4) when the categorical head is active
    audio_used: np.ndarray         # (B,) bool
    cache: dict

    @property
    def batch_size(self) -> int:
        return self.score.shape[0]


def forward_batch(chunks: np.ndarray, global_feat: np.ndarray, params: ModelParams,
                  mode: str = "eval", use_audio: bool = False, speech: np.ndarray = None,
                  meta: np.ndarray = None, has_speech: np.ndarray = None,
                  rng=None) -> Trace:
    """Run the network on a prepared batch.

    ``chunks`` is (B, 3D, T) and ``global_feat`` is (B, d).  When
    ``use_audio`` is set, records flagged in ``has_speech`` are scored through
    the audio branch and the rest fall back to the visual score.  A mixed
    batch is fine for evaluation but has no single pre-head embedding, so its
    trace cannot be used for backward.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    train = mode == "train"
    cfg = params.config
    encoded, tcn_caches = _tcn_forward(np.asarray(chunks, dtype=np.float64), params, train, rng)
    global_feat = np.asarray(global_feat, dtype=np.float64)
    pooled, attn, attn_cache = _attention_forward(encoded, global_feat, params, train, rng)
    fused, concat_cache = _concat_forward(global_feat, pooled, params)

    cache = {"tcn": tcn_caches, "attn": attn_cache, "concat": concat_cache}
    logits = None
    b = fused.shape[0]
    audio_used = np.zeros(b, dtype=bool)
    embedding: Optional[np.ndarray] = fused

    if cfg.head == "categorical":
        logits = _affine_forward(fused, params["cat.w"], params["cat.b"])
        score = np.zeros(b)
        cache["head"] = None
    else:
        score, head_cache = _cosine_score(fused, params["head.w"])
        cache["head"] = head_cache

    if use_audio and speech is not None:
        if has_speech is None:
            has_speech = np.ones(b, dtype=bool)
        has_speech = np.asarray(has_speech, dtype=bool)
        if has_speech.any():
            idx = np.flatnonzero(has_speech)
            a_score, xprime, a_cache = _audio_forward(fused[idx], speech[idx], meta[idx], params)
            score = score.copy()
            score[idx] = a_score
            audio_used[idx] = True
            cache["audio"] = a_cache
            cache["audio_idx"] = idx
            embedding = xprime if has_speech.all() else None

    return Trace(config=cfg, mode=mode, encoded=encoded, attn=attn, pooled=pooled,
                 fused=fused, score=score, embedding=embedding, logits=logits,
                 audio_used=audio_used, cache=cache)


def prepare_batch(records: list[SampleRecord], config: ModelConfig):
    """Chunk-summarize records into stacked arrays the batched forward takes."""
    chunks = np.stack([
        featurepipe.prepare_record(r, config.n_chunks, config.min_frames,
                                   config.strict_pad).values
        for r in records])
    gfeat = np.stack([r.global_feature for r in records])
    speech = meta = None
    has_speech = np.array([r.has_speech for r in records])
    if has_speech.any():
        sd = next(r.speech_embedding.size for r in records if r.has_speech)
        speech = np.zeros((len(records), sd))
        meta = np.zeros((len(records), AUDIO_META_DIM))
        for i, r in enumerate(records):
            if r.has_speech:
                speech[i] = r.speech_embedding
                meta[i] = r.audio_meta
    return chunks, gfeat, speech, meta, has_speech


def forward(record: SampleRecord, params: ModelParams, mode: str = "eval",
            use_audio: bool = False, rng=None) -> Trace:
    """Score a single record (batch of one); see forward_batch."""
    chunks, gfeat, speech, meta, has_speech = prepare_batch([record], params.config)
    return forward_batch(chunks, gfeat, params, mode=mode, use_audio=use_audio,
                         speech=speech, meta=meta, has_speech=has_speech, rng=rng)


def backward(trace: Trace, params: ModelParams, d_score=None, d_embed=None,
             d_logits=None) -> np.ndarray:
    """Exact reverse-mode gradients for the cached forward pass.

    ``d_score`` is dLoss/dscore per record, ``d_embed`` dLoss/dembedding
    (the pre-head feature the score used), and ``d_logits`` dLoss/dlogits for
    the categorical head.  Returns one flat vector aligned with
    ``params.flat()``.
    """
    if trace.config is not params.config:
        if trace.config != params.config:
            raise ValueError("trace and params come from different model configurations")
    b = trace.batch_size
    if trace.audio_used.any() and not trace.audio_used.all():
        raise ValueError("cannot backpropagate a mixed visual/audio batch")
    audio = bool(trace.audio_used.all()) and "audio" in trace.cache

    grads = params.zero_grads()
    d_score = np.zeros(b) if d_score is None else np.asarray(d_score, dtype=np.float64)
    if d_score.shape != (b,):
        raise ValueError("d_score must have one entry per record")

    if audio:
        dfused = _audio_backward(d_score, d_embed, trace.cache["audio"], params, grads)
    else:
        dfused = np.zeros_like(trace.fused)
        if trace.config.head == "scalar":
            dfused += _cosine_score_backward(d_score, trace.cache["head"], grads["head.w"])
        elif np.any(d_score):
            raise ValueError("categorical-head trace has no scalar score to differentiate")
        if d_embed is not None:
            dfused += d_embed
        if d_logits is not None:
            if trace.logits is None:
                raise ValueError("trace has no categorical logits")
            dfused += _affine_backward(np.asarray(d_logits, dtype=np.float64), trace.fused,
                                       params["cat.w"], grads, "cat.w", "cat.b")

    dpooled, _ = _concat_backward(dfused, trace.cache["concat"], params, grads)
    denc, _, _ = _attention_backward(dpooled, trace.cache["attn"], params, grads)
    _tcn_backward(denc, trace.cache["tcn"], params, grads)
    return params.grads_to_flat(grads)


def relu_signature(trace: Trace) -> np.ndarray:
    """Concatenated boolean masks of every kink site in the forward pass.

    Finite-difference checks compare signatures at perturbed points against
    the center; a changed mask means the perturbation crossed a kink and the
    coordinate cannot be checked at that step size.
    """
    parts = []
    for c in trace.cache["tcn"]:
        parts.extend([c["s1"].ravel(), c["s2"].ravel(), c["s_out"].ravel()])
    if "s" in trace.cache["concat"]:
        parts.append(trace.cache["concat"]["s"].ravel())
    return np.concatenate(parts)
