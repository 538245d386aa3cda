"""Training orchestration: optimizer, schedule, the ranking-loss loop,
two-stage multimodal training, evaluation, checkpoints, and gradient checks.

The loop is deterministic end to end: one seeded generator drives sampling,
dropout, and pool initialization, reductions run in fixed order, and a saved
checkpoint restores every piece of mutable state (parameters, momentum copy,
optimizer moments, score pool ring, centers, generator state) bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import featurepipe, metrics, mocorank
from . import model as model_mod
from .featurepipe import Dataset, N_CLASSES
from .metrics import MetricsReport
from .mocorank import ClassCenters, MomentumEncoder, ScorePool

logger = logging.getLogger("engagerank")

LOSSES = ("mocorank", "mocorank+center", "mse", "ce", "cb_focal", "ce+center")
CATEGORICAL_LOSSES = ("ce", "cb_focal", "ce+center")
SAMPLERS = ("sequential", "class_balanced")
CHECKPOINT_VERSION = "1"


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on, seed included."""

    loss: str = "mocorank"
    batch_size: int = 32
    pool_size: int = 256
    epochs: int = 60
    lr_start: float = 5e-4
    lr_end: float = 5e-7
    weight_decay: float = 1e-3
    momentum: float = 0.999
    sampler: Optional[str] = None      # None picks the loss-appropriate default
    use_audio: bool = False
    ablation: str = "concat+attention"
    seed: int = 0
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    center_weight: float = 0.2
    cb_beta: float = 0.9999
    cb_gamma: float = 2.0
    detach_margin: bool = False
    score_before_step: bool = False    # score the batch with the momentum
                                       # encoder before (not after) the step
    stage2_epochs: Optional[int] = None
    init_from: Optional[str] = None
    # model shape
    n_channels: int = featurepipe.DEFAULT_CHANNELS
    global_dim: int = featurepipe.DEFAULT_GLOBAL_DIM
    width: int = 32
    n_chunks: int = featurepipe.DEFAULT_CHUNKS
    dropout: float = 0.1
    speech_dim: int = featurepipe.SPEECH_DIM
    min_frames: int = featurepipe.DEFAULT_MIN_FRAMES

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.ablation not in model_mod.FUSIONS:
            raise ValueError(f"ablation must be one of {model_mod.FUSIONS}")
        if self.sampler is not None and self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("learning rates must satisfy lr_start >= lr_end > 0")
        if self.batch_size < 1 or self.batch_size > self.pool_size:
            raise ValueError("batch size must be in 1..pool_size")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        if self.use_audio and self.head == "categorical":
            raise ValueError("audio training requires a scalar-head loss")

    @property
    def head(self) -> str:
        return "categorical" if self.loss in CATEGORICAL_LOSSES else "scalar"

    @property
    def needs_pool(self) -> bool:
        return self.loss.startswith("mocorank")

    @property
    def needs_centers(self) -> bool:
        return self.loss.endswith("+center")

    @property
    def resolved_sampler(self) -> str:
        if self.sampler is not None:
            return self.sampler
        return "class_balanced" if self.head == "categorical" else "sequential"

    def model_config(self, with_audio: Optional[bool] = None) -> model_mod.ModelConfig:
        return model_mod.ModelConfig(
            n_channels=self.n_channels, n_chunks=self.n_chunks, width=self.width,
            global_dim=self.global_dim, speech_dim=self.speech_dim,
            dropout=self.dropout, fusion=self.ablation, head=self.head,
            with_audio=self.use_audio if with_audio is None else with_audio,
            min_frames=self.min_frames)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small preset sized for laptop-scale runs and the test suite."""
        base = dict(batch_size=32, pool_size=256, epochs=60, width=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Full-size preset: batch 256, pool 2048, 1200 epochs, width 64."""
        base = dict(batch_size=256, pool_size=2048, epochs=1200, width=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        """Sub-1000-parameter preset for finite-difference gradient checks."""
        base = dict(batch_size=4, pool_size=8, epochs=1, n_channels=2,
                    global_dim=5, width=4, n_chunks=4, dropout=0.0,
                    speech_dim=6, min_frames=8)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------

def cosine_lr(t: int, t_total: int, lr_start: float, lr_end: float) -> float:
    """Half-cosine decay from lr_start at t=0 to lr_end at t=t_total."""
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t / t_total))


def init_opt_state(params: model_mod.ModelParams) -> dict:
    return {"m": np.zeros(params.n_params), "v": np.zeros(params.n_params), "step": 0}


def adamw_step(params: model_mod.ModelParams, grads: np.ndarray, state: dict,
               lr: float, weight_decay: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               frozen_keys: tuple = ()) -> tuple[model_mod.ModelParams, dict]:
    """One AdamW update in place; decoupled decay scales weights before the
    adaptive step.  Frozen blocks are skipped entirely, decay included."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != (params.n_params,):
        raise ValueError(f"gradient vector must have length {params.n_params}")
    frozen = set(frozen_keys)
    for key, sl in params.slices.items():
        if key in frozen:
            continue
        if not np.all(np.isfinite(grads[sl])):
            raise ValueError(f"non-finite gradient in parameter '{key}'")
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for key, sl in params.slices.items():
        if key in frozen:
            continue
        g = grads[sl]
        p = params[key]
        p *= 1.0 - lr * weight_decay
        m = state["m"][sl]
        v = state["v"][sl]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= (lr * update).reshape(p.shape)
    return params, state


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Complete mutable state of a run; everything here is checkpointed."""

    config: TrainConfig
    params: model_mod.ModelParams
    opt: dict
    rng: np.random.Generator
    epoch: int = 0
    enc: Optional[MomentumEncoder] = None
    pool: Optional[ScorePool] = None
    centers: Optional[ClassCenters] = None
    frozen_keys: tuple = ()
    history: list = field(default_factory=list)


@dataclass
class _BatchArrays:
    """Whole-dataset tensors prepared once so epochs only slice."""

    chunks: np.ndarray
    gfeat: np.ndarray
    speech: Optional[np.ndarray]
    meta: Optional[np.ndarray]
    has_speech: np.ndarray
    labels: np.ndarray

    @classmethod
    def prepare(cls, dataset: Dataset, mcfg: model_mod.ModelConfig) -> "_BatchArrays":
        chunks, gfeat, speech, meta, has_speech = model_mod.prepare_batch(
            dataset.records, mcfg)
        return cls(chunks=chunks, gfeat=gfeat, speech=speech, meta=meta,
                   has_speech=has_speech, labels=dataset.labels())

    def take(self, idx: np.ndarray):
        return (self.chunks[idx], self.gfeat[idx],
                None if self.speech is None else self.speech[idx],
                None if self.meta is None else self.meta[idx],
                self.has_speech[idx], self.labels[idx])


def _load_dataset(path: Optional[str], name: str) -> Dataset:
    if path is None:
        raise ValueError(f"no {name} data: pass a dataset or set {name}_path")
    return featurepipe.load_records(path)


def init_train_state(config: TrainConfig, train_set: Dataset,
                     model_config: Optional[model_mod.ModelConfig] = None,
                     frozen_keys: tuple = ()) -> TrainState:
    rng = np.random.default_rng(config.seed)
    mcfg = model_config or config.model_config()
    params = model_mod.init_params(mcfg, seed=config.seed)
    if config.init_from is not None:
        donor = load_checkpoint(config.init_from)
        donor_params = donor.params
        if list(donor_params.keys()) != list(params.keys()) or any(
                donor_params[k].shape != params[k].shape for k in params.keys()):
            raise ValueError("init_from checkpoint does not match the model shape")
        params = model_mod.ModelParams(mcfg, {k: v.copy()
                                              for k, v in donor_params.items()})
    state = TrainState(config=config, params=params, opt=init_opt_state(params),
                       rng=rng, frozen_keys=tuple(frozen_keys))
    if config.needs_pool:
        state.enc = MomentumEncoder.from_model(params, config.momentum)
        pool_seed = int(rng.integers(2 ** 31))
        state.pool = mocorank.pool_init(train_set, state.enc, config.pool_size,
                                        seed=pool_seed, use_audio=config.use_audio)
    if config.needs_centers:
        embed_dim = (mcfg.audio_embed_dim if config.use_audio else mcfg.embed_dim)
        state.centers = ClassCenters.zeros(embed_dim)
    return state


def _batch_loss(config: TrainConfig, trace: model_mod.Trace, labels: np.ndarray,
                state: TrainState, class_counts: np.ndarray):
    """Loss value and output-side gradients for the configured objective."""
    d_score = d_embed = d_logits = None
    if config.needs_pool:
        loss, d_score, d_embed = mocorank.multi_margin_loss(
            trace.score, labels, trace.embedding, state.pool,
            detach_margin=config.detach_margin)
        if config.needs_centers:
            closs, d_c, state.centers = mocorank.center_loss(
                trace.embedding, labels, state.centers, config.center_weight)
            loss += closs
            d_embed = d_embed + d_c
    elif config.loss == "mse":
        loss, d_score = mocorank.mse_loss(trace.score, labels)
    elif config.loss == "ce":
        loss, d_logits = mocorank.ce_loss(trace.logits, labels)
    elif config.loss == "cb_focal":
        loss, d_logits = mocorank.cb_focal_loss(trace.logits, labels, class_counts,
                                                beta=config.cb_beta,
                                                gamma=config.cb_gamma)
    elif config.loss == "ce+center":
        loss, d_logits = mocorank.ce_loss(trace.logits, labels)
        closs, d_embed, state.centers = mocorank.center_loss(
            trace.embedding, labels, state.centers, config.center_weight)
        loss += closs
    else:  # pragma: no cover - config validation rules this out
        raise ValueError(f"unknown loss {config.loss!r}")
    return loss, d_score, d_embed, d_logits


def _score_with_encoder(enc: MomentumEncoder, data, use_audio: bool):
    chunks, gfeat, speech, meta, has_speech, _ = data
    trace = model_mod.forward_batch(chunks, gfeat, enc.params, mode="eval",
                                    use_audio=use_audio, speech=speech, meta=meta,
                                    has_speech=has_speech)
    if trace.embedding is None:
        raise ValueError("cannot pool a mixed visual/audio batch")
    return trace.score, trace.embedding


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return math.ceil(n_records / batch_size)


def train_epochs(state: TrainState, train_set: Dataset,
                 val_set: Optional[Dataset] = None,
                 n_epochs: Optional[int] = None) -> TrainState:
    """Advance training by n_epochs (default: to the configured total)."""
    config = state.config
    n = len(train_set.records)
    per_epoch = steps_per_epoch(n, config.batch_size)
    total_steps = config.epochs * per_epoch
    target = config.epochs if n_epochs is None else min(config.epochs,
                                                        state.epoch + n_epochs)
    arrays = _BatchArrays.prepare(train_set, state.params.config)
    val_arrays = None
    if val_set is not None and len(val_set.records):
        val_arrays = _BatchArrays.prepare(val_set, state.params.config)
    class_counts = train_set.class_counts()
    frozen_mask = np.zeros(state.params.n_params, dtype=bool)
    for key in state.frozen_keys:
        frozen_mask[state.params.slices[key]] = True

    cb_gen = None
    if config.resolved_sampler == "class_balanced":
        cb_gen = featurepipe.class_balanced_sampler(arrays.labels, config.batch_size,
                                                    rng=state.rng)
    while state.epoch < target:
        if cb_gen is not None:
            batches = [next(cb_gen) for _ in range(per_epoch)]
        else:
            batches = featurepipe.sequential_batches(n, config.batch_size, state.rng)
        epoch_loss = 0.0
        n_seen = 0
        for idx in batches:
            data = arrays.take(idx)
            chunks, gfeat, speech, meta, has_speech, labels = data
            trace = model_mod.forward_batch(
                chunks, gfeat, state.params, mode="train",
                use_audio=config.use_audio, speech=speech, meta=meta,
                has_speech=has_speech, rng=state.rng)
            loss, d_score, d_embed, d_logits = _batch_loss(
                config, trace, labels, state, class_counts)
            grads = model_mod.backward(trace, state.params, d_score=d_score,
                                       d_embed=d_embed, d_logits=d_logits)
            if state.frozen_keys:
                grads[frozen_mask] = 0.0
            lr = cosine_lr(state.opt["step"], total_steps, config.lr_start,
                           config.lr_end)
            if config.needs_pool and config.score_before_step:
                m_scores, m_embeds = _score_with_encoder(state.enc, data,
                                                         config.use_audio)
            adamw_step(state.params, grads, state.opt, lr,
                       weight_decay=config.weight_decay,
                       frozen_keys=state.frozen_keys)
            if config.needs_pool:
                mocorank.momentum_update(state.enc, state.params, config.momentum)
                if not config.score_before_step:
                    m_scores, m_embeds = _score_with_encoder(state.enc, data,
                                                             config.use_audio)
                state.pool.push(labels, m_scores, m_embeds)
            epoch_loss += loss * labels.size
            n_seen += labels.size
        state.epoch += 1
        row = {"epoch": state.epoch,
               "train_loss": epoch_loss / n_seen,
               "lr": cosine_lr(state.opt["step"], total_steps, config.lr_start,
                               config.lr_end)}
        if val_arrays is not None:
            report = _evaluate_arrays(state.params, val_arrays, config.use_audio)
            row["val_acc"] = report.acc
            row["val_avg_acc"] = report.avg_acc
        state.history.append(row)
        logger.info("epoch %d: train_loss=%.6f%s", state.epoch, row["train_loss"],
                    f" val_avg_acc={row['val_avg_acc']:.4f}" if "val_avg_acc" in row
                    else "")
    return state


def train(config: TrainConfig, train_set: Optional[Dataset] = None,
          val_set: Optional[Dataset] = None) -> tuple[TrainState, list]:
    """Full training run; returns the final state and the per-epoch log."""
    if train_set is None:
        train_set = _load_dataset(config.train_path, "train")
    if val_set is None and config.val_path is not None:
        val_set = _load_dataset(config.val_path, "val")
    state = init_train_state(config, train_set)
    train_epochs(state, train_set, val_set)
    return state, state.history


def train_two_stage(config: TrainConfig, train_set: Optional[Dataset] = None,
                    val_set: Optional[Dataset] = None) -> tuple[TrainState, list]:
    """Visual stage on all records, then audio stage on the speech subset.

    Stage 1 never updates audio parameters; stage 2 freezes every visual
    parameter bit-for-bit and trains only the speech projection and the
    multimodal head, with the pool rebuilt from speech records.
    """
    if train_set is None:
        train_set = _load_dataset(config.train_path, "train")
    if val_set is None and config.val_path is not None:
        val_set = _load_dataset(config.val_path, "val")
    speech_records = [r for r in train_set.records if r.has_speech]
    if not speech_records:
        raise ValueError("no speech records")
    mcfg = config.model_config(with_audio=True)

    stage1_cfg = replace(config, use_audio=False)
    state = init_train_state(stage1_cfg, train_set, model_config=mcfg)
    state.frozen_keys = tuple(state.params.audio_keys())
    train_epochs(state, train_set, val_set)
    for row in state.history:
        row["stage"] = 1

    speech_set = Dataset(records=speech_records, split=train_set.split,
                         n_channels=train_set.n_channels,
                         global_dim=train_set.global_dim)
    stage2_cfg = replace(config, use_audio=True,
                         epochs=config.stage2_epochs or config.epochs)
    visual_keys = tuple(state.params.visual_keys())
    stage2 = TrainState(config=stage2_cfg, params=state.params,
                        opt=init_opt_state(state.params), rng=state.rng,
                        enc=state.enc, frozen_keys=visual_keys,
                        history=state.history)
    if stage2_cfg.needs_pool:
        pool_seed = int(stage2.rng.integers(2 ** 31))
        stage2.enc = MomentumEncoder.from_model(state.params, config.momentum)
        stage2.pool = mocorank.pool_init(speech_set, stage2.enc, config.pool_size,
                                         seed=pool_seed, use_audio=True)
    if stage2_cfg.needs_centers:
        stage2.centers = ClassCenters.zeros(mcfg.audio_embed_dim)
    stage2.epoch = 0
    n_before = len(stage2.history)
    train_epochs(stage2, speech_set, val_set)
    for row in stage2.history[n_before:]:
        row["stage"] = 2
    return stage2, stage2.history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _evaluate_arrays(params: model_mod.ModelParams, arrays: _BatchArrays,
                     use_audio: bool, batch_size: int = 256) -> MetricsReport:
    preds = []
    n = arrays.labels.size
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        trace = model_mod.forward_batch(
            arrays.chunks[sl], arrays.gfeat[sl], params, mode="eval",
            use_audio=use_audio,
            speech=None if arrays.speech is None else arrays.speech[sl],
            meta=None if arrays.meta is None else arrays.meta[sl],
            has_speech=arrays.has_speech[sl])
        if params.config.head == "categorical":
            preds.append(np.argmax(trace.logits, axis=1))
        else:
            preds.append(model_mod.classify(trace.score))
    confusion = metrics.confusion_matrix(np.concatenate(preds), arrays.labels)
    return metrics.accuracy_metrics(confusion)


def evaluate(source, dataset: Dataset, subset: str = "all",
             use_audio: Optional[bool] = None, batch_size: int = 256) -> MetricsReport:
    """Deterministic eval-mode scoring of a dataset into a MetricsReport.

    ``source`` is a TrainState or ModelParams.  ``subset`` may be "all" or
    "speech_only".  With audio enabled, speech-bearing records go through the
    audio head and the rest use the visual score.
    """
    if isinstance(source, TrainState):
        params = source.params
        if use_audio is None:
            use_audio = source.config.use_audio
    else:
        params = source
        use_audio = bool(use_audio)
    if subset not in ("all", "speech_only"):
        raise ValueError("subset must be 'all' or 'speech_only'")
    records = dataset.records
    if subset == "speech_only":
        records = [r for r in records if r.has_speech]
    if not records:
        raise ValueError(f"subset {subset!r} selected no records")
    subset_ds = Dataset(records=records, split=dataset.split,
                        n_channels=dataset.n_channels,
                        global_dim=dataset.global_dim)
    arrays = _BatchArrays.prepare(subset_ds, params.config)
    return _evaluate_arrays(params, arrays, use_audio, batch_size=batch_size)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _config_to_jsonable(config) -> dict:
    d = dataclasses.asdict(config)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def save_checkpoint(state: TrainState, path: str) -> None:
    """Write the whole TrainState to a versioned npz container."""
    mcfg = dataclasses.asdict(state.params.config)
    mcfg["dilations"] = list(mcfg["dilations"])
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": _config_to_jsonable(state.config),
        "model_config": mcfg,
        "epoch": state.epoch,
        "opt_step": state.opt["step"],
        "rng_state": state.rng.bit_generator.state,
        "frozen_keys": list(state.frozen_keys),
        "param_keys": list(state.params.keys()),
        "has_enc": state.enc is not None,
        "has_pool": state.pool is not None,
        "has_centers": state.centers is not None,
    }
    arrays = {"opt__m": state.opt["m"], "opt__v": state.opt["v"]}
    for k, v in state.params.items():
        arrays[f"param__{k}"] = v
    if state.enc is not None:
        meta["enc_momentum"] = state.enc.momentum
        for k, v in state.enc.params.items():
            arrays[f"momentum__{k}"] = v
    if state.pool is not None:
        ps = state.pool.state()
        meta["pool"] = {"count": ps["count"], "next": ps["next"],
                        "capacity": ps["capacity"]}
        arrays["pool__labels"] = ps["labels"]
        arrays["pool__scores"] = ps["scores"]
        arrays["pool__embeddings"] = ps["embeddings"]
    if state.centers is not None:
        meta["centers_alpha"] = state.centers.alpha
        arrays["centers__values"] = state.centers.values
    # write through a handle so the exact path is honored (savez would
    # otherwise append .npz)
    with open(path, "wb") as fh:
        np.savez(fh, meta=json.dumps(meta), **arrays)


def load_checkpoint(path: str) -> TrainState:
    """Read a checkpoint written by save_checkpoint; bit-exact restore."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"][()]))
            loaded = {k: data[k] for k in data.files if k != "meta"}
    except (zipfile.BadZipFile, OSError, KeyError, ValueError) as err:
        size = os.path.getsize(path) if os.path.exists(path) else 0
        raise ValueError(
            f"corrupt checkpoint {path!r}: {err} (read failed within "
            f"{size}-byte file)") from err
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {meta.get('version')!r}; "
            f"this reader handles version {CHECKPOINT_VERSION!r}")

    config_d = dict(meta["config"])
    config = TrainConfig(**config_d)
    mcfg_d = dict(meta["model_config"])
    mcfg_d["dilations"] = tuple(mcfg_d["dilations"])
    mcfg = model_mod.ModelConfig(**mcfg_d)
    params = model_mod.ModelParams(
        mcfg, {k: loaded[f"param__{k}"] for k in meta["param_keys"]})
    opt = {"m": loaded["opt__m"].copy(), "v": loaded["opt__v"].copy(),
           "step": int(meta["opt_step"])}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(config=config, params=params, opt=opt, rng=rng,
                       epoch=int(meta["epoch"]),
                       frozen_keys=tuple(meta["frozen_keys"]))
    if meta["has_enc"]:
        enc_params = model_mod.ModelParams(
            mcfg, {k: loaded[f"momentum__{k}"] for k in meta["param_keys"]})
        state.enc = MomentumEncoder(params=enc_params,
                                    momentum=float(meta["enc_momentum"]))
    if meta["has_pool"]:
        state.pool = ScorePool.from_state({
            "labels": loaded["pool__labels"],
            "scores": loaded["pool__scores"],
            "embeddings": loaded["pool__embeddings"],
            "count": meta["pool"]["count"],
            "next": meta["pool"]["next"],
            "capacity": meta["pool"]["capacity"]})
    if meta["has_centers"]:
        state.centers = ClassCenters(values=loaded["centers__values"].copy(),
                                     alpha=float(meta["centers_alpha"]))
    return state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def _tiny_dataset(config: TrainConfig, seed: int) -> Dataset:
    return featurepipe.synth_dataset(
        n=max(16, 4 * config.batch_size), n_channels=config.n_channels,
        global_dim=config.global_dim, n_frames=config.min_frames + 4,
        proportions=(1, 1, 1, 1), noise=0.3, seed=seed,
        speech_fraction=1.0 if config.use_audio else 0.0,
        speech_dim=config.speech_dim)


def _loss_and_signature(config: TrainConfig, params, data, pool, centers,
                        class_counts):
    chunks, gfeat, speech, meta, has_speech, labels = data
    trace = model_mod.forward_batch(chunks, gfeat, params, mode="train",
                                    use_audio=config.use_audio, speech=speech,
                                    meta=meta, has_speech=has_speech)
    sig_parts = [model_mod.relu_signature(trace).astype(np.float64)]
    if config.needs_pool:
        pairs = mocorank.pairwise_matrix(trace.score, labels, trace.embedding, pool)
        b, p = pairs["f"].shape
        loss = float(np.sum(np.maximum(pairs["f"], 0.0)) / (b * p))
        sig_parts.append(pairs["active"].ravel().astype(np.float64))
        sig_parts.append(np.sign(pairs["diff"][pairs["same"]]))
        if config.needs_centers:
            closs, _, _ = mocorank.center_loss(trace.embedding, labels, centers,
                                               config.center_weight)
            loss += closs
    elif config.loss == "mse":
        loss, _ = mocorank.mse_loss(trace.score, labels)
    elif config.loss == "ce":
        loss, _ = mocorank.ce_loss(trace.logits, labels)
    elif config.loss == "cb_focal":
        loss, _ = mocorank.cb_focal_loss(trace.logits, labels, class_counts,
                                         beta=config.cb_beta, gamma=config.cb_gamma)
    else:  # ce+center
        loss, _ = mocorank.ce_loss(trace.logits, labels)
        closs, _, _ = mocorank.center_loss(trace.embedding, labels, centers,
                                           config.center_weight)
        loss += closs
    return loss, np.concatenate(sig_parts), trace


def grad_check_loss(config: TrainConfig, n_params_max: int = 1000,
                    tolerance: float = 1e-4, h: float = 5e-5,
                    seed: int = 0) -> dict:
    """Finite-difference check of the full network under config.loss.

    The step size balances truncation against float64 cancellation; below
    ~1e-5 the audio-branch losses (larger raw values) go round-off limited.
    """
    config = replace(config, dropout=0.0)
    params = model_mod.init_params(config.model_config(), seed=seed)
    if params.n_params > n_params_max:
        raise ValueError(
            f"model has {params.n_params} parameters, over the {n_params_max} cap")
    ds = _tiny_dataset(config, seed)
    data_idx = np.arange(config.batch_size)
    arrays = _BatchArrays.prepare(ds, params.config)
    data = arrays.take(data_idx)
    class_counts = ds.class_counts()

    pool = None
    centers = None
    if config.needs_pool:
        enc = MomentumEncoder.from_model(
            model_mod.init_params(params.config, seed=seed + 1), config.momentum)
        pool = mocorank.pool_init(ds, enc, config.pool_size, seed=seed,
                                  use_audio=config.use_audio)
    if config.needs_centers:
        embed_dim = (params.config.audio_embed_dim if config.use_audio
                     else params.config.embed_dim)
        centers = ClassCenters(
            values=0.1 * np.random.default_rng(seed + 2).standard_normal(
                (N_CLASSES, embed_dim)))

    # analytic gradient at the center point
    _, sig0, trace = _loss_and_signature(config, params, data, pool, centers,
                                         class_counts)
    labels = data[5]
    dummy_state = TrainState(config=config, params=params, opt=init_opt_state(params),
                             rng=np.random.default_rng(0), pool=pool,
                             centers=centers)
    _, d_score, d_embed, d_logits = _batch_loss(config, trace, labels, dummy_state,
                                                class_counts)
    analytic = model_mod.backward(trace, params, d_score=d_score, d_embed=d_embed,
                                  d_logits=d_logits)

    key_of = np.empty(params.n_params, dtype=object)
    for k, sl in params.slices.items():
        key_of[sl] = k
    x0 = params.flat()
    block_err = {k: 0.0 for k in params.keys()}
    max_err = 0.0
    n_skipped = 0
    for i in range(params.n_params):
        x = x0.copy()
        x[i] = x0[i] + h
        params.set_flat(x)
        l_plus, sig_plus, _ = _loss_and_signature(config, params, data, pool,
                                                  centers, class_counts)
        x[i] = x0[i] - h
        params.set_flat(x)
        l_minus, sig_minus, _ = _loss_and_signature(config, params, data, pool,
                                                    centers, class_counts)
        if not (np.array_equal(sig_plus, sig0) and np.array_equal(sig_minus, sig0)):
            n_skipped += 1
            continue
        numeric = (l_plus - l_minus) / (2.0 * h)
        rel = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-6)
        block_err[key_of[i]] = max(block_err[key_of[i]], rel)
        max_err = max(max_err, rel)
    params.set_flat(x0)
    return {"loss": config.loss, "max_rel_err": max_err, "n_params": params.n_params,
            "n_skipped": n_skipped, "blocks": block_err,
            "passed": bool(max_err < tolerance)}


def grad_check(config: Optional[TrainConfig] = None, n_params_max: int = 1000,
               tolerance: float = 1e-4, losses=None, h: float = 5e-5,
               seed: int = 0) -> dict:
    """Run grad_check_loss for each requested loss; report per-loss errors."""
    config = config or TrainConfig.tiny()
    if losses is None:
        losses = [l for l in LOSSES
                  if not (config.use_audio and l in CATEGORICAL_LOSSES)]
    results = {}
    for loss in losses:
        cfg = replace(config, loss=loss, sampler=None)
        results[loss] = grad_check_loss(cfg, n_params_max=n_params_max,
                                        tolerance=tolerance, h=h, seed=seed)
        logger.info("grad check %s: max_rel_err=%.3e skipped=%d", loss,
                    results[loss]["max_rel_err"], results[loss]["n_skipped"])
    return {"tolerance": tolerance, "losses": results,
            "passed": all(r["passed"] for r in results.values())}


# ---------------------------------------------------------------------------
# Loss benchmark (Table-2-style comparison)
# ---------------------------------------------------------------------------

def bench_losses(base_config: TrainConfig, variants: dict, seeds,
                 train_set: Dataset, val_set: Optional[Dataset],
                 test_set: Dataset) -> dict:
    """Train each config variant over the seeds and tabulate test metrics.

    ``variants`` maps a display name to a dict of TrainConfig field overrides.
    Returns {"rows": [...], "summary": {name: mean/std aggregates}}.
    """
    rows = []
    for name, overrides in variants.items():
        for seed in seeds:
            cfg = replace(base_config, seed=int(seed), **overrides)
            state, _ = train(cfg, train_set, val_set)
            report = evaluate(state, test_set)
            rows.append({"variant": name, "seed": int(seed), "acc": report.acc,
                         "avg_acc": report.avg_acc})
            logger.info("bench %s seed=%d: acc=%.4f avg_acc=%.4f", name, seed,
                        report.acc, report.avg_acc)
    summary = {}
    for name in variants:
        accs = np.array([r["acc"] for r in rows if r["variant"] == name])
        avg = np.array([r["avg_acc"] for r in rows if r["variant"] == name])
        summary[name] = {"mean_acc": float(accs.mean()),
                         "mean_avg_acc": float(avg.mean()),
                         "std_avg_acc": float(avg.std(ddof=0)),
                         "n_seeds": int(avg.size)}
    return {"rows": rows, "summary": summary}
