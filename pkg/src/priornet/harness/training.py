"""Training and evaluation of adapter + head parameters on a frozen encoder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..backbone import EncoderConfig, PriorNetModel
from ..clip_pipeline import ClipMeta, ClipTensor, fill_placeholders, read_dataset
from ..lora import PlacementPolicy, place_adapters
from ..objective import LossHyperParams, combined_loss, loss_gradient
from ..synth_data import SynthSpec, generate_dataset
from .metrics import MetricsReport, compute_metrics
from .optim import AdamState, optimizer_step

log = logging.getLogger(__name__)

_EVAL_BATCH = 32


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data: str | None = None
    synth: SynthSpec | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    placement: PlacementPolicy = field(default_factory=PlacementPolicy)
    lora_rank: int = 4
    lora_alpha: float | None = None
    loss: LossHyperParams = field(default_factory=LossHyperParams)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0
    train_frac: float = 0.8
    placeholders: bool = True
    prior_lora: bool = True
    advanced_objective: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie in (0, 1)")

    @property
    def toggles(self) -> tuple[bool, bool, bool]:
        return (self.placeholders, self.prior_lora, self.advanced_objective)

    def effective_loss(self) -> LossHyperParams:
        """CE-only (lambda_kl = 0, w_ufce = 0, w_ce = 1) when the advanced objective is off."""
        if self.advanced_objective:
            return self.loss
        return LossHyperParams.cross_entropy_only(self.loss.epsilon)

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "synth": None if self.synth is None else self.synth.to_dict(),
            "encoder": self.encoder.to_dict(),
            "placement": self.placement.to_dict(),
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "loss": self.loss.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_opt": self.eps_opt,
            "seed": self.seed,
            "train_frac": self.train_frac,
            "toggles": {"placeholders": self.placeholders, "prior_lora": self.prior_lora,
                        "advanced_objective": self.advanced_objective},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        toggles = raw.pop("toggles", {}) or {}
        kwargs = {}
        if raw.get("synth") is not None:
            kwargs["synth"] = SynthSpec.from_dict(raw.pop("synth"))
        else:
            raw.pop("synth", None)
        if "encoder" in raw:
            kwargs["encoder"] = EncoderConfig.from_dict(raw.pop("encoder"))
        if "placement" in raw:
            kwargs["placement"] = PlacementPolicy(**raw.pop("placement"))
        if "loss" in raw:
            kwargs["loss"] = LossHyperParams(**raw.pop("loss"))
        known = {f.name for f in fields(cls)}
        unknown = (set(raw) | set(toggles)) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs.update(raw)
        kwargs.update(toggles)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Dataset:
    clips: list[ClipTensor]
    metas: list[ClipMeta]

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.label for m in self.metas], dtype=np.int64)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return Dataset([self.clips[i] for i in idx], [self.metas[i] for i in idx])


def load_dataset(config: TrainConfig) -> Dataset:
    if config.synth is not None:
        return Dataset(*generate_dataset(config.synth))
    if config.data is None:
        raise ValueError("config needs either 'data' or 'synth'")
    return Dataset(*read_dataset(config.data))


def subject_disjoint_split(metas: Sequence[ClipMeta], train_frac: float = 0.8,
                           seed: int = 0) -> tuple[list[int], list[int]]:
    """Clip indices (train, eval) such that no subject is in both."""
    subjects = sorted({m.subject_id for m in metas})
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects for a disjoint split, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    n_train = min(max(int(round(train_frac * len(subjects))), 1), len(subjects) - 1)
    train_subjects = {subjects[i] for i in order[:n_train]}
    train = [j for j, m in enumerate(metas) if m.subject_id in train_subjects]
    held = [j for j, m in enumerate(metas) if m.subject_id not in train_subjects]
    return train, held


def model_inputs(model: PriorNetModel, clips: Sequence[ClipTensor]) -> np.ndarray:
    """Stacked frames as the model expects them (placeholders back-filled if disabled)."""
    if not model.placeholders:
        clips = [fill_placeholders(c) for c in clips]
    return np.stack([c.frames for c in clips])


def embed_clips(model: PriorNetModel, clips: Sequence[ClipTensor], chunk: int = 64) -> np.ndarray:
    parts = [model.embed(model_inputs(model, clips[i:i + chunk])) for i in range(0, len(clips), chunk)]
    return np.concatenate(parts)


def predict_logits(model: PriorNetModel, clips: Sequence[ClipTensor]) -> np.ndarray:
    out = [model.forward(model_inputs(model, clips[i:i + _EVAL_BATCH]))
           for i in range(0, len(clips), _EVAL_BATCH)]
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate(model: PriorNetModel, clips: Sequence[ClipTensor], metas: Sequence[ClipMeta]) -> MetricsReport:
    """Argmax predictions against ``meta.label``; full confusion matrix."""
    labels = np.array([m.label for m in metas], dtype=np.int64)
    C = model.cfg.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"dataset labels exceed the model's {C} classes")
    preds = np.argmax(predict_logits(model, clips), axis=1)
    return compute_metrics(labels, preds, C)


def build_model(config: TrainConfig) -> PriorNetModel:
    model = PriorNetModel.build(config.encoder)
    model.placeholders = config.placeholders
    if config.prior_lora:
        place_adapters(model, config.placement, config.lora_rank, config.lora_alpha,
                       seed=config.encoder.seed + 1)
    return model


@dataclass
class TrainResult:
    model: PriorNetModel
    history: list[dict]
    train_idx: list[int]
    eval_idx: list[int]
    checksum: str


_TERMS = ("data_term", "kl_term", "henn", "ufce", "ce", "total")


def train(config: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    """Optimize adapters and head on the training subjects; backbone stays frozen.

    Head-only runs (no adapters) train on cached frozen features, which is the
    same computation as the full forward pass with nothing trainable before the
    head.
    """
    if dataset is None:
        dataset = load_dataset(config)
    if dataset.labels.max() >= config.encoder.num_classes:
        raise ValueError("dataset has more classes than the encoder head")
    train_idx, eval_idx = subject_disjoint_split(dataset.metas, config.train_frac, config.seed)
    model = build_model(config)
    checksum = model.frozen_checksum()
    hyper = config.effective_loss()

    train_clips = [dataset.clips[i] for i in train_idx]
    labels = dataset.labels[train_idx]
    x0 = embed_clips(model, train_clips)
    head_only = not model.adapters
    if head_only:
        feats = np.concatenate([model.features_from_tokens(x0[i:i + _EVAL_BATCH])
                                for i in range(0, len(x0), _EVAL_BATCH)])

    params = model.trainable_parameters()
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history = []
    n = len(train_idx)
    for epoch in range(config.epochs):
        lam = hyper.kl_weight(epoch)
        order = rng.permutation(n)
        sums = dict.fromkeys(_TERMS, 0.0)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            y = labels[batch]
            if head_only:
                feat = feats[batch]
                logits = model.classify(feat)
                cache = {"feat": feat}
            else:
                logits, cache = model.forward_train(x0[batch])
            breakdown = combined_loss(logits, y, hyper, lambda_kl=lam)
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: {breakdown.means()}")
            dlogits = loss_gradient(logits, y, hyper, lambda_kl=lam)
            grads = model.backward(cache, dlogits)
            optimizer_step(params, grads, state, config.learning_rate,
                           config.beta1, config.beta2, config.eps_opt)
            for k in _TERMS:
                sums[k] += getattr(breakdown, k) * len(batch)
        record = {k: sums[k] / n for k in _TERMS}
        record["epoch"] = epoch
        history.append(record)
        log.info("epoch %d total %.5f", epoch, record["total"])

    if model.frozen_checksum() != checksum:
        raise RuntimeError("frozen backbone weights changed during training")
    return TrainResult(model=model, history=history, train_idx=train_idx,
                       eval_idx=eval_idx, checksum=checksum)
