"""Optimization loop, evaluation, matched-accuracy early stopping.

Everything downstream of (config, seed) is deterministic: parameter init and
epoch shuffles consume a single seeded generator in a fixed order, batch
reduction order is fixed, and checkpoints carry the generator state so a
resumed run continues the exact trajectory. The only nondeterministic metric
field is measured wall time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig, config_fingerprint, train_config_to_dict
from .data import ImageSet, load_image_set
from .model import (ModelConfig, _margin_loss_multi, backward_batch,
                    forward_batch, init_params, one_hot)
from .ops import NonFiniteError
from .optim import AdamState, TrainingDiverged, adam_step
from .routing import RoutingConfig, agreement_objective

METRICS_COLUMNS = ("epoch", "split", "accuracy", "margin_loss", "recon_loss",
                   "target_agreement", "nontarget_agreement", "wall_seconds")


@dataclass
class MetricsRow:
    epoch: float
    split: str
    accuracy: float
    margin_loss: float
    recon_loss: float
    target_agreement: float
    nontarget_agreement: float
    wall_seconds: float


@dataclass
class EvalResult:
    accuracy: float
    margin_loss: float
    recon_loss: float
    target_agreement: float
    nontarget_agreement: float


def _as_float_images(images: np.ndarray, dtype) -> np.ndarray:
    return (images.astype(dtype) / 255.0).astype(dtype, copy=False)


def _top2_set_match(lengths: np.ndarray, l1: np.ndarray,
                    l2: np.ndarray) -> np.ndarray:
    """Correct iff the two longest class capsules equal the two labels as a set."""
    top2 = np.argpartition(lengths, -2, axis=-1)[:, -2:]
    top2 = np.sort(top2, axis=-1)
    truth = np.sort(np.stack([l1, l2], axis=-1), axis=-1)
    return (top2 == truth).all(axis=-1)


def evaluate(params: dict, model_cfg: ModelConfig, routing_cfg: RoutingConfig,
             dataset: ImageSet, batch_size: int = 64,
             dtype=np.float64) -> EvalResult:
    """Forward-only metrics over a set; decoder masked by argmax prediction."""
    if dataset.images.shape[1] != model_cfg.input_hw:
        raise ValueError(f"dataset geometry {dataset.images.shape[1:]} does "
                         f"not match model input_hw={model_cfg.input_hw}")
    n = len(dataset)
    correct = 0
    margin_sum = recon_sum = target_sum = nontarget_sum = 0.0
    two_label = dataset.labels2 is not None
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        imgs = _as_float_images(dataset.images[lo:hi], dtype)
        labels = dataset.labels[lo:hi]
        cache = forward_batch(imgs, params, model_cfg, routing_cfg,
                              targets=None,
                              targets2=dataset.labels2[lo:hi] if two_label
                              else None)
        hot = one_hot(labels, model_cfg.class_count, dtype=cache.v.dtype)
        if two_label:
            labels2 = dataset.labels2[lo:hi]
            hot = np.maximum(hot, one_hot(labels2, model_cfg.class_count,
                                          dtype=cache.v.dtype))
            correct += int(_top2_set_match(cache.lengths, labels,
                                           labels2).sum())
            t1, nt1, _ = agreement_objective(cache.votes, cache.coupling,
                                             labels)
            t2, _, _ = agreement_objective(cache.votes, cache.coupling,
                                           labels2)
            target = t1 + t2
            nontarget = (t1 + nt1) - target
        else:
            correct += int((cache.lengths.argmax(axis=-1) == labels).sum())
            target, nontarget, _ = agreement_objective(cache.votes,
                                                       cache.coupling, labels)
        margin_sum += float(_margin_loss_multi(cache.lengths, hot).sum())
        recon_sum += float(cache.recon_sse.sum())
        target_sum += float(target.sum())
        nontarget_sum += float(nontarget.sum())
    return EvalResult(accuracy=correct / n, margin_loss=margin_sum / n,
                      recon_loss=recon_sum / n, target_agreement=target_sum / n,
                      nontarget_agreement=nontarget_sum / n)


def _load_split(cfg: TrainConfig, which: str) -> ImageSet:
    images = getattr(cfg, f"{which}_images")
    labels = getattr(cfg, f"{which}_labels")
    labels2 = getattr(cfg, f"{which}_labels2") or None
    if not images or not labels:
        raise FileNotFoundError(f"{which} dataset paths not configured")
    return load_image_set(images, labels, labels2)


def train(cfg: TrainConfig, resume: Checkpoint | None = None,
          train_set: ImageSet | None = None, test_set: ImageSet | None = None,
          log=None):
    """Run the optimization loop; returns (Checkpoint, list[MetricsRow]).

    Datasets come from the configured IDX paths unless passed directly.
    With ``early_stop_target_accuracy`` set, training halts the first time
    clean test accuracy reaches the target (checked at epoch ends, plus every
    ``early_stop_check_batches`` batches when configured).
    """
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    if train_set is None:
        train_set = _load_split(cfg, "train")
    if test_set is None:
        test_set = _load_split(cfg, "test")
    fingerprint = config_fingerprint(train_config_to_dict(cfg))

    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        if resume.config_fingerprint and resume.config_fingerprint != fingerprint:
            raise ValueError("checkpoint was produced by a different config")
        params = {k: v.astype(dtype, copy=True) for k, v in resume.params.items()}
        adam = AdamState(params)
        adam.m = {k: v.astype(dtype, copy=True) for k, v in resume.adam_m.items()}
        adam.v = {k: v.astype(dtype, copy=True) for k, v in resume.adam_v.items()}
        adam.t = resume.adam_t
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        params = init_params(cfg.model, cfg.routing, rng, dtype)
        adam = AdamState(params)
        start_epoch = 0

    n = len(train_set)
    train_f = _as_float_images(train_set.images, dtype)
    two_label = train_set.labels2 is not None
    metrics: list[MetricsRow] = []
    t_start = time.monotonic()
    target_acc = cfg.early_stop_target_accuracy
    check_every = cfg.early_stop_check_batches
    stopped = False
    epoch_done = start_epoch

    def record(epoch_value: float):
        for split, dataset in (("train", train_set), ("test", test_set)):
            res = evaluate(params, cfg.model, cfg.routing, dataset,
                           cfg.batch_size, dtype)
            metrics.append(MetricsRow(epoch_value, split, res.accuracy,
                                      res.margin_loss, res.recon_loss,
                                      res.target_agreement,
                                      res.nontarget_agreement,
                                      time.monotonic() - t_start))
            if log:
                log(metrics[-1])
        return metrics[-1]  # the test row

    for epoch in range(start_epoch, cfg.epochs):
        perm = rng.permutation(n)
        batch_count = (n + cfg.batch_size - 1) // cfg.batch_size
        for b in range(batch_count):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            try:
                cache = forward_batch(
                    train_f[idx], params, cfg.model, cfg.routing,
                    targets=train_set.labels[idx],
                    targets2=train_set.labels2[idx] if two_label else None)
                if not np.isfinite(cache.total_loss):
                    raise TrainingDiverged(f"loss became non-finite at epoch "
                                           f"{epoch}, batch {b}")
                grads = backward_batch(cache, params, cfg.model, cfg.routing)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch}, "
                                       f"batch {b}: {exc}") from exc
            adam_step(params, grads, adam, cfg.learning_rate, cfg.beta1,
                      cfg.beta2, cfg.adam_epsilon)
            if (target_acc is not None and check_every
                    and (b + 1) % check_every == 0 and b + 1 < batch_count):
                res = evaluate(params, cfg.model, cfg.routing, test_set,
                               cfg.batch_size, dtype)
                if res.accuracy >= target_acc:
                    row = record(round(epoch + (b + 1) / batch_count, 4))
                    stopped = True
                    break
        if stopped:
            epoch_done = epoch + 1
            break
        epoch_done = epoch + 1
        test_row = record(float(epoch + 1))
        if target_acc is not None and test_row.accuracy >= target_acc:
            stopped = True
            break

    ckpt = Checkpoint(params=params, adam_m=adam.m, adam_v=adam.v,
                      adam_t=adam.t, epoch=epoch_done,
                      config_fingerprint=fingerprint,
                      rng_state=rng.bit_generator.state,
                      config=train_config_to_dict(cfg))
    return ckpt, metrics
