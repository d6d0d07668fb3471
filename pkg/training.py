#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import logging
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
from tqdm import tqdm

import nn_models
import tensor_core as tc

TRAINING_PRESETS = {
    'desk': {'learning_rate': 1e-3, 'batch_size': 10, 'max_epochs': 40, 'patience': 6, 'phase': 'single'},
    'desk_two_phase': {'learning_rate': 1e-3, 'batch_size': 10, 'patience': 6, 'phase': 'two_phase',
                       'phase_epochs': 20, 'phase2_lr_divisor': 10.0},
    'long': {'learning_rate': 1e-4, 'batch_size': 10, 'max_epochs': 150, 'patience': 6, 'phase': 'single'},
}
REPORT_COLUMNS = ['epoch', 'phase', 'learning_rate', 'train_loss', 'train_acc', 'val_loss', 'val_acc']


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 10
    max_epochs: int = 40
    patience: int = 6
    phase: str = 'single'
    phase_epochs: int = 20
    phase2_lr_divisor: float = 10.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append(f"learning_rate {self.learning_rate} must be positive")
        if self.batch_size < 1:
            problems.append(f"batch_size {self.batch_size} must be at least 1")
        if self.patience < 1:
            problems.append(f"patience {self.patience} must be at least 1")
        if self.max_epochs < 1 or self.phase_epochs < 1:
            problems.append("max_epochs and phase_epochs must be at least 1")
        if self.phase not in ('single', 'two_phase'):
            problems.append(f"phase '{self.phase}' must be 'single' or 'two_phase'")
        if not self.phase2_lr_divisor > 0:
            problems.append(f"phase2_lr_divisor {self.phase2_lr_divisor} must be positive")
        if problems:
            raise TrainingError("invalid training config: " + "; ".join(problems))
        return self

    def fingerprint(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def config_from_settings(settings, seed=0):
    """
    Build a TrainConfig from a config `training` section: preset first, then overrides.
    """
    settings = dict(settings or {})
    preset = settings.pop('preset', 'desk')
    if preset not in TRAINING_PRESETS:
        raise TrainingError(f"unknown training preset '{preset}'; choose one of {', '.join(TRAINING_PRESETS)}")
    return TrainConfig(**{**TRAINING_PRESETS[preset], **settings, 'seed': seed}).validate()


@dataclass
class AdamState:
    step: int = 0
    m: list = None
    v: list = None


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One bias-corrected Adam update, applied to the parameter tensors in place.
    """
    if len(params) != len(grads):
        raise tc.ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if grad.shape != param.data.shape:
            raise tc.ShapeError(f"gradient {i} has shape {grad.shape}, parameter has {param.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class EarlyStopping:

    def __init__(self, patience, best_loss=math.inf, best_epoch=None):
        self.patience = patience
        self.best_loss = best_loss
        self.best_epoch = best_epoch
        self.wait = 0

    def update(self, epoch, val_loss):
        """Record one epoch's validation loss; True when it is a new best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self):
        return self.wait >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    learning_rate: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    model_name: str
    epochs: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_val_loss: float = math.inf
    wall_time: float = 0.0
    phase_learning_rates: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame([vars(e) for e in self.epochs], columns=REPORT_COLUMNS)

    def write_csv(self, path):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.6f')


def evaluate_loss(model, images, labels):
    logits = nn_models.predict_logits(model, images)
    return tc.softmax_cross_entropy(tc.Tensor(logits), np.asarray(labels)).item()


def evaluate_accuracy(model, images, labels):
    """
    Fraction of images whose argmax logit (lowest index on ties) equals the label.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise TrainingError("cannot evaluate accuracy on an empty set")
    predictions = np.argmax(nn_models.predict_logits(model, images), axis=1)
    return float(np.mean(predictions == labels))


def _phases(model, config):
    if config.phase == 'single':
        return [(1, config.max_epochs, config.learning_rate, 0)]
    return [
        (1, config.phase_epochs, config.learning_rate, model.freeze_boundary()),
        (2, config.phase_epochs, config.learning_rate / config.phase2_lr_divisor, 0),
    ]


def _shuffle_seed(seed, phase, epoch):
    return int(np.random.default_rng([seed, phase, epoch]).integers(2 ** 31))


def _run_epoch(model, variant, config, state, lr, shuffle_seed):
    trainable = model.trainable_parameters()
    total_loss, correct, seen = 0.0, 0, 0
    for images, labels in variant.train_batches(config.batch_size, shuffle_seed):
        logits = model.forward(tc.Tensor(images), record_tape=True, training=True)
        loss = tc.softmax_cross_entropy(logits, labels)
        model.zero_grad()
        tc.backward(loss)
        adam_step(trainable, [p.grad for p in trainable], state, lr,
                  beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
        total_loss += loss.item() * len(labels)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        seen += len(labels)
    return total_loss / seen, correct / seen


def train(model, variant, config, progress=True):
    """
    Train `model` on the variant's train split with Adam and early stopping.

    The best validation epoch is tracked across phases, and its parameters
    are restored at the end of every phase. In two_phase mode the first
    phase freezes the leading parameters and the second unfreezes them at a
    reduced learning rate, starting from the phase-1 best.
    """
    config.validate()
    if tuple(model.spec.input_shape) != variant.input_shape:
        raise TrainingError(f"model '{model.name}' expects {model.spec.input_shape}, "
                            f"variant '{variant.name}' provides {variant.input_shape}")
    for split in ('train', 'val'):
        if len(variant.splits.get(split, ())) == 0:
            raise TrainingError(f"variant '{variant.name}' has an empty {split} split")

    val_images, val_labels = variant.split('val')
    report = TrainReport(model.name)
    start = time.perf_counter()
    epoch_counter = 0
    best, best_loss, best_epoch = model.snapshot(), math.inf, None
    for phase, epochs, lr, frozen_prefix in _phases(model, config):
        model.set_frozen_prefix(frozen_prefix)
        report.phase_learning_rates.append(lr)
        state = AdamState()
        stopper = EarlyStopping(config.patience, best_loss, best_epoch)
        for epoch in tqdm(range(1, epochs + 1), desc=f"Training {model.name} (phase {phase})", disable=not progress):
            train_loss, train_acc = _run_epoch(model, variant, config, state, lr,
                                               _shuffle_seed(config.seed, phase, epoch))
            val_loss = evaluate_loss(model, val_images, val_labels)
            val_acc = evaluate_accuracy(model, val_images, val_labels)
            epoch_counter += 1
            report.epochs.append(EpochRecord(epoch_counter, phase, lr, train_loss, train_acc, val_loss, val_acc))
            logging.info(f"{model.name} phase {phase} epoch {epoch}: train_loss={train_loss:.4f} "
                         f"val_loss={val_loss:.4f} val_acc={val_acc:.3f}")
            if stopper.update(epoch_counter, val_loss):
                best = model.snapshot()
            if stopper.should_stop:
                logging.info(f"Early stopping {model.name} at epoch {epoch_counter} "
                             f"(best epoch {stopper.best_epoch}, val_loss={stopper.best_loss:.4f})")
                break
        model.restore(best)
        best_loss, best_epoch = stopper.best_loss, stopper.best_epoch
    model.set_frozen_prefix(0)

    report.stopped_epoch = epoch_counter
    report.best_val_loss = min(e.val_loss for e in report.epochs)
    report.wall_time = time.perf_counter() - start
    return report