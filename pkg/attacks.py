#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Untargeted l-inf attacks (FGSM and PGD with random start) and the
AdversarialSet produced by attacking a variant's attack split.
"""

import logging
from dataclasses import dataclass, field, asdict
from decimal import Decimal

import numpy as np
from tqdm import tqdm

import cache
import nn_models
import tensor_core as tc

KINDS = ('fgsm', 'pgd')
ALPHA_SCHEDULES = ('fixed', 'eps_over_4', 'eps_over_iters')
ATTACK_BATCH_SIZE = 32


class AttackConfigError(ValueError):
    pass


class ResolutionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilon: float
    alpha_schedule: str = 'eps_over_4'
    alpha: float = None
    iterations: int = 1
    rng_seed: int = 0
    clamp: tuple = (0.0, 1.0)

    def validate(self, allow_zero=True):
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind '{self.kind}' must be one of {', '.join(KINDS)}")
        if not 0.0 <= self.epsilon <= 1.0 or (not allow_zero and self.epsilon == 0):
            bound = '[0, 1]' if allow_zero else '(0, 1]'
            problems.append(f"epsilon {self.epsilon} must lie in {bound}")
        if self.kind == 'pgd':
            if self.alpha_schedule not in ALPHA_SCHEDULES:
                problems.append(f"alpha_schedule '{self.alpha_schedule}' must be one of {', '.join(ALPHA_SCHEDULES)}")
            if self.iterations < 1:
                problems.append(f"iterations {self.iterations} must be at least 1")
            if self.alpha_schedule == 'fixed' and self.alpha is None:
                problems.append("fixed alpha_schedule needs an alpha value")
        lo, hi = self.clamp
        if not lo < hi:
            problems.append(f"clamp {self.clamp} must be an increasing range")
        if problems:
            raise AttackConfigError("invalid attack config: " + "; ".join(problems))
        return self

    @property
    def label(self):
        """Stable identifier used in file names and the matrix CSV."""
        if self.kind == 'fgsm':
            return f"fgsm_eps{self.epsilon:g}"
        schedule = f"alpha{self.alpha:g}" if self.alpha_schedule == 'fixed' else self.alpha_schedule
        return f"pgd_eps{self.epsilon:g}_{schedule}_it{self.iterations}"

    @property
    def step_count(self):
        return self.iterations if self.kind == 'pgd' else 1

    def to_dict(self):
        data = asdict(self)
        data['clamp'] = list(self.clamp)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['clamp'] = tuple(data.get('clamp', (0.0, 1.0)))
        return cls(**data)


def resolve_alpha(config):
    """
    PGD step size for the config's schedule, computed in decimal so that
    e.g. 0.03 / 4 gives exactly 0.0075.
    """
    if config.kind != 'pgd':
        raise AttackConfigError(f"step size is only defined for pgd, not '{config.kind}'")
    epsilon = Decimal(repr(float(config.epsilon)))
    if config.alpha_schedule == 'eps_over_4':
        value = epsilon / 4
    elif config.alpha_schedule == 'eps_over_iters':
        if config.iterations < 1:
            raise AttackConfigError(f"iterations {config.iterations} must be at least 1")
        value = epsilon / Decimal(config.iterations)
    elif config.alpha_schedule == 'fixed':
        if config.alpha is None:
            raise AttackConfigError("fixed alpha_schedule needs an alpha value")
        value = Decimal(repr(float(config.alpha)))
    else:
        raise AttackConfigError(f"unknown alpha_schedule '{config.alpha_schedule}'")
    if value <= 0:
        raise AttackConfigError(f"resolved step size {value} must be positive")
    return float(value)


def input_gradient(model, x, y):
    """
    Gradient of the summed per-example loss w.r.t. the input batch.
    """
    inputs = tc.Tensor(x, requires_grad=True)
    logits = model.forward(inputs, record_tape=True, training=False)
    tc.backward(tc.softmax_cross_entropy(logits, y, reduction='sum'))
    return inputs.grad


def _check_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise tc.ShapeError(f"batch has {x.shape[0]} images but {y.shape[0]} labels")
    return x, y


def fgsm(model, x, y, epsilon, clamp=(0.0, 1.0)):
    x, y = _check_batch(x, y)
    if not 0.0 <= epsilon <= 1.0:
        raise AttackConfigError(f"epsilon {epsilon} must lie in [0, 1]")
    if epsilon == 0:
        return x.copy()
    grad = input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(grad), clamp[0], clamp[1])


def pgd(model, x, y, config, example_ids=None, on_iterate=None):
    """
    Projected gradient descent with a uniform random start in the epsilon box.

    Example i draws its start from (config.rng_seed, example_ids[i]), so a
    batch split any way gives the same result. Every iterate is clipped to
    the epsilon box and then to the clamp range; on_iterate(t, x_t) sees each one.
    """
    x, y = _check_batch(x, y)
    config.validate()
    if config.kind != 'pgd':
        raise AttackConfigError(f"pgd() got a '{config.kind}' config")
    if config.epsilon == 0:
        return x.copy()
    alpha = resolve_alpha(config)
    eps = config.epsilon
    lo, hi = config.clamp
    if example_ids is None:
        example_ids = range(len(x))
    noise = np.stack([np.random.default_rng([config.rng_seed, int(i)]).uniform(-eps, eps, size=x.shape[1:])
                      for i in example_ids])
    box_lo, box_hi = x - eps, x + eps
    x_adv = np.clip(x + noise, lo, hi)
    if on_iterate:
        on_iterate(0, x_adv)
    for t in range(1, config.iterations + 1):
        step = x_adv + alpha * np.sign(input_gradient(model, x_adv, y))
        x_adv = np.clip(np.clip(step, box_lo, box_hi), lo, hi)
        if on_iterate:
            on_iterate(t, x_adv)
    return x_adv


def attack_batch(model, x, y, config, example_ids=None):
    if config.kind == 'fgsm':
        return fgsm(model, x, y, config.epsilon, clamp=config.clamp)
    return pgd(model, x, y, config, example_ids=example_ids)


def perturbation_stats(model, originals, adversarial, labels):
    """
    l-inf/l2 size of the perturbations and the source model's fooling rate.
    """
    delta = (adversarial - originals).reshape(len(originals), -1)
    clean_pred = np.argmax(nn_models.predict_logits(model, originals), axis=1)
    adv_pred = np.argmax(nn_models.predict_logits(model, adversarial), axis=1)
    correct = clean_pred == labels
    fooled = correct & (adv_pred != labels)
    return {
        'mean_linf': float(np.abs(delta).max(axis=1).mean()),
        'max_linf': float(np.abs(delta).max()),
        'mean_l2': float(np.sqrt((delta ** 2).sum(axis=1)).mean()),
        'fooling_rate': float(fooled.sum() / correct.sum()) if correct.any() else 0.0,
    }


@dataclass
class AdversarialSet:
    source_model: str
    config: AttackConfig
    examples: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    corpus_hash: str = ''
    variant: str = ''
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def max_violation(self, originals):
        """Largest amount by which any example leaves the epsilon box or the clamp range."""
        lo, hi = self.config.clamp
        box = np.abs(self.examples - originals).max() - self.config.epsilon
        clamp = max(lo - self.examples.min(), self.examples.max() - hi)
        return float(max(box, clamp, 0.0))

    def save(self, path):
        header = {
            'kind': 'adversarial_set',
            'source_model': self.source_model,
            'config': self.config.to_dict(),
            'corpus_hash': self.corpus_hash,
            'variant': self.variant,
            'indices': [int(i) for i in self.indices],
            'stats': self.stats,
        }
        cache.write_container(path, header, {'examples': self.examples, 'labels': self.labels})

    @classmethod
    def load(cls, path):
        header, arrays = cache.read_container(path)
        if header.get('kind') != 'adversarial_set':
            raise IOError(f"'{path}' does not hold an adversarial set")
        return cls(header['source_model'], AttackConfig.from_dict(header['config']), arrays['examples'],
                   arrays['labels'], np.array(header['indices'], dtype=np.int64), header.get('corpus_hash', ''),
                   header.get('variant', ''), header.get('stats', {}))


def generate_adversarial_set(source_model, variant, config, batch_size=ATTACK_BATCH_SIZE, progress=False):
    """
    Attack every image of the variant's attack split against its true label.
    """
    if tuple(source_model.spec.input_shape) != variant.input_shape:
        raise ResolutionMismatchError(f"source '{source_model.name}' expects {source_model.spec.input_shape}, "
                                      f"variant '{variant.name}' provides {variant.input_shape}")
    config.validate()
    images, labels = variant.split('attack')
    indices = variant.splits['attack']
    chunks = []
    for start in tqdm(range(0, len(images), batch_size), desc=f"{config.label} on {source_model.name}",
                      disable=not progress):
        stop = start + batch_size
        chunks.append(attack_batch(source_model, images[start:stop], labels[start:stop], config,
                                   example_ids=indices[start:stop]))
    examples = np.concatenate(chunks, axis=0) if chunks else images.copy()
    stats = perturbation_stats(source_model, images, examples, labels)
    logging.info(f"Generated {len(examples)} {config.label} examples from {source_model.name} on {variant.name}: "
                 f"max_linf={stats['max_linf']:.4f} fooling_rate={stats['fooling_rate']:.3f}")
    return AdversarialSet(source_model.name, config, examples, labels.copy(), indices.copy(), variant.corpus_hash,
                          variant.name, stats)
