#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import numpy as np
import pytest

import config
import data_pipeline
import nn_models
import tensor_core as tc


def tiny_spec(family='brainnet', name=None, resolution=8, **overrides):
    """
    A narrow two-stage spec of the given family for fast tests.
    """
    settings = {'stage_widths': (4, 8), 'blocks_per_stage': (1, 1), 'num_classes': 3,
                'input_shape': (3, resolution, resolution)}
    if family in ('brainnet', 'dilation'):
        settings['extra_blocks'] = 2
    if family == 'brainnext':
        settings['cardinality'] = 2
    if family == 'dilation':
        settings['dilation_rate'] = 2
    if family == 'densenet_surrogate':
        settings.update(stage_widths=(4,), blocks_per_stage=(2, 2), growth_rate=4)
    settings.update(overrides)
    return nn_models.ModelSpec(name or family, family, **settings)


def check_input_gradient(forward, x, labels, h=1e-5):
    """
    Compare dLoss/dx (summed cross-entropy) against central differences.

    Coordinates whose perturbation flips any ReLU input sign are skipped.
    Returns (max relative error, fraction of coordinates checked).
    """
    labels = np.asarray(labels)

    def evaluate(array):
        inputs = tc.Tensor(array, requires_grad=True)
        loss = tc.softmax_cross_entropy(forward(inputs), labels, reduction='sum')
        masks = [node._parents[0].data.ravel() > 0 for node in tc.Tape.from_output(loss).nodes if node.op == 'relu']
        pattern = np.concatenate(masks) if masks else np.zeros(0, dtype=bool)
        return loss, inputs, pattern

    loss, inputs, pattern = evaluate(np.array(x, dtype=np.float64))
    tc.backward(loss)
    analytic = inputs.grad
    numeric = np.full(x.size, np.nan)
    for k in range(x.size):
        plus, minus = np.array(x, dtype=np.float64), np.array(x, dtype=np.float64)
        plus.flat[k] += h
        minus.flat[k] -= h
        loss_plus, _, pattern_plus = evaluate(plus)
        loss_minus, _, pattern_minus = evaluate(minus)
        if np.array_equal(pattern_plus, pattern) and np.array_equal(pattern_minus, pattern):
            numeric[k] = (loss_plus.item() - loss_minus.item()) / (2 * h)
    checked = ~np.isnan(numeric)
    error = tc.max_relative_error(analytic.ravel()[checked], numeric[checked]) if checked.any() else np.inf
    return error, float(checked.mean())


@pytest.fixture(autouse=True)
def fresh_config():
    config.reset_config()
    yield
    config.reset_config()


@pytest.fixture(scope='session')
def tiny_corpus():
    return data_pipeline.generate_corpus(10, 8, seed=0)


@pytest.fixture(scope='session')
def tiny_variant(tiny_corpus):
    return data_pipeline.make_variant(tiny_corpus, 8, False, seed=0, name='full-noaug')
