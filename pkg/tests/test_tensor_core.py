#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import math

import numpy as np
import pytest

import tensor_core as tc
from conftest import check_input_gradient


def direct_conv(x, weight, bias, stride, dilation, groups, padding):
    """Loop-over-every-tap reference convolution."""
    n, c, h, w = x.shape
    o, cin_g, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - ((kh - 1) * dilation + 1)) // stride + 1
    out_w = (w + 2 * padding - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    cout_g = o // groups
    for b in range(n):
        for oc in range(o):
            g = oc // cout_g
            for y in range(out_h):
                for z in range(out_w):
                    total = bias[oc]
                    for ci in range(cin_g):
                        for i in range(kh):
                            for j in range(kw):
                                total += weight[oc, ci, i, j] * xp[b, g * cin_g + ci, y * stride + i * dilation,
                                                                   z * stride + j * dilation]
                    out[b, oc, y, z] = total
    return out


def test_conv2d_unit_kernel():
    """A 1x1 kernel of 2.0 doubles an all-ones image."""
    out = tc.conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 2.0)


def test_conv2d_dilated_taps():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 5, 5))
    weight = rng.normal(size=(1, 1, 3, 3))
    out = tc.conv2d(x, weight, dilation=2)
    assert out.shape == (1, 1, 1, 1)
    expected = sum(weight[0, 0, i, j] * x[0, 0, 2 * i, 2 * j] for i in range(3) for j in range(3))
    assert abs(out.data[0, 0, 0, 0] - expected) < 1e-12


def test_grouped_conv_matches_per_channel_convs():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 6, 6))
    weight = rng.normal(size=(4, 1, 3, 3))
    grouped = tc.conv2d(x, weight, groups=4, padding=1).data
    for ch in range(4):
        single = tc.conv2d(x[:, ch:ch + 1], weight[ch:ch + 1], padding=1).data
        assert np.allclose(grouped[:, ch:ch + 1], single, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2, 3, 4])
@pytest.mark.parametrize("groups", [1, 2, 4])
def test_conv2d_matches_direct_loops(stride, dilation, groups):
    rng = np.random.default_rng(stride * 100 + dilation * 10 + groups)
    x = rng.normal(size=(2, 4, 11, 11))
    weight = rng.normal(size=(4, 4 // groups, 3, 3))
    bias = rng.normal(size=4)
    out = tc.conv2d(x, weight, bias, stride=stride, dilation=dilation, groups=groups, padding=1)
    expected = direct_conv(x, weight, bias, stride, dilation, groups, 1)
    assert out.shape == expected.shape
    assert np.max(np.abs(out.data - expected)) < 1e-10


@pytest.mark.parametrize("size,kernel,stride,dilation,padding", [
    (11, 3, 1, 1, 0), (11, 3, 2, 1, 1), (11, 3, 2, 3, 2), (8, 1, 2, 1, 0), (9, 3, 1, 4, 4),
])
def test_conv2d_output_extent_formula(size, kernel, stride, dilation, padding):
    x = np.zeros((1, 2, size, size))
    out = tc.conv2d(x, np.zeros((3, 2, kernel, kernel)), stride=stride, dilation=dilation, padding=padding)
    expected = math.floor((size + 2 * padding - ((kernel - 1) * dilation + 1)) / stride) + 1
    assert out.shape == (1, 3, expected, expected)


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 6, 6))
    weight = tc.Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
    bias = tc.Tensor(rng.normal(size=4), requires_grad=True)
    inputs = tc.Tensor(x, requires_grad=True)

    def loss_of(xv, wv, bv):
        return float(np.sum(tc.conv2d(xv, wv, bv, stride=2, dilation=2, groups=2, padding=2).data ** 2))

    out = tc.conv2d(inputs, weight, bias, stride=2, dilation=2, groups=2, padding=2)
    tc.backward(tc.sum_all(tc.mul(out, out)))
    assert tc.max_relative_error(inputs.grad, tc.numerical_gradient(lambda a: loss_of(a, weight.data, bias.data), x)) < 1e-6
    assert tc.max_relative_error(weight.grad, tc.numerical_gradient(lambda a: loss_of(x, a, bias.data), weight.data)) < 1e-6
    assert tc.max_relative_error(bias.grad, tc.numerical_gradient(lambda a: loss_of(x, weight.data, a), bias.data)) < 1e-6


def test_conv2d_groups_must_divide_channels():
    with pytest.raises(tc.GroupsError, match="C=3"):
        tc.conv2d(np.zeros((1, 3, 5, 5)), np.zeros((4, 1, 3, 3)), groups=2)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(tc.ShapeError, match="height"):
        tc.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), dilation=2)


def test_conv2d_names_bad_weight_dimension():
    with pytest.raises(tc.ShapeError, match="dimension 1"):
        tc.conv2d(np.zeros((1, 4, 5, 5)), np.zeros((2, 3, 3, 3)))


def test_relu_values_and_gradient_at_zero():
    x = tc.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = tc.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    tc.backward(tc.sum_all(y))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative():
    x = tc.Tensor(-np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
    y = tc.relu(x)
    tc.backward(tc.sum_all(y))
    assert np.all(y.data == 0.0)
    assert np.all(x.grad == 0.0)


def test_relu_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    w = rng.normal(size=(4, 5))
    inputs = tc.Tensor(x, requires_grad=True)
    tc.backward(tc.sum_all(tc.mul(tc.relu(inputs), w)))
    numeric = tc.numerical_gradient(lambda a: float(np.sum(np.maximum(a, 0) * w)), x)
    assert tc.max_relative_error(inputs.grad, numeric) < 1e-6


def test_cross_entropy_saturated_correct_class():
    loss = tc.softmax_cross_entropy(np.array([[1000.0, 0.0, 0.0]]), [0])
    assert loss.item() < 1e-9


@pytest.mark.parametrize("label", [0, 1, 2])
def test_cross_entropy_uniform_logits(label):
    loss = tc.softmax_cross_entropy(np.zeros((1, 3)), [label])
    assert abs(loss.item() - math.log(3)) < 1e-12


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    inputs = tc.Tensor(logits, requires_grad=True)
    tc.backward(tc.softmax_cross_entropy(inputs, labels))
    expected = tc.softmax(logits)
    expected[np.arange(5), labels] -= 1.0
    assert np.allclose(inputs.grad, expected / 5, atol=1e-15)
    numeric = tc.numerical_gradient(lambda a: tc.softmax_cross_entropy(a, labels).item(), logits)
    assert tc.max_relative_error(inputs.grad, numeric) < 1e-6


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(tc.LabelError):
        tc.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


def test_softmax_rows_sum_to_one_and_loss_nonnegative():
    rng = np.random.default_rng(5)
    logits = rng.normal(scale=50.0, size=(20, 4))
    assert np.all(np.abs(tc.softmax(logits).sum(axis=1) - 1.0) < 1e-12)
    losses = tc.softmax_cross_entropy(logits, rng.integers(0, 4, size=20), reduction='none')
    assert np.all(losses.data >= 0.0)


def test_backward_scalar_multiple():
    x = tc.Tensor(2.0, requires_grad=True)
    tc.backward(tc.mul(x, 3.0))
    assert x.grad == 3.0


def test_backward_composite_positive_branch():
    w = tc.Tensor(2.0, requires_grad=True)
    x = tc.Tensor(1.0, requires_grad=True)
    b = tc.Tensor(-1.0, requires_grad=True)
    tc.backward(tc.relu(w * x + b))
    assert x.grad == 2.0
    assert w.grad == 1.0


def test_backward_accumulates_until_reset():
    x = tc.Tensor([1.0, 2.0], requires_grad=True)
    tc.backward(tc.sum_all(x * 3.0))
    tc.backward(tc.sum_all(x * 3.0))
    assert x.grad.tolist() == [6.0, 6.0]
    x.zero_grad()
    tc.backward(tc.sum_all(x * 3.0))
    assert x.grad.tolist() == [3.0, 3.0]


def test_backward_requires_scalar():
    x = tc.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(tc.BackwardError):
        tc.backward(x * 2.0)


def test_tape_is_topologically_ordered():
    x = tc.Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    z = tc.sum_all(tc.add(y, x))
    tape = tc.backward(z)
    position = {id(node): k for k, node in enumerate(tape.nodes)}
    for node, parents, _ in tape.records:
        assert all(position[id(p)] < position[id(node)] for p in parents if p.requires_grad)
    assert len(position) == len(tape.nodes)


def test_no_grad_records_nothing():
    x = tc.Tensor(np.ones(2), requires_grad=True)
    with tc.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert tc.is_grad_enabled()


def test_small_network_input_gradient():
    """conv -> norm -> relu -> pool -> conv -> relu -> gap -> dense, eval-mode statistics."""
    rng = np.random.default_rng(6)
    w1 = tc.normal((4, 3, 3, 3), std=0.5, seed=rng)
    w2 = tc.normal((6, 4, 3, 3), std=0.5, seed=rng)
    head = tc.normal((6, 3), std=0.5, seed=rng)
    running_mean, running_var = np.full(4, 0.1), np.full(4, 2.0)

    def forward(x):
        h = tc.conv2d(x, w1, padding=1)
        h = tc.relu(tc.channel_norm(h, np.ones(4), np.zeros(4), running_mean, running_var))
        h = tc.max_pool2d(h, 2)
        h = tc.relu(tc.conv2d(h, w2, padding=1))
        return tc.dense(tc.global_avg_pool(h), head)

    x = rng.uniform(size=(1, 3, 8, 8))
    error, checked = check_input_gradient(forward, x, [1])
    assert checked > 0.9
    assert error < 1e-4


def test_concat_and_pool_gradients():
    rng = np.random.default_rng(7)
    a = tc.Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    b = tc.Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    joined = tc.concat([a, b], axis=1)
    assert joined.shape == (2, 5, 4, 4)
    tc.backward(tc.sum_all(tc.global_avg_pool(joined)))
    assert np.allclose(a.grad, 1.0 / 16)
    assert np.allclose(b.grad, 1.0 / 16)


def test_channel_norm_eval_is_per_example():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3, 5, 5))
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    batch = tc.channel_norm(x, np.ones(3), np.zeros(3), mean, var).data
    single = tc.channel_norm(x[2:3], np.ones(3), np.zeros(3), mean, var).data
    assert np.array_equal(batch[2:3], single)


def test_channel_norm_training_updates_running_statistics():
    x = np.random.default_rng(9).normal(loc=2.0, size=(8, 2, 4, 4))
    running_mean, running_var = np.zeros(2), np.ones(2)
    out = tc.channel_norm(x, np.ones(2), np.zeros(2), running_mean, running_var, training=True)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    assert np.allclose(running_mean, 0.1 * x.mean(axis=(0, 2, 3)))


def test_seeded_fills_are_deterministic():
    assert np.array_equal(tc.uniform((3, 4), seed=11).data, tc.uniform((3, 4), seed=11).data)
    assert np.array_equal(tc.normal((3, 4), seed=11).data, tc.normal((3, 4), seed=11).data)
    assert not np.array_equal(tc.normal((3, 4), seed=11).data, tc.normal((3, 4), seed=12).data)


def _training_network_loss(params, labels):
    """conv -> training-mode norm -> gap -> dense -> cross-entropy, fresh running buffers per call."""
    h = tc.conv2d(params['input'], params['conv'], padding=1)
    h = tc.channel_norm(h, params['norm.weight'], params['norm.bias'], np.zeros(4), np.ones(4), training=True)
    logits = tc.dense(tc.global_avg_pool(h), params['dense.weight'], params['dense.bias'])
    return tc.softmax_cross_entropy(logits, labels)


@pytest.mark.parametrize("name", ['input', 'conv', 'norm.weight', 'norm.bias', 'dense.weight', 'dense.bias'])
def test_training_network_parameter_gradients(name):
    rng = np.random.default_rng(10)
    arrays = {
        'input': rng.uniform(size=(4, 3, 5, 5)),
        'conv': rng.normal(0.0, 0.5, size=(4, 3, 3, 3)),
        'norm.weight': rng.uniform(0.5, 1.5, size=4),
        'norm.bias': rng.normal(0.0, 0.1, size=4),
        'dense.weight': rng.normal(0.0, 0.5, size=(4, 3)),
        'dense.bias': rng.normal(0.0, 0.1, size=3),
    }
    labels = np.array([0, 1, 2, 1])
    params = {key: tc.Tensor(value, requires_grad=True) for key, value in arrays.items()}
    tc.backward(_training_network_loss(params, labels))
    numeric = tc.numerical_gradient(lambda value: _training_network_loss({**arrays, name: value}, labels).item(),
                                    arrays[name])
    assert np.abs(numeric).max() > 1e-6
    assert tc.max_relative_error(params[name].grad, numeric) < 1e-4


def test_dense_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    x, weight, bias = rng.normal(size=(5, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    labels = np.array([0, 2, 1, 1, 0])

    def loss(x_, weight_, bias_):
        return tc.softmax_cross_entropy(tc.dense(x_, weight_, bias_), labels, reduction='sum')

    tensors = [tc.Tensor(a, requires_grad=True) for a in (x, weight, bias)]
    tc.backward(loss(*tensors))
    numeric = [
        tc.numerical_gradient(lambda v: loss(v, weight, bias).item(), x),
        tc.numerical_gradient(lambda v: loss(x, v, bias).item(), weight),
        tc.numerical_gradient(lambda v: loss(x, weight, v).item(), bias),
    ]
    for tensor, expected in zip(tensors, numeric):
        assert tc.max_relative_error(tensor.grad, expected) < 1e-6
