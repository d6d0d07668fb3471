#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Desk-scale image classifiers built from a declarative ModelSpec.

Families:
  brainnet            residual stages of basic blocks plus two extra blocks in the final stage
  brainnext           bottleneck blocks whose 3x3 convolution is split into `cardinality` paths
  dilation            brainnet with the two extra blocks dilated by `dilation_rate`
  densenet_surrogate  two channel-concatenating dense blocks joined by a pooled transition
"""

import logging
import math
import time
from dataclasses import dataclass, asdict

import numpy as np
from fuzzywuzzy import process

import cache
import tensor_core as tc

FAMILIES = ('brainnet', 'brainnext', 'dilation', 'densenet_surrogate')
DILATION_RATES = (1, 2, 3, 4)
DESK_WIDTHS = (16, 32, 64)
DESK_CARDINALITY = 4
FREEZE_FRACTION = 0.75
SUGGESTION_THRESHOLD = 60


class InvalidSpecError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid model spec: " + "; ".join(self.violations))


class CheckpointError(IOError):
    pass


class UnknownModelError(KeyError):
    """
    Unknown registry name; the message lists the registry and the closest match.
    """

    def __init__(self, name, known):
        self.name = name
        self.known = list(known)
        best_match = process.extractOne(name, self.known) if self.known else None
        self.suggestion = best_match[0] if best_match and best_match[1] >= SUGGESTION_THRESHOLD else None
        message = f"unknown model '{name}'; registry entries: {', '.join(self.known)}"
        if self.suggestion:
            message += f" (did you mean '{self.suggestion}'?)"
        super().__init__(message)

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: str
    stage_widths: tuple = DESK_WIDTHS
    blocks_per_stage: tuple = (2, 2, 2)
    cardinality: int = 1
    dilation_rate: int = 1
    num_classes: int = 3
    input_shape: tuple = (3, 64, 64)
    extra_blocks: int = 0
    growth_rate: int = 8

    def violations(self):
        """
        List every constraint this spec breaks (empty when valid).
        """
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"family '{self.family}' is not one of {', '.join(FAMILIES)}")
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            problems.append(f"stage_widths {self.stage_widths} must be non-empty and positive")
        if not self.blocks_per_stage or any(b < 1 for b in self.blocks_per_stage):
            problems.append(f"blocks_per_stage {self.blocks_per_stage} must be non-empty and positive")
        if self.family != 'densenet_surrogate' and len(self.stage_widths) != len(self.blocks_per_stage):
            problems.append(f"{len(self.stage_widths)} stage_widths but {len(self.blocks_per_stage)} blocks_per_stage")
        if self.cardinality < 1:
            problems.append(f"cardinality {self.cardinality} must be positive")
        elif self.family == 'brainnext':
            for width in self.stage_widths:
                if width % self.cardinality:
                    problems.append(f"cardinality {self.cardinality} does not divide stage width {width}")
        elif self.cardinality != 1:
            problems.append(f"cardinality must be 1 for family '{self.family}'")
        if self.dilation_rate not in DILATION_RATES:
            problems.append(f"dilation_rate {self.dilation_rate} is not one of {DILATION_RATES}")
        elif self.dilation_rate != 1 and self.family != 'dilation':
            problems.append(f"dilation_rate must be 1 for family '{self.family}'")
        if self.family == 'dilation' and self.extra_blocks < 1:
            problems.append("dilation family needs extra_blocks to dilate")
        if self.extra_blocks < 0:
            problems.append(f"extra_blocks {self.extra_blocks} must be non-negative")
        if self.family == 'densenet_surrogate' and self.extra_blocks:
            problems.append("densenet_surrogate takes no extra residual blocks")
        if self.family == 'densenet_surrogate' and self.growth_rate < 1:
            problems.append(f"growth_rate {self.growth_rate} must be positive")
        if self.num_classes < 1:
            problems.append(f"num_classes {self.num_classes} must be positive")
        if len(self.input_shape) != 3 or any(e < 1 for e in self.input_shape):
            problems.append(f"input_shape {self.input_shape} must be (C, H, W) with positive extents")
        return problems

    def to_dict(self):
        data = asdict(self)
        for key in ('stage_widths', 'blocks_per_stage', 'input_shape'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ('stage_widths', 'blocks_per_stage', 'input_shape'):
            data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class BlockPlan:
    name: str
    stage: int
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1


def block_plan(spec):
    """
    Ordered blocks of the network body; parameter creation and forward both walk it.
    """
    plan = []
    channels = spec.stage_widths[0]
    if spec.family == 'densenet_surrogate':
        last = len(spec.blocks_per_stage) - 1
        for stage, layers in enumerate(spec.blocks_per_stage):
            for layer in range(layers):
                plan.append(BlockPlan(f"dense{stage}.layer{layer}", stage, 'dense_layer', channels, spec.growth_rate))
                channels += spec.growth_rate
            if stage != last:
                plan.append(BlockPlan(f"dense{stage}.transition", stage, 'transition', channels, channels // 2))
                channels //= 2
        return plan

    kind = 'bottleneck' if spec.family == 'brainnext' else 'basic'
    last = len(spec.stage_widths) - 1
    for stage, (width, count) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
        total = count + (spec.extra_blocks if stage == last else 0)
        for index in range(total):
            stride = 2 if stage > 0 and index == 0 else 1
            # only the appended blocks of the final stage are dilated
            dilation = spec.dilation_rate if stage == last and index >= count else 1
            plan.append(BlockPlan(f"stage{stage}.block{index}", stage, kind, channels, width,
                                  stride=stride, dilation=dilation, groups=spec.cardinality))
            channels = width
    return plan


def output_channels(spec):
    plan = block_plan(spec)
    if spec.family == 'densenet_surrogate':
        channels = spec.stage_widths[0]
        for block in plan:
            channels = channels + block.out_channels if block.kind == 'dense_layer' else block.out_channels
        return channels
    return plan[-1].out_channels


class ModelInstance:
    """
    A ModelSpec plus its named parameters (ordered), normalization buffers and freeze boundary.
    """

    def __init__(self, spec, parameters, buffers, seed=0, frozen_prefix=0):
        self.spec = spec
        self.parameters = dict(parameters)
        self.buffers = dict(buffers)
        self.seed = seed
        self.blocks = block_plan(spec)
        self.frozen_prefix = 0
        self.set_frozen_prefix(frozen_prefix)

    @property
    def name(self):
        return self.spec.name

    def set_frozen_prefix(self, count):
        if not 0 <= count <= len(self.parameters):
            raise ValueError(f"frozen_prefix {count} outside [0, {len(self.parameters)}]")
        self.frozen_prefix = count

    def freeze_boundary(self):
        return int(math.floor(FREEZE_FRACTION * len(self.parameters)))

    def parameter_list(self):
        return list(self.parameters.values())

    def trainable_parameters(self):
        return self.parameter_list()[self.frozen_prefix:]

    def zero_grad(self):
        for param in self.parameters.values():
            param.zero_grad()

    def snapshot(self):
        """Copy of all parameter and buffer arrays."""
        return ({k: p.data.copy() for k, p in self.parameters.items()},
                {k: b.copy() for k, b in self.buffers.items()})

    def restore(self, snapshot):
        params, buffers = snapshot
        for key, data in params.items():
            self.parameters[key].data[...] = data
        for key, data in buffers.items():
            self.buffers[key][...] = data

    def forward(self, batch, record_tape=False, training=False):
        """
        Logits [N, num_classes] for a [N,C,H,W] batch.

        Outside training the parameters enter as constants, so gradients only
        reach the input and the model itself is never written to.
        """
        x = batch if isinstance(batch, tc.Tensor) else tc.Tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise tc.ShapeError(f"model '{self.name}' expects input [N,{','.join(map(str, self.spec.input_shape))}], "
                                f"got {x.shape}")
        if record_tape:
            return self._runner(training).network(x)
        with tc.no_grad():
            return self._runner(training).network(x)

    __call__ = forward

    def _runner(self, training):
        if training:
            weights = self.parameters
        else:
            weights = {k: tc.Tensor(p.data) for k, p in self.parameters.items()}
        return _Runner(self, weights, training)


class _Runner:

    def __init__(self, model, weights, training):
        self.model = model
        self.spec = model.spec
        self.weights = weights
        self.buffers = model.buffers
        self.training = training

    def conv(self, name, x, stride=1, dilation=1, groups=1, padding=0):
        return tc.conv2d(x, self.weights[f"{name}.weight"], self.weights[f"{name}.bias"],
                         stride=stride, dilation=dilation, groups=groups, padding=padding)

    def norm(self, name, x):
        return tc.channel_norm(x, self.weights[f"{name}.weight"], self.weights[f"{name}.bias"],
                               self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
                               training=self.training)

    def stem(self, x):
        x = tc.relu(self.norm('stem.norm', self.conv('stem.conv', x, padding=1)))
        return tc.max_pool2d(x, 2)

    def shortcut(self, block, x):
        if f"{block.name}.shortcut.weight" not in self.weights:
            return x
        return self.norm(f"{block.name}.shortcut_norm", self.conv(f"{block.name}.shortcut", x, stride=block.stride))

    def basic(self, block, x):
        d = block.dilation
        y = tc.relu(self.norm(f"{block.name}.norm1",
                              self.conv(f"{block.name}.conv1", x, stride=block.stride, dilation=d, padding=d)))
        y = self.norm(f"{block.name}.norm2", self.conv(f"{block.name}.conv2", y, dilation=d, padding=d))
        return tc.relu(tc.add(y, self.shortcut(block, x)))

    def bottleneck(self, block, x):
        d = block.dilation
        y = tc.relu(self.norm(f"{block.name}.norm1", self.conv(f"{block.name}.conv1", x)))
        y = tc.relu(self.norm(f"{block.name}.norm2",
                              self.conv(f"{block.name}.conv2", y, stride=block.stride, dilation=d,
                                        groups=block.groups, padding=d)))
        y = self.norm(f"{block.name}.norm3", self.conv(f"{block.name}.conv3", y))
        return tc.relu(tc.add(y, self.shortcut(block, x)))

    def dense_layer(self, block, x):
        y = self.conv(f"{block.name}.conv", tc.relu(self.norm(f"{block.name}.norm", x)), padding=1)
        return tc.concat([x, y], axis=1)

    def transition(self, block, x):
        y = self.conv(f"{block.name}.conv", tc.relu(self.norm(f"{block.name}.norm", x)))
        return tc.max_pool2d(y, 2)

    def block(self, block, x):
        return getattr(self, block.kind)(block, x)

    def head(self, x):
        if self.spec.family == 'densenet_surrogate':
            x = tc.relu(self.norm('final_norm', x))
        return tc.dense(tc.global_avg_pool(x), self.weights['head.weight'], self.weights['head.bias'])

    def network(self, x):
        x = self.stem(x)
        for block in self.model.blocks:
            x = self.block(block, x)
        return self.head(x)


def _add_conv(params, rng, name, in_channels, out_channels, kernel, groups=1):
    fan_in = (in_channels // groups) * kernel * kernel
    params[f"{name}.weight"] = tc.normal((out_channels, in_channels // groups, kernel, kernel),
                                         std=math.sqrt(2.0 / fan_in), seed=rng, requires_grad=True)
    params[f"{name}.bias"] = tc.Tensor(np.zeros(out_channels), requires_grad=True)


def _add_norm(params, buffers, name, channels):
    params[f"{name}.weight"] = tc.Tensor(np.ones(channels), requires_grad=True)
    params[f"{name}.bias"] = tc.Tensor(np.zeros(channels), requires_grad=True)
    buffers[f"{name}.running_mean"] = np.zeros(channels)
    buffers[f"{name}.running_var"] = np.ones(channels)


def build_model(spec, seed):
    """
    Build a freshly initialized ModelInstance; identical (spec, seed) give identical parameters.
    """
    violations = spec.violations()
    if violations:
        raise InvalidSpecError(violations)

    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    stem_width = spec.stage_widths[0]
    _add_conv(params, rng, 'stem.conv', spec.input_shape[0], stem_width, 3)
    _add_norm(params, buffers, 'stem.norm', stem_width)

    for block in block_plan(spec):
        name, cin, cout = block.name, block.in_channels, block.out_channels
        if block.kind == 'basic':
            _add_conv(params, rng, f"{name}.conv1", cin, cout, 3)
            _add_norm(params, buffers, f"{name}.norm1", cout)
            _add_conv(params, rng, f"{name}.conv2", cout, cout, 3)
            _add_norm(params, buffers, f"{name}.norm2", cout)
        elif block.kind == 'bottleneck':
            _add_conv(params, rng, f"{name}.conv1", cin, cout, 1)
            _add_norm(params, buffers, f"{name}.norm1", cout)
            _add_conv(params, rng, f"{name}.conv2", cout, cout, 3, groups=block.groups)
            _add_norm(params, buffers, f"{name}.norm2", cout)
            _add_conv(params, rng, f"{name}.conv3", cout, cout, 1)
            _add_norm(params, buffers, f"{name}.norm3", cout)
        elif block.kind == 'dense_layer':
            _add_norm(params, buffers, f"{name}.norm", cin)
            _add_conv(params, rng, f"{name}.conv", cin, cout, 3)
        else:
            _add_norm(params, buffers, f"{name}.norm", cin)
            _add_conv(params, rng, f"{name}.conv", cin, cout, 1)
        if block.kind in ('basic', 'bottleneck') and (block.stride != 1 or cin != cout):
            _add_conv(params, rng, f"{name}.shortcut", cin, cout, 1)
            _add_norm(params, buffers, f"{name}.shortcut_norm", cout)

    features = output_channels(spec)
    if spec.family == 'densenet_surrogate':
        _add_norm(params, buffers, 'final_norm', features)
    params['head.weight'] = tc.normal((features, spec.num_classes), std=math.sqrt(1.0 / features),
                                      seed=rng, requires_grad=True)
    params['head.bias'] = tc.Tensor(np.zeros(spec.num_classes), requires_grad=True)

    model = ModelInstance(spec, params, buffers, seed=seed)
    logging.info(f"Built '{spec.name}' ({spec.family}) with {parameter_count(model)} parameters")
    return model


def forward(model, batch, record_tape=False, training=False):
    return model.forward(batch, record_tape=record_tape, training=training)


def run_stage(model, stage, x):
    """
    Apply only the body blocks of one stage (eval mode, untaped).
    """
    runner = model._runner(training=False)
    with tc.no_grad():
        h = tc.as_tensor(x)
        for block in model.blocks:
            if block.stage == stage:
                h = runner.block(block, h)
    return h


def predict_logits(model, images, batch_size=64):
    images = np.asarray(images)
    if len(images) == 0:
        return np.zeros((0, model.spec.num_classes))
    chunks = [model.forward(images[start:start + batch_size]).data
              for start in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def parameter_count(model):
    return int(sum(p.size for p in model.parameters.values()))


def profile_model(model, images, repeats=3):
    """
    Parameter count and mean eval-mode inference seconds per image.
    """
    images = np.asarray(images)
    start = time.perf_counter()
    for _ in range(repeats):
        predict_logits(model, images)
    elapsed = time.perf_counter() - start
    return {
        'parameter_count': parameter_count(model),
        'seconds_per_image': elapsed / (repeats * max(len(images), 1)),
    }


def registry_default(resolution=64, num_classes=3):
    """
    The eight desk-scale specs: brainnet, three brainnext depths, three dilation rates and the dense surrogate.
    """
    base = {'stage_widths': DESK_WIDTHS, 'num_classes': num_classes, 'input_shape': (3, resolution, resolution)}
    specs = [ModelSpec('brainnet', 'brainnet', blocks_per_stage=(2, 2, 2), extra_blocks=2, **base)]
    for name, blocks in (('brainnext_small', (2, 2, 2)), ('brainnext_medium', (2, 3, 3)),
                         ('brainnext_large', (3, 3, 4))):
        specs.append(ModelSpec(name, 'brainnext', blocks_per_stage=blocks, cardinality=DESK_CARDINALITY, **base))
    for rate in (2, 3, 4):
        specs.append(ModelSpec(f"dilation{rate}", 'dilation', blocks_per_stage=(2, 2, 2), extra_blocks=2,
                               dilation_rate=rate, **base))
    specs.append(ModelSpec('densenet_surrogate', 'densenet_surrogate', stage_widths=(16,), blocks_per_stage=(4, 4),
                           growth_rate=8, num_classes=num_classes, input_shape=(3, resolution, resolution)))
    return specs


def registry_names():
    return [spec.name for spec in registry_default()]


def registry_lookup(name, resolution=64, num_classes=3):
    for spec in registry_default(resolution, num_classes):
        if spec.name == name:
            return spec
    raise UnknownModelError(name, registry_names())


def save_checkpoint(model, path, fingerprint=None, extra=None):
    """
    Persist spec, seed, freeze boundary, parameters and buffers to a container file.
    """
    header = {
        'kind': 'checkpoint',
        'spec': model.spec.to_dict(),
        'seed': model.seed,
        'frozen_prefix': model.frozen_prefix,
        'parameter_names': list(model.parameters),
        'buffer_names': list(model.buffers),
        'fingerprint': fingerprint,
    }
    if extra:
        header['extra'] = extra
    arrays = {f"param/{name}": p.data for name, p in model.parameters.items()}
    arrays.update({f"buffer/{name}": b for name, b in model.buffers.items()})
    cache.write_container(path, header, arrays)


def load_checkpoint(path):
    try:
        header, arrays = cache.read_container(path)
    except OSError as e:
        raise CheckpointError(f"Could not read checkpoint '{path}': {e}")
    if header.get('kind') != 'checkpoint':
        raise CheckpointError(f"'{path}' holds a '{header.get('kind')}', not a checkpoint")
    try:
        spec = ModelSpec.from_dict(header['spec'])
        params = {name: tc.Tensor(arrays[f"param/{name}"].copy(), requires_grad=True)
                  for name in header['parameter_names']}
        buffers = {name: arrays[f"buffer/{name}"].copy() for name in header['buffer_names']}
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint '{path}' is incomplete: missing {e}")
    return ModelInstance(spec, params, buffers, seed=header.get('seed', 0),
                         frozen_prefix=header.get('frozen_prefix', 0))
