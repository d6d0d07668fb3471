#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import copy
import logging
import os

import yaml

CONFIG_PATH = 'config.yaml'
VARIANT_NAMES = ('full-aug', 'shrunk-aug', 'shrunk-noaug')

DEFAULT_CONFIG = {
    'corpus': {
        'n_per_class': 100,
        'seed': 0,
        'full_resolution': 64,
        'shrunk_resolution': 20,
        'image_folder': None,
    },
    'variants': list(VARIANT_NAMES),
    'models': None,
    'training': {
        'preset': 'desk',
    },
    'attacks': {
        'fgsm_epsilons': [0.02, 0.03, 0.04, 0.05],
        'pgd': [
            {'epsilon': 0.03, 'alpha_schedule': 'eps_over_iters', 'iterations': 10},
            {'epsilon': 0.03, 'alpha_schedule': 'eps_over_4', 'iterations': 20},
            {'epsilon': 0.03, 'alpha_schedule': 'eps_over_iters', 'iterations': 20},
        ],
        'rng_seed': 0,
    },
    'seeds': [0],
    'harness': {
        'workers': 1,
        'train_missing': True,
        'family_groups': {
            'brainnet': 'resnet-like',
            'dilation': 'resnet-like',
            'brainnext': 'resnext',
            'densenet_surrogate': 'densenet',
        },
    },
    'output': {
        'dir': 'runs/default',
        'cache_dir': None,
    },
}

# keys the training section may override on top of its preset
TRAINING_KEYS = {'preset', 'learning_rate', 'batch_size', 'max_epochs', 'patience', 'phase', 'phase_epochs',
                 'phase2_lr_divisor', 'beta1', 'beta2', 'adam_eps'}
PGD_KEYS = {'epsilon', 'alpha_schedule', 'iterations', 'alpha'}

_config = None
_config_path = None


class ConfigError(ValueError):
    pass


def _unknown_keys(conf):
    unknown = []
    for section, value in conf.items():
        if section not in DEFAULT_CONFIG:
            unknown.append(section)
            continue
        if section == 'training':
            allowed = TRAINING_KEYS
        elif isinstance(DEFAULT_CONFIG[section], dict):
            allowed = set(DEFAULT_CONFIG[section])
        else:
            continue
        if not isinstance(value, dict):
            continue
        # family_groups is a free-form family -> group mapping
        unknown.extend(f"{section}.{key}" for key in value if key not in allowed)
    for index, entry in enumerate(conf.get('attacks', {}).get('pgd') or []):
        if isinstance(entry, dict):
            unknown.extend(f"attacks.pgd[{index}].{key}" for key in entry if key not in PGD_KEYS)
    return unknown


def validate_config(conf):
    """
    Check keys and value shapes; raise ConfigError listing every problem.
    """
    problems = []
    unknown = _unknown_keys(conf)
    if unknown:
        problems.append(f"unknown keys: {', '.join(unknown)}")
    for section, default in DEFAULT_CONFIG.items():
        if isinstance(default, dict) and not isinstance(conf.get(section), dict):
            problems.append(f"section '{section}' must be a mapping")
    bad_variants = [v for v in conf.get('variants') or [] if v not in VARIANT_NAMES]
    if not conf.get('variants'):
        problems.append("variants must list at least one of " + ', '.join(VARIANT_NAMES))
    elif bad_variants:
        problems.append(f"unknown variants: {', '.join(map(str, bad_variants))}")
    seeds = conf.get('seeds')
    if not isinstance(seeds, list) or not seeds or any(not isinstance(s, int) or s < 0 for s in seeds):
        problems.append("seeds must be a non-empty list of non-negative integers")
    models = conf.get('models')
    if models is not None and (not isinstance(models, list) or not models):
        problems.append("models must be a non-empty list of registry names or null for all")
    attacks = conf.get('attacks') if isinstance(conf.get('attacks'), dict) else {}
    if not isinstance(attacks.get('fgsm_epsilons'), list):
        problems.append("attacks.fgsm_epsilons must be a list")
    if not isinstance(attacks.get('pgd'), list) or any(not isinstance(e, dict) for e in attacks.get('pgd') or []):
        problems.append("attacks.pgd must be a list of mappings")
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    return conf


def _merge(user):
    merged = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'training':
            merged[key] = {**merged[key], **value}
        elif key == 'training' and isinstance(value, dict):
            merged[key] = {'preset': merged[key]['preset'], **value}
        else:
            merged[key] = value
    return merged


def load_config(path=None, reload=False):
    """
    Load the YAML run configuration merged over DEFAULT_CONFIG.
    """
    global _config, _config_path
    if _config is not None and not reload and path in (None, _config_path):
        return _config

    config_path = path or CONFIG_PATH
    if not os.path.exists(config_path):
        if path is not None:
            raise ConfigError(f"Config file '{path}' does not exist")
        logging.info("No config.yaml found, using default settings.")
        _config, _config_path = validate_config(copy.deepcopy(DEFAULT_CONFIG)), None
        return _config

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            user = yaml.safe_load(f)
    except (yaml.YAMLError, IOError) as e:
        raise ConfigError(f"Could not load or parse '{config_path}': {e}")
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError(f"'{config_path}' must contain a mapping of sections")
    _config = validate_config(_merge(user))
    _config_path = path
    logging.info(f"Loaded configuration from '{config_path}'")
    return _config


def reset_config():
    global _config, _config_path
    _config = None
    _config_path = None


def validate_paths(conf):
    """
    Fail fast on unusable paths before any long-running work starts.
    """
    folder = conf['corpus'].get('image_folder')
    if folder and not os.path.isdir(folder):
        raise ConfigError(f"corpus.image_folder '{folder}' is not a directory")
    for directory in (conf['output'].get('dir'), conf['output'].get('cache_dir')):
        if not directory:
            continue
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"Cannot create output directory '{directory}': {e}")
