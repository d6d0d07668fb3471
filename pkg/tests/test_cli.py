#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json
import os
from unittest.mock import patch

import pytest

import advbench
import nn_models
from conftest import tiny_spec

REGISTRY_FAMILIES = {spec.name: spec.family for spec in nn_models.registry_default()}

TINY_CONFIG = """
corpus:
  n_per_class: 10
  full_resolution: 8
  shrunk_resolution: 4
variants: [full-aug]
models: [brainnet, dilation2]
training:
  max_epochs: 1
attacks:
  fgsm_epsilons: [0.02]
  pgd:
    - {{epsilon: 0.03, alpha_schedule: eps_over_4, iterations: 2}}
output:
  dir: {out}
"""


def tiny_lookup(name, resolution=64, num_classes=3):
    if name not in REGISTRY_FAMILIES:
        raise nn_models.UnknownModelError(name, list(REGISTRY_FAMILIES))
    return tiny_spec(REGISTRY_FAMILIES[name], name=name, resolution=resolution, num_classes=num_classes)


@pytest.fixture
def tiny_registry():
    with patch('nn_models.registry_lookup', side_effect=tiny_lookup):
        yield


@pytest.fixture
def run_dir(tmp_path):
    out = tmp_path / 'out'
    config_path = tmp_path / 'config.yaml'
    config_path.write_text(TINY_CONFIG.format(out=out))
    return str(config_path), out


def run(config_path, *args):
    return advbench.main([args[0], '--config', config_path, '--no-progress', *args[1:]])


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def test_gen_data_writes_corpus_and_manifest(run_dir):
    config_path, out = run_dir
    assert run(config_path, 'gen-data') == advbench.EXIT_OK
    assert (out / 'corpus.ctr').exists()
    manifest = json.loads((out / 'corpus_manifest_seed0.json').read_text())
    assert manifest['variants']['full-aug']['sizes'] == {'train': 18, 'val': 3, 'test': 6, 'attack': 3}


def test_train_is_idempotent(run_dir, tiny_registry, capsys):
    """Test that a second train run reuses checkpoints and leaves them untouched."""
    config_path, out = run_dir
    assert run(config_path, 'train', '--models', 'brainnet') == advbench.EXIT_OK
    checkpoint = out / 'cache' / 'checkpoints' / 'full-aug' / 'brainnet_seed0.ckpt'
    report_csv = out / 'cache' / 'reports' / 'full-aug' / 'brainnet_seed0_train.csv'
    assert checkpoint.exists() and report_csv.exists()
    first = read_bytes(checkpoint)
    assert 'trained' in capsys.readouterr().out
    manifest = json.loads((out / 'train_manifest.json').read_text())
    written = {os.path.join(root, name) for root, _, names in os.walk(out) for name in names}
    assert set(manifest['files']) == written

    assert run(config_path, 'train', '--models', 'brainnet') == advbench.EXIT_OK
    assert 'up to date' in capsys.readouterr().out
    assert read_bytes(checkpoint) == first

    assert run(config_path, 'train', '--models', 'brainnet', '--force') == advbench.EXIT_OK
    assert 'trained' in capsys.readouterr().out
    assert read_bytes(checkpoint) == first


def test_unknown_model_is_a_usage_error(run_dir, capsys):
    config_path, _ = run_dir
    assert run(config_path, 'train', '--models', 'brainet') == advbench.EXIT_USAGE
    err = capsys.readouterr().err
    assert 'brainnext_small' in err
    assert "did you mean 'brainnet'" in err


def test_missing_config_is_a_usage_error(tmp_path, capsys):
    assert advbench.main(['train', '--config', str(tmp_path / 'missing.yaml')]) == advbench.EXIT_USAGE
    assert 'does not exist' in capsys.readouterr().err


def test_invalid_config_is_a_usage_error(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text('colour: red\n')
    assert advbench.main(['matrix', '--config', str(path)]) == advbench.EXIT_USAGE


@pytest.mark.parametrize("argv", [[], ['matrix', '--variant', 'full-noaug'], ['matrix', '--seed', 'x']])
def test_argument_errors_exit_with_usage_code(argv):
    with pytest.raises(SystemExit) as excinfo:
        advbench.main(argv)
    assert excinfo.value.code == advbench.EXIT_USAGE


def test_matrix_and_report(run_dir, tiny_registry, capsys):
    config_path, out = run_dir
    assert run(config_path, 'matrix') == advbench.EXIT_OK
    assert 'evaluation split: attack' in capsys.readouterr().out
    csv_lines = (out / 'matrix.csv').read_text().splitlines()
    assert len(csv_lines) == 1 + 2 * 2 * 2

    manifest = json.loads((out / 'manifest.json').read_text())
    written = {os.path.join(root, name) for root, _, names in os.walk(out) for name in names}
    assert written == set(manifest['files'])
    assert manifest['generations'] == 4
    assert manifest['max_constraint_violation'] <= 1e-12

    first_csv = read_bytes(out / 'matrix.csv')
    first_manifest = read_bytes(out / 'manifest.json')
    assert run(config_path, 'matrix') == advbench.EXIT_OK
    assert read_bytes(out / 'matrix.csv') == first_csv
    assert read_bytes(out / 'manifest.json') == first_manifest

    assert run(config_path, 'report') == advbench.EXIT_OK
    charts = sorted(os.listdir(out / 'report'))
    assert charts == ['full-aug__fgsm_eps0.02.svg', 'full-aug__pgd_eps0.03_eps_over_4_it2.svg',
                      'report_manifest.json', 'summary.txt']
    report_manifest = json.loads((out / 'report' / 'report_manifest.json').read_text())
    written = {os.path.join(root, name) for root, _, names in os.walk(out) for name in names}
    assert written == set(manifest['files']) | set(report_manifest['files'])


def test_attack_writes_sets_and_sample_sheets(run_dir, tiny_registry):
    config_path, out = run_dir
    assert run(config_path, 'attack', '--models', 'dilation2') == advbench.EXIT_OK
    manifest = json.loads((out / 'attack_manifest.json').read_text())
    assert len(manifest['attack_stats']) == 2
    assert os.path.join(str(out), 'samples', 'full-aug', 'dilation2__fgsm_eps0.02_seed0.svg') in manifest['files']
    assert all(os.path.exists(path) for path in manifest['files'])


def test_report_on_empty_matrix_fails_without_output(run_dir, capsys):
    config_path, out = run_dir
    out.mkdir()
    (out / 'matrix.csv').write_text('')
    assert run(config_path, 'report') == advbench.EXIT_RUNTIME
    assert 'empty' in capsys.readouterr().err
    assert not (out / 'report').exists()


def test_seed_flag_overrides_config(run_dir):
    config_path, out = run_dir
    assert run(config_path, 'gen-data', '--seed', '5') == advbench.EXIT_OK
    assert (out / 'corpus_manifest_seed5.json').exists()
    assert not (out / 'corpus_manifest_seed0.json').exists()


@pytest.mark.parametrize("training_section,message", [
    ("{preset: bogus}", "unknown training preset"),
    ("{learning_rate: 0}", "learning_rate"),
    ("{batch_size: many}", "invalid training section"),
])
def test_bad_training_values_are_config_errors(tmp_path, capsys, training_section, message):
    out = tmp_path / 'out'
    path = tmp_path / 'config.yaml'
    path.write_text(f"training: {training_section}\noutput:\n  dir: {out}\n")
    assert advbench.main(['matrix', '--config', str(path), '--no-progress']) == advbench.EXIT_USAGE
    assert message in capsys.readouterr().err
    assert not (out / 'corpus.ctr').exists()
    assert not (out / 'matrix.csv').exists()
