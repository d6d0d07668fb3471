#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import hashlib
import io
import json
import logging
import os
import zipfile

import numpy as np

import config

FORMAT = 'advbench-container'
FORMAT_VERSION = 1
# fixed member timestamps keep rewritten containers byte-identical
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


def get_cache_dir(conf=None):
    """
    Get the artifact cache directory from the configuration.
    """
    conf = conf or config.load_config()
    output = conf.get('output', {})
    return output.get('cache_dir') or os.path.join(output.get('dir', 'runs/default'), 'cache')


def get_cache_key(prefix, payload):
    """
    Generate a unique cache key for a string or JSON-serializable payload.
    """
    text = payload if isinstance(payload, str) else json.dumps(payload, sort_keys=True, default=str)
    return f"{prefix}_{hashlib.md5(text.encode('utf-8')).hexdigest()}"


def checkpoint_path(cache_dir, variant, model_name, seed):
    return os.path.join(cache_dir, 'checkpoints', variant, f"{model_name}_seed{seed}.ckpt")


def train_report_path(cache_dir, variant, model_name, seed):
    return os.path.join(cache_dir, 'reports', variant, f"{model_name}_seed{seed}_train.csv")


def adversarial_path(cache_dir, variant, source, attack_label, seed):
    return os.path.join(cache_dir, 'adversarial', variant, f"{source}__{attack_label}_seed{seed}.adv")


def _member(name):
    info = zipfile.ZipInfo(name, date_time=ZIP_TIMESTAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_container(path, header, arrays):
    """
    Write a JSON header and named arrays to a zip container.

    Members are header.json followed by one .npy file per array in the given
    order; identical content always produces identical bytes.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header = {'format': FORMAT, 'format_version': FORMAT_VERSION, **header}
    tmp_path = f"{path}.tmp"
    with zipfile.ZipFile(tmp_path, 'w') as zf:
        zf.writestr(_member('header.json'), json.dumps(header, sort_keys=True, indent=2))
        for name, array in arrays.items():
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(array), allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), buffer.getvalue())
    os.replace(tmp_path, path)
    logging.info(f"Wrote container '{path}' with {len(arrays)} arrays")


def read_header(path):
    try:
        with zipfile.ZipFile(path, 'r') as zf:
            header = json.loads(zf.read('header.json').decode('utf-8'))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise IOError(f"'{path}' is not a valid container: {e}")
    if header.get('format') != FORMAT:
        raise IOError(f"'{path}' has unknown format '{header.get('format')}'")
    if header.get('format_version', 0) > FORMAT_VERSION:
        raise IOError(f"'{path}' was written by a newer format version {header['format_version']}")
    return header


def read_container(path):
    """
    Read a container back into (header, {name: array}) with the original array order.
    """
    header = read_header(path)
    arrays = {}
    with zipfile.ZipFile(path, 'r') as zf:
        for name in zf.namelist():
            if not name.endswith('.npy'):
                continue
            with zf.open(name) as f:
                arrays[name[:-len('.npy')]] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    return header, arrays


def get_cached_header(path, fingerprint):
    """
    Return the header of a cached container if it exists and matches the fingerprint.
    """
    if not os.path.exists(path):
        logging.info(f"Cache miss for '{path}'")
        return None
    try:
        header = read_header(path)
    except IOError as e:
        logging.warning(f"Could not read cache file '{path}': {e}")
        return None
    if header.get('fingerprint') != fingerprint:
        logging.warning(f"Cache entry '{path}' is stale (fingerprint changed)")
        return None
    logging.info(f"Cache hit for '{path}'")
    return header
