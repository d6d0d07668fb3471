#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Procedural 3-class image corpus, area-average resizing, right-angle
augmentation and the stratified train/val/test/attack splits.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from PIL import Image

import cache

CLASS_NAMES = ('blobs', 'stripes', 'rings')
# per-class base intensity; patterns on top are zero-mean
CLASS_LEVELS = (0.45, 0.5, 0.55)
LEVEL_JITTER = 0.1
PATTERN_AMPLITUDE = 0.2
NOISE_STD = 0.02
MIN_RESOLUTION = 4

SPLIT_NAMES = ('train', 'val', 'test', 'attack')
SPLIT_RATIOS = (Fraction(3, 5), Fraction(1, 10), Fraction(1, 5), Fraction(1, 10))
VARIANTS = {
    'full-aug': ('full', True),
    'shrunk-aug': ('shrunk', True),
    'shrunk-noaug': ('shrunk', False),
}


class DataError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int


def _pattern(kind, rng, resolution):
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, resolution), np.linspace(0.0, 1.0, resolution), indexing='ij')
    if kind == 'blobs':
        pattern = np.zeros((resolution, resolution))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            sigma = rng.uniform(0.08, 0.12)
            pattern += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    elif kind == 'stripes':
        theta = rng.uniform(0.0, np.pi)
        frequency = rng.uniform(3.0, 5.0)
        pattern = np.sin(2 * np.pi * frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    else:
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        frequency = rng.uniform(3.0, 5.0)
        radius = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        pattern = np.sin(2 * np.pi * frequency * radius + rng.uniform(0, 2 * np.pi))
    pattern = pattern - pattern.mean()
    peak = np.abs(pattern).max()
    return pattern / peak if peak > 0 else pattern


def generate_corpus(n_per_class, resolution, seed):
    """
    Render n_per_class images for each of blobs, stripes and rings.

    Every image gets its own RNG stream keyed by (seed, class, index), so the
    corpus is a pure function of its arguments.
    """
    if n_per_class < 1:
        raise DataError(f"n_per_class must be at least 1, got {n_per_class}")
    if resolution < MIN_RESOLUTION:
        raise DataError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    corpus = []
    for label, kind in enumerate(CLASS_NAMES):
        for index in range(n_per_class):
            rng = np.random.default_rng([seed, label, index])
            level = CLASS_LEVELS[label] + rng.uniform(-LEVEL_JITTER, LEVEL_JITTER)
            pattern = _pattern(kind, rng, resolution)
            gains = 1.0 + rng.uniform(-0.2, 0.2, size=(3, 1, 1))
            noise = rng.normal(0.0, NOISE_STD, size=(3, resolution, resolution))
            pixels = np.clip(level + PATTERN_AMPLITUDE * gains * pattern + noise, 0.0, 1.0)
            corpus.append(LabeledImage(pixels, label))
    logging.info(f"Generated corpus of {len(corpus)} images at {resolution}x{resolution} (seed {seed})")
    return corpus


def stack(corpus):
    if not corpus:
        raise DataError("corpus is empty")
    return (np.stack([image.pixels for image in corpus]).astype(np.float64),
            np.array([image.label for image in corpus], dtype=np.int64))


def _area_weights(size, target):
    # row i averages input span [i*size/target, (i+1)*size/target)
    scale = size / target
    weights = np.zeros((target, size))
    for i in range(target):
        start, stop = i * scale, (i + 1) * scale
        for j in range(int(np.floor(start)), min(int(np.ceil(stop)), size)):
            weights[i, j] = min(stop, j + 1) - max(start, j)
    return weights / scale


def resize_pixels(pixels, target):
    channels, height, width = pixels.shape
    if target < MIN_RESOLUTION:
        raise DataError(f"target resolution {target} is below the minimum of {MIN_RESOLUTION}")
    if target > height or target > width:
        raise DataError(f"cannot upscale {height}x{width} to {target}x{target}; only shrinking is supported")
    if target == height == width:
        return pixels.copy()
    rows, cols = _area_weights(height, target), _area_weights(width, target)
    out = np.einsum('ih,chw,jw->cij', rows, pixels, cols)
    return np.clip(out, pixels.min(), pixels.max())


def resize(image, target):
    return LabeledImage(resize_pixels(image.pixels, target), image.label)


@dataclass(frozen=True)
class AugmentTransform:
    hflip: bool
    vflip: bool
    k: int


def sample_transform(rng_seed):
    rng = np.random.default_rng(rng_seed)
    return AugmentTransform(bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4)))


def apply_transform(pixels, transform):
    if pixels.shape[-1] != pixels.shape[-2]:
        raise DataError(f"augmentation needs square images, got {pixels.shape[-2]}x{pixels.shape[-1]}")
    out = pixels
    if transform.hflip:
        out = out[..., ::-1]
    if transform.vflip:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(out, transform.k, axes=(-2, -1)))


def augment(image, rng_seed):
    """
    Random horizontal/vertical flip and rotation by a multiple of 90 degrees.
    """
    return LabeledImage(apply_transform(image.pixels, sample_transform(rng_seed)), image.label)


def _largest_remainder(total, ratios):
    exact = [total * r for r in ratios]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda s: (-(exact[s] - counts[s]), s))
    for s in order[:total - sum(counts)]:
        counts[s] += 1
    return counts


def stratified_counts(class_sizes, ratios=SPLIT_RATIOS):
    """
    Per-class split counts within one of n_class * ratio, whose column totals
    also stay within one of N * ratio.
    """
    total = sum(class_sizes)
    targets = _largest_remainder(total, ratios)
    counts = [[math.floor(n * r) for r in ratios] for n in class_sizes]
    need_row = [n - sum(row) for n, row in zip(class_sizes, counts)]
    need_col = [t - sum(row[s] for row in counts) for s, t in enumerate(targets)]
    fraction = [[n * r - math.floor(n * r) for r in ratios] for n in class_sizes]
    for c in sorted(range(len(class_sizes)), key=lambda c: (-need_row[c], c)):
        open_splits = sorted(range(len(ratios)), key=lambda s: (-need_col[s], -fraction[c][s], s))
        for s in open_splits[:need_row[c]]:
            counts[c][s] += 1
            need_col[s] -= 1
    return counts


@dataclass
class DatasetVariant:
    name: str
    resolution: int
    augmented: bool
    images: np.ndarray
    labels: np.ndarray
    splits: dict
    seed: int
    corpus_hash: str = ''

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def split(self, name):
        """Images and labels of one split; never augmented."""
        indices = self.splits[name]
        return self.images[indices], self.labels[indices]

    def train_batches(self, batch_size, shuffle_seed):
        """
        Yield (images, labels) training batches in an order drawn from shuffle_seed.

        Augmentation, when enabled, draws each image's transform from
        (shuffle_seed, corpus index), so a new shuffle seed re-samples it.
        """
        order = np.random.default_rng(shuffle_seed).permutation(self.splits['train'])
        for start in range(0, len(order), batch_size):
            indices = order[start:start + batch_size]
            images = self.images[indices]
            if self.augmented:
                images = np.stack([apply_transform(img, sample_transform([shuffle_seed, int(i)]))
                                   for img, i in zip(images, indices)])
            yield images, self.labels[indices]


def make_splits(labels, seed):
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    members = [np.flatnonzero(labels == c) for c in classes]
    counts = stratified_counts([len(m) for m in members])
    totals = [sum(row[s] for row in counts) for s in range(len(SPLIT_NAMES))]
    if any(t == 0 for t in totals):
        raise DataError(f"corpus of {len(labels)} images is too small for stratification "
                        f"(split sizes {dict(zip(SPLIT_NAMES, totals))})")
    parts = {name: [] for name in SPLIT_NAMES}
    for c, indices, row in zip(classes, members, counts):
        shuffled = np.random.default_rng([seed, int(c)]).permutation(indices)
        start = 0
        for name, count in zip(SPLIT_NAMES, row):
            parts[name].extend(shuffled[start:start + count].tolist())
            start += count
    return {name: np.array(sorted(indices), dtype=np.int64) for name, indices in parts.items()}


def make_variant(corpus, resolution, augmented, seed, name=None):
    """
    Resize the corpus to `resolution`, split it 60/10/20/10 per class and mark
    whether training batches are augmented.
    """
    full_resolution = corpus[0].pixels.shape[-1]
    if resolution != full_resolution:
        corpus = [resize(image, resolution) for image in corpus]
    images, labels = stack(corpus)
    splits = make_splits(labels, seed)
    if name is None:
        tier = 'full' if resolution == full_resolution else 'shrunk'
        name = f"{tier}-{'aug' if augmented else 'noaug'}"
    variant = DatasetVariant(name, resolution, augmented, images, labels, splits, seed, corpus_hash(images, labels))
    logging.info(f"Variant '{name}': " + ', '.join(f"{k}={len(v)}" for k, v in splits.items()))
    return variant


def build_variant(corpus, name, full_resolution, shrunk_resolution, seed):
    if name not in VARIANTS:
        raise DataError(f"unknown variant '{name}'; choose one of {', '.join(VARIANTS)}")
    tier, augmented = VARIANTS[name]
    resolution = full_resolution if tier == 'full' else shrunk_resolution
    return make_variant(corpus, resolution, augmented, seed, name=name)


def corpus_hash(images, labels):
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(images, dtype=np.float64).tobytes())
    digest.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return digest.hexdigest()


def load_image_folder(path, resolution=None):
    """
    Load a directory with one subdirectory of 8-bit RGB PNGs per class.

    Classes are labelled in sorted subdirectory order; pixels are scaled by 1/255.
    """
    if not os.path.isdir(path):
        raise DataError(f"image folder '{path}' does not exist")
    classes = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise DataError(f"image folder '{path}' has no class subdirectories")
    corpus = []
    for label, name in enumerate(classes):
        class_dir = os.path.join(path, name)
        for filename in sorted(f for f in os.listdir(class_dir) if f.lower().endswith('.png')):
            file_path = os.path.join(class_dir, filename)
            try:
                with Image.open(file_path) as img:
                    array = np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
            except OSError as e:
                raise DataError(f"Could not read image '{file_path}': {e}")
            pixels = array.transpose(2, 0, 1)
            if pixels.shape[1] != pixels.shape[2]:
                raise DataError(f"'{file_path}' is {pixels.shape[1]}x{pixels.shape[2]}; images must be square")
            if resolution is not None:
                pixels = resize_pixels(pixels, resolution)
            corpus.append(LabeledImage(pixels, label))
    if not corpus:
        raise DataError(f"image folder '{path}' contains no PNG images")
    sizes = {image.pixels.shape for image in corpus}
    if len(sizes) > 1:
        raise DataError(f"images in '{path}' have mixed shapes: {sorted(sizes)}")
    logging.info(f"Loaded {len(corpus)} images in {len(classes)} classes from '{path}'")
    return corpus


def save_corpus(path, corpus, seed):
    images, labels = stack(corpus)
    header = {'kind': 'corpus', 'seed': seed, 'corpus_hash': corpus_hash(images, labels),
              'classes': list(CLASS_NAMES)}
    cache.write_container(path, header, {'images': images, 'labels': labels})
    return header


def load_corpus(path):
    header, arrays = cache.read_container(path)
    if header.get('kind') != 'corpus':
        raise DataError(f"'{path}' does not hold a corpus")
    return [LabeledImage(pixels, int(label)) for pixels, label in zip(arrays['images'], arrays['labels'])]


def write_manifest(path, corpus_seed, variants, extra=None):
    """
    Record seed, sizes and split indices of each variant as JSON.
    """
    manifest = {
        'corpus_seed': corpus_seed,
        'variants': {
            v.name: {
                'resolution': v.resolution,
                'augmented': v.augmented,
                'seed': v.seed,
                'corpus_hash': v.corpus_hash,
                'sizes': {k: int(len(idx)) for k, idx in v.splits.items()},
                'splits': {k: idx.tolist() for k, idx in v.splits.items()},
            }
            for v in variants
        },
    }
    if extra:
        manifest.update(extra)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
