#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import hashlib
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import pandas as pd
from tqdm import tqdm

import attacks
import cache
import config
import data_pipeline
import nn_models
import tensor_core as tc
import training

CODE_VERSION = '1.0.0'
EVALUATION_SPLIT = 'attack'
CSV_COLUMNS = ['variant', 'source', 'target', 'attack', 'epsilon', 'alpha', 'iterations', 'seed',
               'clean_acc', 'adv_acc', 'drop']
NOT_AVAILABLE = 'n/a'


class PlanError(ValueError):
    pass


class MissingCheckpointError(LookupError):
    pass


class IncompleteMatrixError(ValueError):
    pass


def cell_seed(base, *coordinates):
    """Derive a 32-bit RNG seed from a base seed and cell coordinates."""
    text = json.dumps([base, *coordinates])
    return int(hashlib.md5(text.encode('utf-8')).hexdigest()[:8], 16)


def attack_grid(attack_settings):
    """
    AttackConfigs for the configured FGSM epsilons followed by the PGD entries.
    """
    rng_seed = attack_settings.get('rng_seed', 0)
    grid = [attacks.AttackConfig('fgsm', float(eps), rng_seed=rng_seed)
            for eps in attack_settings.get('fgsm_epsilons') or []]
    for entry in attack_settings.get('pgd') or []:
        grid.append(attacks.AttackConfig('pgd', float(entry['epsilon']),
                                         alpha_schedule=entry.get('alpha_schedule', 'eps_over_4'),
                                         alpha=entry.get('alpha'), iterations=int(entry.get('iterations', 10)),
                                         rng_seed=rng_seed))
    return grid


@dataclass(frozen=True)
class CellKey:
    seed: int
    variant: str
    source: str
    target: str
    attack: str


@dataclass
class ExperimentPlan:
    sources: list
    targets: list
    variants: list
    attacks: list
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = 'runs/default'
    corpus: dict = field(default_factory=lambda: dict(config.DEFAULT_CONFIG['corpus']))
    training: dict = field(default_factory=lambda: {'preset': 'desk'})
    family_groups: dict = field(default_factory=lambda: dict(config.DEFAULT_CONFIG['harness']['family_groups']))
    workers: int = 1
    train_missing: bool = True
    cache_dir: str = None

    @classmethod
    def from_config(cls, conf, models=None, variants=None, seeds=None, output_dir=None):
        """
        Build a plan from a loaded run configuration; explicit arguments win over it.
        """
        names = models or conf.get('models') or nn_models.registry_names()
        out = output_dir or conf['output']['dir']
        return cls(
            sources=list(names),
            targets=list(names),
            variants=list(variants or conf['variants']),
            attacks=attack_grid(conf['attacks']),
            seeds=list(seeds if seeds is not None else conf['seeds']),
            output_dir=out,
            corpus=dict(conf['corpus']),
            training=dict(conf['training']),
            family_groups=dict(conf['harness']['family_groups']),
            workers=int(conf['harness']['workers']),
            train_missing=bool(conf['harness']['train_missing']),
            cache_dir=conf['output'].get('cache_dir') or os.path.join(out, 'cache'),
        )

    @property
    def model_names(self):
        return list(dict.fromkeys(self.sources + self.targets))

    def validate(self):
        known = nn_models.registry_names()
        for name in self.model_names:
            if name not in known:
                raise nn_models.UnknownModelError(name, known)
        problems = []
        if not self.sources or not self.targets:
            problems.append("plan needs at least one source and one target model")
        elif not set(self.sources) & set(self.targets):
            problems.append("plan has no white-box pair (no model is both a source and a target)")
        unknown_variants = [v for v in self.variants if v not in data_pipeline.VARIANTS]
        if not self.variants:
            problems.append("plan needs at least one dataset variant")
        elif unknown_variants:
            problems.append(f"unknown variants: {', '.join(unknown_variants)}")
        if not self.attacks:
            problems.append("plan needs at least one attack config")
        labels = [a.label for a in self.attacks]
        if len(set(labels)) != len(labels):
            problems.append("attack configs must be distinct")
        for attack in self.attacks:
            try:
                attack.validate(allow_zero=False)
            except attacks.AttackConfigError as e:
                problems.append(f"{attack.label}: {e}")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            problems.append("seeds must be a non-empty list of non-negative integers")
        if self.workers < 1:
            problems.append(f"workers {self.workers} must be at least 1")
        if problems:
            raise PlanError("invalid experiment plan: " + "; ".join(problems))
        return self

    def cell_keys(self):
        return [CellKey(seed, variant, source, target, attack.label)
                for seed in self.seeds for variant in self.variants for source in self.sources
                for attack in self.attacks for target in self.targets]

    def to_dict(self):
        return {
            'sources': self.sources,
            'targets': self.targets,
            'variants': self.variants,
            'attacks': [a.to_dict() for a in self.attacks],
            'seeds': self.seeds,
            'corpus': self.corpus,
            'training': self.training,
            'family_groups': self.family_groups,
            'workers': self.workers,
        }


def build_corpus(corpus_settings):
    folder = corpus_settings.get('image_folder')
    if folder:
        return data_pipeline.load_image_folder(folder, resolution=corpus_settings['full_resolution'])
    return data_pipeline.generate_corpus(corpus_settings['n_per_class'], corpus_settings['full_resolution'],
                                         corpus_settings['seed'])


class ModelStore:
    """
    Trained models keyed by (variant, name, seed), backed by checkpoint files.

    A checkpoint is reused only when its fingerprint (spec, training config
    and variant data) matches; otherwise the model is trained and saved,
    unless training is disabled.
    """

    def __init__(self, cache_dir, training_settings, train_missing=True, force=False, progress=False):
        self.cache_dir = cache_dir
        self.training_settings = dict(training_settings or {})
        self.train_missing = train_missing
        self.force = force
        self.progress = progress
        self.reports = {}
        self.written = []
        self.models = {}
        self._lock = threading.Lock()

    def fingerprint(self, spec, train_config, variant):
        return cache.get_cache_key('checkpoint', {
            'spec': spec.to_dict(),
            'training': train_config.fingerprint(),
            'variant': variant.name,
            'corpus_hash': variant.corpus_hash,
            'split_seed': variant.seed,
        })

    def get(self, name, variant, seed):
        key = (variant.name, name, seed)
        with self._lock:
            if key not in self.models:
                self.models[key] = self._obtain(name, variant, seed)
            return self.models[key]

    def _obtain(self, name, variant, seed):
        num_classes = int(variant.labels.max()) + 1
        spec = nn_models.registry_lookup(name, resolution=variant.resolution, num_classes=num_classes)
        train_config = training.config_from_settings(self.training_settings, seed)
        fingerprint = self.fingerprint(spec, train_config, variant)
        path = cache.checkpoint_path(self.cache_dir, variant.name, name, seed)
        if not self.force and cache.get_cached_header(path, fingerprint) is not None:
            return nn_models.load_checkpoint(path)
        if not self.train_missing:
            raise MissingCheckpointError(f"no usable checkpoint for '{name}' on '{variant.name}' "
                                         f"seed {seed} at '{path}'")
        model = nn_models.build_model(spec, seed)
        report = training.train(model, variant, train_config, progress=self.progress)
        nn_models.save_checkpoint(model, path, fingerprint=fingerprint)
        report_path = cache.train_report_path(self.cache_dir, variant.name, name, seed)
        report.write_csv(report_path)
        self.reports[(variant.name, name, seed)] = report
        self.written.extend([path, report_path])
        logging.info(f"Trained {name} on {variant.name} (seed {seed}) in {report.wall_time:.1f}s, "
                     f"stopped at epoch {report.stopped_epoch}")
        return model

    def artifacts(self):
        """Checkpoint and training-report files of every model this store has handed out."""
        paths = []
        for variant_name, name, seed in self.models:
            for path in (cache.checkpoint_path(self.cache_dir, variant_name, name, seed),
                         cache.train_report_path(self.cache_dir, variant_name, name, seed)):
                if os.path.exists(path):
                    paths.append(path)
        return paths


class TransferMatrix:
    """
    Adversarial accuracy per (seed, variant, source, target, attack) cell plus
    the clean baseline per (seed, variant, target).
    """

    def __init__(self, attack_configs, families=None, family_groups=None):
        self.attacks = {a.label: a for a in attack_configs}
        self.families = dict(families or {})
        self.family_groups = dict(family_groups or {})
        self.cells = {}
        self.clean = {}
        self.expected = []
        self.attack_stats = {}
        self.generation_log = []
        self.max_violation = 0.0
        self.corpus_hashes = {}

    def set_clean(self, seed, variant, target, accuracy):
        self.clean[(seed, variant, target)] = accuracy

    def record(self, key, accuracy):
        if accuracy is not None and not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} for {key} is outside [0, 1]")
        self.cells[key] = accuracy

    def missing_cells(self):
        return [key for key in self.expected if key not in self.cells]

    def cell_frame(self):
        """One row per recorded cell with numeric accuracies (NaN for n/a cells)."""
        records = []
        for key, accuracy in self.cells.items():
            clean = self.clean.get((key.seed, key.variant, key.target), math.nan)
            adv = math.nan if accuracy is None else accuracy
            records.append({
                'seed': key.seed, 'variant': key.variant, 'source': key.source, 'target': key.target,
                'attack': key.attack, 'clean_acc': clean, 'adv_acc': adv, 'drop': clean - adv,
                'white_box': key.source == key.target,
                'source_family': self.families.get(key.source, key.source),
                'target_family': self.families.get(key.target, key.target),
            })
        return pd.DataFrame(records, columns=['seed', 'variant', 'source', 'target', 'attack', 'clean_acc',
                                              'adv_acc', 'drop', 'white_box', 'source_family', 'target_family'])

    def to_frame(self):
        """The CSV view: one row per cell, floats with 6 decimals, n/a where undefined."""
        def fmt(value):
            return NOT_AVAILABLE if value is None or math.isnan(value) else f"{value:.6f}"

        rows = []
        for key, accuracy in self.cells.items():
            attack = self.attacks[key.attack]
            clean = self.clean.get((key.seed, key.variant, key.target))
            alpha = attacks.resolve_alpha(attack) if attack.kind == 'pgd' else None
            drop = None if clean is None or accuracy is None else clean - accuracy
            rows.append({
                'variant': key.variant, 'source': key.source, 'target': key.target, 'attack': key.attack,
                'epsilon': fmt(attack.epsilon), 'alpha': fmt(alpha), 'iterations': str(attack.step_count),
                'seed': str(key.seed), 'clean_acc': fmt(clean), 'adv_acc': fmt(accuracy), 'drop': fmt(drop),
            })
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def write_csv(self, path):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator='\n')


def _evaluate_cell(model, adversarial_set):
    try:
        return training.evaluate_accuracy(model, adversarial_set.examples, adversarial_set.labels)
    except (tc.ShapeError, attacks.ResolutionMismatchError) as e:
        logging.warning(f"Skipping {adversarial_set.source_model} -> {model.name}: {e}")
        return None


def run_plan(plan, store=None, corpus=None, progress=False):
    """
    Evaluate every (source, target, attack) cell of the plan for each seed and variant.

    Each adversarial set is generated once per (seed, variant, source, attack)
    and evaluated on all targets, optionally on a thread pool.
    """
    plan.validate()
    if store is None:
        store = ModelStore(plan.cache_dir or os.path.join(plan.output_dir, 'cache'), plan.training,
                           train_missing=plan.train_missing, progress=progress)
    corpus = corpus if corpus is not None else build_corpus(plan.corpus)
    families = {name: nn_models.registry_lookup(name).family for name in plan.model_names}
    matrix = TransferMatrix(plan.attacks, families, plan.family_groups)
    matrix.expected = plan.cell_keys()

    for seed in plan.seeds:
        for variant_name in plan.variants:
            variant = data_pipeline.build_variant(corpus, variant_name, plan.corpus['full_resolution'],
                                                  plan.corpus['shrunk_resolution'], seed)
            matrix.corpus_hashes[variant_name] = variant.corpus_hash
            models = {name: store.get(name, variant, seed) for name in plan.model_names}
            images, labels = variant.split(EVALUATION_SPLIT)
            for target in plan.targets:
                matrix.set_clean(seed, variant_name, target, training.evaluate_accuracy(models[target], images, labels))

            jobs = [(source, attack) for source in plan.sources for attack in plan.attacks]
            for source, attack in tqdm(jobs, desc=f"Attacking {variant_name} (seed {seed})", disable=not progress):
                cell_config = replace(attack, rng_seed=cell_seed(attack.rng_seed, seed, variant_name, source))
                adversarial_set = attacks.generate_adversarial_set(models[source], variant, cell_config)
                matrix.generation_log.append((seed, variant_name, source, attack.label))
                matrix.attack_stats[(seed, variant_name, source, attack.label)] = adversarial_set.stats
                matrix.max_violation = max(matrix.max_violation, adversarial_set.max_violation(images))
                with ThreadPoolExecutor(max_workers=plan.workers) as pool:
                    results = list(pool.map(lambda t: _evaluate_cell(models[t], adversarial_set), plan.targets))
                for target, accuracy in zip(plan.targets, results):
                    key = CellKey(seed, variant_name, source, target, attack.label)
                    matrix.record(key, accuracy)
                    logging.info(f"{key.variant} seed {seed} {source} -> {target} {attack.label}: "
                                 f"{'n/a' if accuracy is None else f'{accuracy:.4f}'}")
    return matrix


@dataclass
class Summary:
    targets: pd.DataFrame
    family_pairs: pd.DataFrame


def summarize(matrix):
    """
    Per-target clean/white-box/black-box accuracies with drops, and the mean
    transfer drop of each (source family, target family) pair.

    Seeds are reported individually; with more than one seed, extra rows
    labelled 'mean' average over them.
    """
    missing = matrix.missing_cells()
    if missing:
        raise IncompleteMatrixError(f"matrix is missing {len(missing)} cells, first {missing[0]}")
    frame = matrix.cell_frame().dropna(subset=['adv_acc']).copy()
    frame['seed'] = frame['seed'].astype(str)

    rows = []
    for (seed, variant, attack, target), group in frame.groupby(['seed', 'variant', 'attack', 'target'], sort=False):
        clean = group['clean_acc'].iloc[0]
        white = group.loc[group['white_box'], 'adv_acc']
        black = group.loc[~group['white_box'], 'adv_acc']
        white_acc = white.mean() if len(white) else math.nan
        black_mean = black.mean() if len(black) else math.nan
        rows.append({
            'seed': seed, 'variant': variant, 'attack': attack, 'target': target, 'clean_acc': clean,
            'white_box_acc': white_acc, 'black_box_mean': black_mean,
            'black_box_min': black.min() if len(black) else math.nan,
            'white_box_drop': clean - white_acc, 'black_box_drop': clean - black_mean,
        })
    targets = pd.DataFrame(rows, columns=['seed', 'variant', 'attack', 'target', 'clean_acc', 'white_box_acc',
                                          'black_box_mean', 'black_box_min', 'white_box_drop', 'black_box_drop'])

    black_cells = frame[~frame['white_box']]
    pairs = (black_cells.groupby(['seed', 'variant', 'attack', 'source_family', 'target_family'], sort=False)
             .agg(cells=('drop', 'size'), mean_drop=('drop', 'mean'))
             .reset_index())

    if frame['seed'].nunique() > 1:
        numeric = ['clean_acc', 'white_box_acc', 'black_box_mean', 'black_box_min', 'white_box_drop',
                   'black_box_drop']
        means = targets.groupby(['variant', 'attack', 'target'], sort=False)[numeric].mean().reset_index()
        targets = pd.concat([targets, means.assign(seed='mean')[targets.columns]], ignore_index=True)
        pair_means = (pairs.groupby(['variant', 'attack', 'source_family', 'target_family'], sort=False)
                      .agg(cells=('cells', 'sum'), mean_drop=('mean_drop', 'mean')).reset_index())
        pairs = pd.concat([pairs, pair_means.assign(seed='mean')[pairs.columns]], ignore_index=True)
    return Summary(targets, pairs)


def trend_report(matrix, summary=None):
    """
    Informational findings: within- vs cross-group transfer, variant robustness
    and FGSM white-box monotonicity in epsilon. Nothing here fails a run.
    """
    findings = []
    frame = matrix.cell_frame().dropna(subset=['adv_acc'])
    black = frame[~frame['white_box']].copy()
    groups = matrix.family_groups
    if len(black):
        black['same_group'] = [groups.get(s, s) == groups.get(t, t)
                               for s, t in zip(black['source_family'], black['target_family'])]
        within = black.loc[black['same_group'], 'drop']
        cross = black.loc[~black['same_group'], 'drop']
        if len(within) and len(cross):
            agrees = within.mean() > cross.mean()
            findings.append(f"within-group transfer drop {within.mean():.4f} vs cross-group {cross.mean():.4f}: "
                            f"{'within exceeds cross' if agrees else 'within does not exceed cross (disagrees)'}")
        by_variant = black.groupby('variant', sort=False)['drop'].mean()
        if 'full-aug' in by_variant:
            for name in ('shrunk-aug', 'shrunk-noaug'):
                if name in by_variant:
                    larger = by_variant[name] > by_variant['full-aug']
                    findings.append(f"black-box drop on {name} {by_variant[name]:.4f} vs full-aug "
                                    f"{by_variant['full-aug']:.4f}: {'larger' if larger else 'not larger (disagrees)'}")

    fgsm = {label: a.epsilon for label, a in matrix.attacks.items() if a.kind == 'fgsm'}
    white = frame[frame['white_box'] & frame['attack'].isin(list(fgsm))].copy()
    if len(white):
        white['epsilon'] = white['attack'].map(fgsm)
        for (seed, variant, source), group in white.groupby(['seed', 'variant', 'source'], sort=False):
            accuracies = group.sort_values('epsilon')['adv_acc'].tolist()
            epsilons = sorted(group['epsilon'])
            for (e0, a0), (e1, a1) in zip(zip(epsilons, accuracies), zip(epsilons[1:], accuracies[1:])):
                if a1 > a0:
                    findings.append(f"FGSM white-box accuracy of {source} on {variant} (seed {seed}) rises from "
                                    f"{a0:.4f} at eps {e0:g} to {a1:.4f} at eps {e1:g}")
    for finding in findings:
        logging.info(f"Trend: {finding}")
    return findings


def write_manifest(path, plan, matrix, files, extra=None):
    """
    JSON run manifest: plan, seeds, corpus hash, code version and every file written.
    """
    manifest = {
        'code_version': CODE_VERSION,
        'evaluation_split': EVALUATION_SPLIT,
        'plan': plan.to_dict(),
        'corpus_hashes': matrix.corpus_hashes,
        'generations': len(matrix.generation_log),
        'max_constraint_violation': matrix.max_violation,
        'attack_stats': [
            {'seed': k[0], 'variant': k[1], 'source': k[2], 'attack': k[3], **stats}
            for k, stats in matrix.attack_stats.items()
        ],
        'files': sorted(files),
    }
    if extra:
        manifest.update(extra)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
