#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

import attacks
import cache
import config
import data_pipeline
import nn_models
import report
import training
import transfer_harness as th

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
SAMPLE_COUNT = 4
PROFILE_BATCH = 8


class ArgumentParser(argparse.ArgumentParser):

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to the YAML run configuration (default: ./config.yaml if present).")
    common.add_argument("--seed", type=int, help="Run a single seed instead of the configured seed list.")
    common.add_argument("--force", action="store_true", help="Retrain models even when valid checkpoints exist.")
    common.add_argument("--out", help="Output directory (overrides output.dir).")
    common.add_argument("--models", help="Comma-separated registry names (default: configured models).")
    common.add_argument("--variant", choices=list(data_pipeline.VARIANTS), help="Restrict to one dataset variant.")
    common.add_argument("--verbose", action="store_true", help="Enable detailed logging.")
    common.add_argument("--no-progress", action="store_true", help="Hide progress bars.")

    parser = ArgumentParser(description="Train desk-scale image classifiers and measure how FGSM/PGD "
                                        "adversarial examples transfer between them.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-data", parents=[common], help="Generate the corpus and its split manifest.")
    commands.add_parser("train", parents=[common], help="Train and checkpoint models per variant.")
    commands.add_parser("attack", parents=[common], help="Generate adversarial sets and sample sheets.")
    commands.add_parser("matrix", parents=[common], help="Run the full transfer matrix and write CSV + manifest.")
    report_parser = commands.add_parser("report", parents=[common], help="Render SVG charts and a text summary.")
    report_parser.add_argument("csv", nargs="?", help="Matrix CSV (default: <out>/matrix.csv).")
    return parser


def apply_overrides(conf, args):
    conf = copy.deepcopy(conf)
    if args.out:
        conf['output']['dir'] = args.out
    if args.seed is not None:
        if args.seed < 0:
            raise config.ConfigError(f"--seed must be non-negative, got {args.seed}")
        conf['seeds'] = [args.seed]
    if args.models:
        names = [name.strip() for name in args.models.split(',') if name.strip()]
        for name in names:
            nn_models.registry_lookup(name)
        conf['models'] = names
    if args.variant:
        conf['variants'] = [args.variant]
    conf['output']['cache_dir'] = cache.get_cache_dir(conf)
    return conf


def check_training(conf):
    """Resolve the training section up front; bad presets or values raise ConfigError."""
    try:
        training.config_from_settings(conf['training'])
    except (TypeError, ValueError) as e:
        raise config.ConfigError(f"invalid training section: {e}")


def _model_names(conf):
    return conf.get('models') or nn_models.registry_names()


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _variants(conf, corpus, seed):
    corpus_settings = conf['corpus']
    return [data_pipeline.build_variant(corpus, name, corpus_settings['full_resolution'],
                                        corpus_settings['shrunk_resolution'], seed)
            for name in conf['variants']]


def _store(conf, args, train_missing=None):
    return th.ModelStore(conf['output']['cache_dir'], conf['training'],
                         train_missing=conf['harness']['train_missing'] if train_missing is None else train_missing,
                         force=args.force, progress=not args.no_progress)


def cmd_gen_data(args, conf):
    out = conf['output']['dir']
    corpus = th.build_corpus(conf['corpus'])
    corpus_path = os.path.join(out, 'corpus.ctr')
    data_pipeline.save_corpus(corpus_path, corpus, conf['corpus']['seed'])
    written = [corpus_path]
    for seed in conf['seeds']:
        manifest_path = os.path.join(out, f"corpus_manifest_seed{seed}.json")
        data_pipeline.write_manifest(manifest_path, conf['corpus']['seed'], _variants(conf, corpus, seed),
                                     extra={'files': [corpus_path, manifest_path]})
        written.append(manifest_path)
    for path in written:
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_train(args, conf):
    store = _store(conf, args, train_missing=True)
    corpus = th.build_corpus(conf['corpus'])
    for seed in conf['seeds']:
        for variant in _variants(conf, corpus, seed):
            for name in _model_names(conf):
                store.get(name, variant, seed)
                path = cache.checkpoint_path(store.cache_dir, variant.name, name, seed)
                status = 'trained' if (variant.name, name, seed) in store.reports else 'up to date'
                print(f"{name} on {variant.name} (seed {seed}): {status} -> {path}")
    manifest_path = os.path.join(conf['output']['dir'], 'train_manifest.json')
    files = store.artifacts() + [manifest_path]
    _write_json(manifest_path, {'code_version': th.CODE_VERSION, 'training': conf['training'],
                                'seeds': conf['seeds'], 'files': files})
    print(f"Manifest: {manifest_path}")
    return EXIT_OK


def cmd_attack(args, conf):
    out = conf['output']['dir']
    store = _store(conf, args)
    corpus = th.build_corpus(conf['corpus'])
    grid = th.attack_grid(conf['attacks'])
    files, stats = [], []
    for seed in conf['seeds']:
        for variant in _variants(conf, corpus, seed):
            originals, _ = variant.split(th.EVALUATION_SPLIT)
            for source in _model_names(conf):
                model = store.get(source, variant, seed)
                for attack in grid:
                    cell_config = replace(attack, rng_seed=th.cell_seed(attack.rng_seed, seed, variant.name, source))
                    adversarial_set = attacks.generate_adversarial_set(model, variant, cell_config,
                                                                       progress=not args.no_progress)
                    set_path = cache.adversarial_path(store.cache_dir, variant.name, source, attack.label, seed)
                    adversarial_set.save(set_path)
                    sheet = report.render_sample_sheet(originals, adversarial_set.examples, adversarial_set.labels,
                                                       f"{source} / {attack.label} on {variant.name} (seed {seed})",
                                                       count=SAMPLE_COUNT)
                    sheet_path = os.path.join(out, 'samples', variant.name, f"{source}__{attack.label}_seed{seed}.svg")
                    report.write_svg(sheet, sheet_path)
                    files += [set_path, sheet_path]
                    stats.append({'seed': seed, 'variant': variant.name, 'source': source,
                                  'attack': attack.label, **adversarial_set.stats})
    manifest_path = os.path.join(out, 'attack_manifest.json')
    files = sorted(store.artifacts() + files + [manifest_path])
    _write_json(manifest_path, {'code_version': th.CODE_VERSION, 'evaluation_split': th.EVALUATION_SPLIT,
                                'attack_stats': stats, 'files': files})
    print(f"Wrote {len(files) - 1} attack artifacts; manifest: {manifest_path}")
    return EXIT_OK


def _profiles(store):
    profiles = []
    for (variant_name, name, seed), model in store.models.items():
        entry = {'variant': variant_name, 'model': name, 'seed': seed}
        batch = np.zeros((PROFILE_BATCH, *model.spec.input_shape))
        entry.update(nn_models.profile_model(model, batch))
        trained = store.reports.get((variant_name, name, seed))
        entry['train_seconds'] = trained.wall_time if trained else None
        profiles.append(entry)
    return profiles


def cmd_matrix(args, conf):
    out = conf['output']['dir']
    plan = th.ExperimentPlan.from_config(conf, output_dir=out)
    store = _store(conf, args)
    matrix = th.run_plan(plan, store=store, progress=not args.no_progress)
    csv_path = os.path.join(out, 'matrix.csv')
    matrix.write_csv(csv_path)
    profiles_path = os.path.join(out, 'profiles.json')
    _write_json(profiles_path, {'profiles': _profiles(store)})
    manifest_path = os.path.join(out, 'manifest.json')
    files = store.artifacts() + [csv_path, profiles_path, manifest_path]
    th.write_manifest(manifest_path, plan, matrix, files)
    summary = th.summarize(matrix)
    findings = th.trend_report(matrix, summary)
    print(report.format_summary(summary, findings))
    print(f"Wrote {csv_path} and {manifest_path}")
    return EXIT_OK


def cmd_report(args, conf):
    out = conf['output']['dir']
    csv_path = args.csv or os.path.join(out, 'matrix.csv')
    report_dir = os.path.join(out, 'report')
    written = report.write_report(csv_path, report_dir)
    manifest_path = os.path.join(report_dir, 'report_manifest.json')
    _write_json(manifest_path, {'code_version': th.CODE_VERSION, 'evaluation_split': th.EVALUATION_SPLIT,
                                'matrix_csv': csv_path, 'files': written + [manifest_path]})
    for path in written + [manifest_path]:
        print(f"Wrote {path}")
    return EXIT_OK


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'attack': cmd_attack,
    'matrix': cmd_matrix,
    'report': cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    log_level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=log_level, format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        conf = apply_overrides(config.load_config(args.config, reload=True), args)
        check_training(conf)
        config.validate_paths(conf)
        return COMMANDS[args.command](args, conf)
    except (config.ConfigError, nn_models.UnknownModelError, th.PlanError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, LookupError, OSError, RuntimeError) as e:
        logging.debug("Run failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
