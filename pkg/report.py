#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import base64
import io
import logging
import math
import os
import xml.etree.ElementTree as ET

import numpy as np
import pandas as pd
from PIL import Image

import attacks
import config
import nn_models
import transfer_harness as th

PLOT_TOP = 40.0
PLOT_LEFT = 50.0
PLOT_HEIGHT = 300.0
BAR_WIDTH = 12.0
GROUP_GAP = 24.0
LEGEND_WIDTH = 180.0
PALETTE = ['#4e79a7', '#f28e2b', '#e15759', '#76b7b2', '#59a14f', '#edc948', '#b07aa1', '#ff9da7', '#9c755f',
           '#bab0ac']
FLOAT_COLUMNS = ['epsilon', 'alpha', 'clean_acc', 'adv_acc', 'drop']
SAMPLE_SCALE = 2
PERTURBATION_GAIN = 10.0


class ReportError(ValueError):
    pass


def _num(value):
    return repr(float(value))


def _parse_float(value, column, line):
    if value == th.NOT_AVAILABLE:
        return math.nan
    try:
        return float(value)
    except ValueError:
        raise ReportError(f"line {line}: column '{column}' has non-numeric value '{value}'")


def read_matrix_csv(path):
    """
    Read and validate a matrix CSV; numeric columns come back as floats (NaN for n/a).
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ReportError(f"matrix file '{path}' is empty")
    except pd.errors.ParserError as e:
        raise ReportError(f"matrix file '{path}' is malformed: {e}")
    except OSError as e:
        raise ReportError(f"Could not read matrix file '{path}': {e}")
    if list(raw.columns) != th.CSV_COLUMNS:
        raise ReportError(f"line 1: expected header {','.join(th.CSV_COLUMNS)}, got {','.join(raw.columns)}")
    if raw.empty:
        raise ReportError(f"matrix file '{path}' has no rows")

    records = []
    for offset, row in enumerate(raw.to_dict('records')):
        line = offset + 2
        for column, value in row.items():
            if not isinstance(value, str) or value == '':
                raise ReportError(f"line {line}: missing value in column '{column}'")
        record = dict(row)
        for column in FLOAT_COLUMNS:
            record[column] = _parse_float(row[column], column, line)
        for column in ('iterations', 'seed'):
            if not row[column].isdigit():
                raise ReportError(f"line {line}: column '{column}' must be a non-negative integer, got '{row[column]}'")
            record[column] = int(row[column])
        for column in ('clean_acc', 'adv_acc'):
            if not math.isnan(record[column]) and not 0.0 <= record[column] <= 1.0:
                raise ReportError(f"line {line}: {column} {record[column]} is outside [0, 1]")
        records.append(record)
    return pd.DataFrame(records, columns=th.CSV_COLUMNS)


def _attack_from_row(row):
    label, epsilon = row['attack'], row['epsilon']
    if label.startswith('fgsm'):
        return attacks.AttackConfig('fgsm', epsilon)
    iterations = int(row['iterations'])
    prefix = f"pgd_eps{epsilon:g}_"
    schedule = label[len(prefix):label.rfind('_it')] if label.startswith(prefix) else ''
    if schedule in ('eps_over_4', 'eps_over_iters'):
        return attacks.AttackConfig('pgd', epsilon, alpha_schedule=schedule, iterations=iterations)
    return attacks.AttackConfig('pgd', epsilon, alpha_schedule='fixed', alpha=row['alpha'], iterations=iterations)


def matrix_from_frame(frame, family_groups=None):
    """
    Rebuild a TransferMatrix from read_matrix_csv output so it can be summarized.
    """
    known = set(nn_models.registry_names())
    names = set(frame['source']) | set(frame['target'])
    families = {name: nn_models.registry_lookup(name).family if name in known else name for name in names}
    matrix = th.TransferMatrix([], families, family_groups or config.DEFAULT_CONFIG['harness']['family_groups'])
    for row in frame.to_dict('records'):
        matrix.attacks.setdefault(row['attack'], _attack_from_row(row))
        if not math.isnan(row['clean_acc']):
            matrix.set_clean(row['seed'], row['variant'], row['target'], row['clean_acc'])
        key = th.CellKey(row['seed'], row['variant'], row['source'], row['target'], row['attack'])
        matrix.record(key, None if math.isnan(row['adv_acc']) else row['adv_acc'])
    return matrix


def chart_filename(variant, attack):
    return f"{variant}__{attack}.svg"


def render_chart(frame, variant, attack):
    """
    Grouped bar chart for one (variant, attack): a group per target, a bar per
    source, bar height adv_acc * PLOT_HEIGHT and a clean-accuracy reference line.
    Values are averaged over seeds.
    """
    subset = frame[(frame['variant'] == variant) & (frame['attack'] == attack)]
    if subset.empty:
        raise ReportError(f"no rows for variant '{variant}' and attack '{attack}'")
    cells = subset.groupby(['target', 'source'], sort=False)[['clean_acc', 'adv_acc']].mean()
    targets = list(dict.fromkeys(subset['target']))
    sources = list(dict.fromkeys(subset['source']))
    group_width = BAR_WIDTH * len(sources)
    plot_width = len(targets) * (group_width + GROUP_GAP)
    width = PLOT_LEFT + plot_width + LEGEND_WIDTH
    height = PLOT_TOP + PLOT_HEIGHT + 60.0
    baseline = PLOT_TOP + PLOT_HEIGHT

    svg = ET.Element('svg', xmlns='http://www.w3.org/2000/svg', width=_num(width), height=_num(height),
                     viewBox=f"0 0 {_num(width)} {_num(height)}")
    svg.append(ET.Comment('\n' + f"evaluation split: {th.EVALUATION_SPLIT}\n"
                          + subset.to_csv(index=False, lineterminator='\n', na_rep=th.NOT_AVAILABLE,
                                          float_format='%.6f')))
    title = ET.SubElement(svg, 'text', x=_num(PLOT_LEFT), y='20', attrib={'font-size': '14'})
    title.text = f"{variant} / {attack}: adversarial accuracy by target (bars: source)"
    ET.SubElement(svg, 'line', x1=_num(PLOT_LEFT), y1=_num(baseline), x2=_num(PLOT_LEFT + plot_width),
                  y2=_num(baseline), stroke='#000000')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        label = ET.SubElement(svg, 'text', x='5', y=_num(baseline - tick * PLOT_HEIGHT), attrib={'font-size': '10'})
        label.text = f"{tick:.2f}"

    for g, target in enumerate(targets):
        x0 = PLOT_LEFT + g * (group_width + GROUP_GAP) + GROUP_GAP / 2
        group = ET.SubElement(svg, 'g', attrib={'class': 'target', 'data-target': target})
        for b, source in enumerate(sources):
            if (target, source) not in cells.index:
                continue
            adv = cells.loc[(target, source), 'adv_acc']
            if math.isnan(adv):
                ET.SubElement(group, 'rect', x=_num(x0 + b * BAR_WIDTH), y=_num(baseline), width=_num(BAR_WIDTH),
                              height='0', attrib={'class': 'bar-na', 'data-source': source})
                continue
            bar_height = adv * PLOT_HEIGHT
            ET.SubElement(group, 'rect', x=_num(x0 + b * BAR_WIDTH), y=_num(baseline - bar_height),
                          width=_num(BAR_WIDTH), height=_num(bar_height), fill=PALETTE[b % len(PALETTE)],
                          attrib={'class': 'bar', 'data-source': source})
        clean = cells.xs(target, level='target')['clean_acc'].dropna()
        if len(clean):
            y = baseline - float(clean.iloc[0]) * PLOT_HEIGHT
            ET.SubElement(group, 'line', x1=_num(x0), y1=_num(y), x2=_num(x0 + group_width), y2=_num(y),
                          stroke='#000000', attrib={'class': 'clean', 'stroke-dasharray': '4 2'})
        name = ET.SubElement(group, 'text', x=_num(x0), y=_num(baseline + 15), attrib={'font-size': '9'})
        name.text = target

    for b, source in enumerate(sources):
        y = PLOT_TOP + b * 14.0
        x = PLOT_LEFT + plot_width + 10.0
        ET.SubElement(svg, 'rect', x=_num(x), y=_num(y), width='10', height='10', fill=PALETTE[b % len(PALETTE)])
        entry = ET.SubElement(svg, 'text', x=_num(x + 14), y=_num(y + 9), attrib={'font-size': '10'})
        entry.text = source
    return ET.ElementTree(svg)


def _png_data_uri(pixels):
    array = np.clip(np.round(np.transpose(pixels, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(array, mode='RGB').save(buffer, format='PNG')
    return 'data:image/png;base64,' + base64.b64encode(buffer.getvalue()).decode('ascii')


def render_sample_sheet(originals, adversarials, labels, title, count=4):
    """
    SVG sheet with rows of (original, adversarial, amplified perturbation) images.
    """
    count = min(count, len(originals))
    if count == 0:
        raise ReportError("sample sheet needs at least one example")
    size = originals.shape[-1] * SAMPLE_SCALE
    cell = size + 10
    width, height = 3 * cell + 100, count * cell + 40
    svg = ET.Element('svg', xmlns='http://www.w3.org/2000/svg', attrib={'xmlns:xlink': 'http://www.w3.org/1999/xlink'},
                     width=str(width), height=str(height))
    heading = ET.SubElement(svg, 'text', x='5', y='15', attrib={'font-size': '12'})
    heading.text = title
    for row in range(count):
        perturbation = np.clip(0.5 + PERTURBATION_GAIN * (adversarials[row] - originals[row]), 0.0, 1.0)
        y = 30 + row * cell
        for col, pixels in enumerate((originals[row], adversarials[row], perturbation)):
            ET.SubElement(svg, 'image', x=str(col * cell), y=str(y), width=str(size), height=str(size),
                          attrib={'xlink:href': _png_data_uri(pixels), 'class': ('original', 'adversarial',
                                                                                 'perturbation')[col]})
        label = ET.SubElement(svg, 'text', x=str(3 * cell + 5), y=str(y + size // 2), attrib={'font-size': '10'})
        label.text = f"label {int(labels[row])}"
    return ET.ElementTree(svg)


def write_svg(tree, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tree.write(path, encoding='utf-8', xml_declaration=True)


def format_summary(summary, findings=()):
    """
    Plain-text summary tables with the evaluation split stated up front.
    """
    def fmt(value):
        return th.NOT_AVAILABLE if isinstance(value, float) and math.isnan(value) else f"{value:.4f}"

    lines = [
        'Adversarial transfer summary',
        f"evaluation split: {th.EVALUATION_SPLIT}",
        '',
        'Per target (accuracy drop = clean - attacked):',
        summary.targets.to_string(index=False, float_format=fmt),
        '',
        'Mean black-box drop per family pair:',
        summary.family_pairs.to_string(index=False, float_format=fmt),
    ]
    if findings:
        lines += ['', 'Trends:'] + [f"- {finding}" for finding in findings]
    return '\n'.join(lines) + '\n'


def write_report(csv_path, out_dir):
    """
    Render one chart per (variant, attack) plus summary.txt; returns the files written.

    The CSV is fully validated before anything is written.
    """
    frame = read_matrix_csv(csv_path)
    matrix = matrix_from_frame(frame)
    summary = th.summarize(matrix)
    findings = th.trend_report(matrix, summary)
    charts = [(variant, attack, render_chart(frame, variant, attack))
              for variant, attack in dict.fromkeys(zip(frame['variant'], frame['attack']))]

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for variant, attack, tree in charts:
        path = os.path.join(out_dir, chart_filename(variant, attack))
        write_svg(tree, path)
        written.append(path)
    summary_path = os.path.join(out_dir, 'summary.txt')
    with open(summary_path, 'w', encoding='utf-8') as f:
        f.write(format_summary(summary, findings))
    written.append(summary_path)
    logging.info(f"Wrote {len(charts)} charts and a summary to '{out_dir}'")
    return written
