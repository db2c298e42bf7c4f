"""Reporting: shape silhouettes (SVG), trace exports, random-shape search."""
import copy
import csv
import logging
import os
import time
from dataclasses import fields
from xml.sax.saxutils import escape

import numpy as np

from .calculus import ShapePlan, estimate_macs
from .network import build_network, static_plan
from .trainer import ShapeTrace, TraceRecord, evaluate, parse_shape_trace, record_shape_trace, train

logger = logging.getLogger(__name__)

SVG_WIDTH = 400
SVG_HEIGHT = 300
SVG_MARGIN = 10
SEARCH_COLUMNS = ("trial", "seed", "factors", "macs", "accuracy", "wall_seconds")
TRACE_COLUMNS = tuple(f.name for f in fields(TraceRecord))


# ---------------------------------------------------------------------------
# silhouettes

def layer_dims(plan_or_trace):
    """Per-layer spatial dims of a plan, a trace (its last record), or a
    plain sequence of dims."""
    if isinstance(plan_or_trace, ShapeTrace):
        if not len(plan_or_trace):
            raise ValueError("cannot render an empty trace")
        last = plan_or_trace.records[-1]
        return [int(d) for d in (last.cell_dims or last.dims)]
    if isinstance(plan_or_trace, ShapePlan):
        dims = plan_or_trace.cell_dims or plan_or_trace.dims
        return [int(d) for d in dims]
    if isinstance(plan_or_trace, dict):
        dims = plan_or_trace.get("cell_dims") or plan_or_trace.get("dims")
        if dims is None:
            raise ValueError("plan dict needs 'cell_dims' or 'dims'")
        return [int(d) for d in dims]
    return [int(d) for d in plan_or_trace]


def silhouette_bars(dims):
    """Group consecutive equal dims into ``(dim, count)`` bars."""
    bars = []
    for d in dims:
        if bars and bars[-1][0] == d:
            bars[-1][1] += 1
        else:
            bars.append([d, 1])
    return [tuple(b) for b in bars]


def render_shape_svg(plan_or_trace, title=None):
    """SVG text: stacked, centred horizontal bars, width proportional to the
    spatial dim and height to the share of layers at that dim."""
    dims = layer_dims(plan_or_trace)
    if not dims:
        raise ValueError("cannot render an empty plan")
    if min(dims) < 1:
        raise ValueError("dims must be >= 1")
    bars = silhouette_bars(dims)
    widest = max(dims)
    inner_w = SVG_WIDTH - 2 * SVG_MARGIN
    inner_h = SVG_HEIGHT - 2 * SVG_MARGIN
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" '
        f'height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
    ]
    if title:
        lines.append(f"  <title>{escape(title)}</title>")
    y = float(SVG_MARGIN)
    for d, count in bars:
        w = inner_w * d / widest
        h = inner_h * count / len(dims)
        x = SVG_MARGIN + (inner_w - w) / 2
        lines.append(f'  <rect x="{x:.3f}" y="{y:.3f}" width="{w:.3f}" height="{h:.3f}" '
                     f'fill="#4a7ab5" stroke="#1f3d63" stroke-width="0.5">'
                     f'<title>{d}x{d} x {count}</title></rect>')
        y += h
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_shape_svg(plan_or_trace, path, title=None):
    text = render_shape_svg(plan_or_trace, title)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# trace export

def export_trace_json(trace, path):
    """Line-delimited JSON, one object per record with the ``TraceRecord``
    fields (iteration, epoch, event, factors, raw_alphas, rho, dims, loss,
    alpha_lr, weight_lr)."""
    with open(path, "w", encoding="utf-8") as fh:
        record_shape_trace(trace, fh)


def read_trace(path):
    with open(path, encoding="utf-8") as fh:
        return parse_shape_trace(fh)


def export_trace_csv(trace, path):
    """One row per record; list fields are semicolon-joined."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in trace:
            row = []
            for name in TRACE_COLUMNS:
                v = getattr(rec, name)
                if v is None:
                    v = ""
                row.append(";".join(repr(x) for x in v) if isinstance(v, list) else v)
            writer.writerow(row)


# ---------------------------------------------------------------------------
# random-shape search

def uniform_factors(rng, n, space):
    """Each factor uniform on ``[r_min, r_max)``."""
    return [float(f) for f in rng.uniform(space.r_min, space.r_max, size=n)]


def _resizing_cells(spec):
    return [i for i, c in enumerate(spec.cells) if c.resizes]


def random_shape_spec(base_spec, factors):
    """Copy of ``base_spec`` whose resizing cells become fixed layers with
    ``factors`` (mode ``random_fixed``)."""
    spec = copy.deepcopy(base_spec)
    positions = _resizing_cells(spec)
    if len(positions) != len(factors):
        raise ValueError(f"spec has {len(positions)} resizing cells, got {len(factors)} factors")
    for i, f in zip(positions, factors):
        spec.cells[i].has_adaptor = False
        spec.cells[i].resize_factor = float(f)
    spec.mode = "random_fixed"
    return spec


def _completed_trials(csv_path):
    if not csv_path or not os.path.exists(csv_path):
        return {}
    with open(csv_path, newline="") as fh:
        return {int(row["trial"]): row for row in csv.DictReader(fh)}


def random_shape_search(base_spec, trials, config, seed=0, dataset=None, csv_path=None,
                        eval_dataset=None, sampler=uniform_factors):
    """Train ``trials`` networks whose fixed reshaping factors are drawn by
    ``sampler(rng, n, space)``; trial ``t`` uses seed ``seed + t``.

    Rows are appended to ``csv_path`` as trials finish; trials already in
    the file are skipped, so an interrupted search resumes where it stopped.
    Returns all rows (dicts with ``SEARCH_COLUMNS``) sorted by trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if dataset is None:
        raise ValueError("random_shape_search needs a training dataset")
    n = len(_resizing_cells(base_spec))
    if n == 0:
        raise ValueError("base spec has no resizing cells to randomise")
    done = _completed_trials(csv_path)
    fresh = csv_path is not None and not os.path.exists(csv_path)
    rows = dict(done)
    for t in range(trials):
        if t in done:
            continue
        trial_seed = seed + t
        factors = sampler(np.random.default_rng(trial_seed), n, base_spec.search_space)
        spec = random_shape_spec(base_spec, factors)
        cfg = copy.deepcopy(config)
        cfg.seed = trial_seed
        start = time.perf_counter()
        model = build_network(spec, cfg, seed=trial_seed)
        train(model, dataset, cfg)
        accuracy = evaluate(model, eval_dataset or dataset)
        row = {
            "trial": t, "seed": trial_seed,
            "factors": ";".join(repr(float(f)) for f in factors),
            "macs": estimate_macs(spec, static_plan(spec, [])),
            "accuracy": accuracy,
            "wall_seconds": round(time.perf_counter() - start, 3),
        }
        logger.info("trial %d: macs=%d accuracy=%.4f", t, row["macs"], accuracy)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                writer = csv.DictWriter(fh, SEARCH_COLUMNS)
                if fresh:
                    writer.writeheader()
                    fresh = False
                writer.writerow(row)
        rows[t] = row
    return [rows[t] for t in sorted(rows)]


def parse_factors(text):
    return [float(x) for x in text.split(";") if x]

