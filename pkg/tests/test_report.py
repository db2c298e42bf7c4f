import csv
import re

import numpy as np
import pytest

from shape_adaptor.calculus import estimate_macs
from shape_adaptor.data import synth_dataset
from shape_adaptor.network import conv_spec, static_plan
from shape_adaptor.report import (SEARCH_COLUMNS, TRACE_COLUMNS, export_shape_svg,
                                  export_trace_csv, export_trace_json, layer_dims, parse_factors,
                                  random_shape_search, random_shape_spec, read_trace,
                                  render_shape_svg, silhouette_bars, uniform_factors)
from shape_adaptor.trainer import ShapeTrace, TraceRecord, TrainConfig

RECT = re.compile(r'<rect x="([\d.]+)" y="([\d.]+)" width="([\d.]+)" height="([\d.]+)"')
HUMAN = conv_spec((4, 8, 8), 3, input_dim=16, mode="human_fixed", pools=(0, 1))


def rects(svg):
    return [tuple(map(float, m)) for m in RECT.findall(svg)]


def record(i, dims=(16, 11, 8)):
    return TraceRecord(i, 0, "alpha_update", [0.7, 0.75], [-0.3, 0.1], 1.0, list(dims), 0.5,
                       0.1, 0.09, [16, *dims])


def zero_epoch_config():
    return TrainConfig(epochs=0, batch_size=8)


class TestSilhouette:
    def test_constant_dims_is_one_rectangle(self):
        boxes = rects(render_shape_svg([8, 8, 8, 8]))
        assert len(boxes) == 1
        x, y, w, h = boxes[0]
        assert x == 10 and y == 10 and w == 380 and h == 280

    def test_decreasing_dims_form_staircase(self):
        boxes = rects(render_shape_svg([32, 16, 8, 4]))
        widths = [b[2] for b in boxes]
        assert len(boxes) == 4 and widths == sorted(widths, reverse=True)
        assert len(set(widths)) == 4
        assert all(b[3] == pytest.approx(70.0) for b in boxes)
        assert all(abs((b[0] + b[2] / 2) - 200) < 1e-3 for b in boxes)  # centred

    def test_height_tracks_layer_share(self):
        boxes = rects(render_shape_svg([32, 32, 32, 16]))
        assert [b[3] for b in boxes] == [210.0, 70.0]

    def test_bars(self):
        assert silhouette_bars([4, 4, 2, 2, 2, 4]) == [(4, 2), (2, 3), (4, 1)]

    def test_byte_identical(self, tmp_path):
        plan = static_plan(HUMAN, [])
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        export_shape_svg(plan, a, title="human")
        export_shape_svg(plan, b, title="human")
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().startswith("<?xml") and "<title>human</title>" in a.read_text()

    def test_trace_uses_last_record(self):
        trace = ShapeTrace([record(1, (16, 12, 9)), record(2, (16, 8, 4))])
        assert layer_dims(trace) == [16, 16, 8, 4]

    def test_title_is_escaped(self):
        assert "&lt;b&gt;" in render_shape_svg([4], title="<b>")

    @pytest.mark.parametrize("bad", [[], ShapeTrace(), [0, 2]])
    def test_rejects_empty_or_invalid(self, bad):
        with pytest.raises(ValueError):
            render_shape_svg(bad)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            export_shape_svg([4, 2], tmp_path / "missing" / "x.svg")


class TestTraceExport:
    def test_empty_trace_gives_empty_file(self, tmp_path):
        path = tmp_path / "t.jsonl"
        export_trace_json(ShapeTrace(), path)
        assert path.read_text() == ""
        assert len(read_trace(path)) == 0

    def test_round_trip_and_count(self, tmp_path):
        trace = ShapeTrace([record(i) for i in range(1, 6)])
        path = tmp_path / "t.jsonl"
        export_trace_json(trace, path)
        assert len(path.read_text().splitlines()) == 5
        assert read_trace(path) == trace

    def test_write_failure(self, tmp_path):
        with pytest.raises(OSError):
            export_trace_json(ShapeTrace(), tmp_path / "nope" / "t.jsonl")

    def test_csv(self, tmp_path):
        path = tmp_path / "t.csv"
        export_trace_csv(ShapeTrace([record(3)]), path)
        rows = list(csv.DictReader(path.open()))
        assert list(rows[0]) == list(TRACE_COLUMNS)
        assert rows[0]["iteration"] == "3" and rows[0]["dims"] == "16;11;8"
        assert parse_factors(rows[0]["factors"]) == [0.7, 0.75]


class TestSearch:
    def test_single_trial_zero_epochs(self, tmp_path):
        ds = synth_dataset(3, 4, dim=16)
        path = tmp_path / "results.csv"
        rows = random_shape_search(HUMAN, 1, zero_epoch_config(), seed=0, dataset=ds, csv_path=path)
        assert len(rows) == 1
        table = list(csv.DictReader(path.open()))
        assert len(table) == 1 and list(table[0]) == list(SEARCH_COLUMNS)
        assert 0.0 <= rows[0]["accuracy"] <= 1.0
        factors = parse_factors(table[0]["factors"])
        assert len(factors) == 2 and all(0.5 <= f < 1.0 for f in factors)

    def test_identical_seeds_identical_factors(self):
        ds = synth_dataset(3, 2, dim=16)
        a = random_shape_search(HUMAN, 3, zero_epoch_config(), seed=5, dataset=ds)
        b = random_shape_search(HUMAN, 3, zero_epoch_config(), seed=5, dataset=ds)
        assert [r["factors"] for r in a] == [r["factors"] for r in b]
        assert len({r["factors"] for r in a}) == 3

    def test_trial_seed_is_base_plus_index(self):
        ds = synth_dataset(3, 2, dim=16)
        rows = random_shape_search(HUMAN, 2, zero_epoch_config(), seed=7, dataset=ds)
        assert [r["seed"] for r in rows] == [7, 8]
        expected = uniform_factors(np.random.default_rng(8), 2, HUMAN.search_space)
        assert parse_factors(rows[1]["factors"]) == expected

    def test_resume_skips_finished_trials(self, tmp_path):
        ds = synth_dataset(3, 2, dim=16)
        path = tmp_path / "r.csv"
        random_shape_search(HUMAN, 2, zero_epoch_config(), dataset=ds, csv_path=path)
        calls = []

        def sampler(rng, n, space):
            calls.append(n)
            return uniform_factors(rng, n, space)
        rows = random_shape_search(HUMAN, 4, zero_epoch_config(), dataset=ds, csv_path=path,
                                   sampler=sampler)
        assert len(calls) == 2 and [int(r["trial"]) for r in rows] == [0, 1, 2, 3]
        assert len(list(csv.DictReader(path.open()))) == 4

    def test_half_factors_match_human_macs(self):
        ds = synth_dataset(3, 2, dim=16)
        rows = random_shape_search(HUMAN, 1, zero_epoch_config(), dataset=ds,
                                   sampler=lambda rng, n, space: [0.5] * n)
        assert rows[0]["macs"] == estimate_macs(HUMAN, static_plan(HUMAN, []))

    def test_random_spec(self):
        spec = random_shape_spec(HUMAN, [0.6, 0.9])
        assert spec.mode == "random_fixed"
        assert static_plan(spec, []).cell_dims[:3] == [16, 9, 8]
        with pytest.raises(ValueError):
            random_shape_spec(HUMAN, [0.5])

    def test_errors(self):
        ds = synth_dataset(3, 2, dim=16)
        with pytest.raises(ValueError):
            random_shape_search(HUMAN, 0, zero_epoch_config(), dataset=ds)
        with pytest.raises(ValueError):
            random_shape_search(HUMAN, 1, zero_epoch_config())
        flat = conv_spec((4,), 3, input_dim=16, mode="human_fixed")
        with pytest.raises(ValueError):
            random_shape_search(flat, 1, zero_epoch_config(), dataset=ds)
