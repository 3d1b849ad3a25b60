"""Run configuration parsing and CSV report shapes."""

import csv
import json
from fractions import Fraction

import pytest

from fedseg import reports
from fedseg.config import RunConfig, from_dict, load_config, parse_width_scale
from fedseg.errors import ConfigError
from fedseg.metrics import MetricsReport, evaluate_predictions

import numpy as np


def test_defaults_validate():
    RunConfig().validate()


def test_json_round_trip(tmp_path):
    cfg = from_dict({"seed": 4, "unet": {"width_scale": "1/4", "input_h": 32, "input_w": 32},
                     "fl": {"rounds": 3, "aggregator": {"kind": "dpf", "noise_multiplier": 0.5}}})
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    again = load_config(path)
    assert again == cfg
    assert again.unet.width_scale == Fraction(1, 4)
    assert again.fl.aggregator.noise_multiplier == 0.5


def test_top_level_seed_reaches_every_component():
    cfg = from_dict({"seed": 12})
    assert cfg.unet.seed == cfg.fl.seed == cfg.fl.aggregator.seed == cfg.augment.seed == 12
    moved = cfg.with_seed(3)
    assert moved.unet.seed == moved.fl.aggregator.seed == moved.augment.seed == 3


@pytest.mark.parametrize("data", [
    {"sed": 1},
    {"fl": {"round": 3}},
    {"fl": {"aggregator": {"kind": "mean", "clip": 1}}},
    {"paths": {"manifests": "x"}},
    {"seed": -1},
    {"seed": True},
    {"unet": {"width_scale": "quarter"}},
    {"unet": []},
    [],
])
def test_bad_configs_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_invalid_json_is_a_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.json")


def test_relative_manifest_resolves_next_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.json"
    p.write_text(json.dumps({"paths": {"manifest": "data/m.jsonl"}}))
    assert load_config(p).paths.manifest == str(tmp_path / "sub" / "data" / "m.jsonl")


def test_manifest_requirements(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig().validate(need_manifest=True)
    with pytest.raises(FileNotFoundError):
        RunConfig().with_paths(manifest=str(tmp_path / "none.jsonl")).validate(need_manifest=True)


def test_parse_width_scale():
    assert parse_width_scale("1/4") == Fraction(1, 4)
    assert parse_width_scale(0.5) == 0.5
    with pytest.raises(ConfigError):
        parse_width_scale("1/0")
    with pytest.raises(ConfigError):
        parse_width_scale(None)


# ---------------------------------------------------------------- reports


def fake_report(seed):
    rng = np.random.default_rng(seed)
    truth = (rng.random((2, 8, 8, 3)) > 0.7).astype(np.float64)
    return evaluate_predictions(truth, rng.random(truth.shape))


def read_csv(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_compare_rows_nine_runs_three_means(tmp_path):
    results = [(agg, seed, fake_report(10 * i + seed))
               for i, agg in enumerate(["mean", "dpf", "pqep"]) for seed in range(3)]
    rows = reports.compare_rows(results)
    assert len(rows) == 12
    means = rows[9:]
    assert [r["aggregator"] for r in means] == ["mean", "dpf", "pqep"]
    assert all(r["seed"] == "mean" for r in means)
    assert means[0]["dice"] == pytest.approx(np.mean([r.dice for a, _, r in results if a == "mean"]))
    path = tmp_path / "compare.csv"
    reports.write_compare(path, rows)
    parsed = read_csv(path)
    assert list(parsed[0]) == reports.COMPARE_COLUMNS
    assert {"dice", "bce_dice", "iou", "rmse", "ssim", "scd"} <= set(parsed[0])
    assert path.read_text().startswith("#")


def test_compare_rows_single_aggregator():
    rows = reports.compare_rows([("mean", 0, fake_report(0))])
    assert [r["seed"] for r in rows] == [0, "mean"]
    assert rows[0]["dice"] == rows[1]["dice"]


def test_metrics_csv_header(tmp_path):
    path = tmp_path / "m.csv"
    reports.write_metrics(path, [reports.metrics_row(fake_report(1), "model.fseg", "mean", "test")])
    parsed = read_csv(path)
    assert list(parsed[0]) == reports.METRICS_COLUMNS
    assert parsed[0]["split"] == "test"
    assert set(MetricsReport.columns()) <= set(parsed[0])


def test_figures_render_when_matplotlib_present(tmp_path):
    pytest.importorskip("matplotlib")
    rows = reports.compare_rows([("mean", 0, fake_report(0)), ("dpf", 0, fake_report(1))])
    out = reports.plot_compare(tmp_path / "c.png", rows)
    assert out.read_bytes()[:4] == b"\x89PNG"


def test_missing_matplotlib_gives_install_hint(monkeypatch):
    import builtins

    real_import = builtins.__import__

    def fake_import(name, *args, **kwargs):
        if name == "matplotlib" or name.startswith("matplotlib."):
            raise ImportError("no matplotlib")
        return real_import(name, *args, **kwargs)

    monkeypatch.setattr(builtins, "__import__", fake_import)
    with pytest.raises(ImportError, match=r"artifact\[plot\]"):
        reports.require_matplotlib()
