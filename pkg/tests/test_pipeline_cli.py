from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from gsstyle.cli import dispatch
from gsstyle.errors import ConfigError
from gsstyle.pipeline import CONFIG_DEFAULTS, RunConfig, derive_seed, write_trace
from gsstyle.scene import load_scene, load_viewset


def test_derive_seed_frozen_values():
    # [DERIVED] sha256 of "root:label", first 4 bytes little-endian
    assert derive_seed(7, "style") == 2102726898
    assert derive_seed(7, "features") == 1497266815
    assert derive_seed(0, "x") == 634768859


def test_derive_seed_sensitivity():
    assert derive_seed(7, "style") == derive_seed(7, "style")
    assert derive_seed(7, "style") != derive_seed(8, "style")
    assert derive_seed(7, "style") != derive_seed(7, "styl")


def test_runconfig_defaults_and_overrides():
    cfg = RunConfig.load()
    assert cfg.values == CONFIG_DEFAULTS
    cfg = RunConfig.load(overrides={"seed": 9, "iterations": None})
    assert cfg.seed == 9
    assert cfg.iterations == CONFIG_DEFAULTS["iterations"]  # None means unset


def test_runconfig_rejects_unknown_keys(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"n_gaussians": 10, "bogus": 1}))
    with pytest.raises(ConfigError):
        RunConfig.load(p)
    with pytest.raises(ConfigError):
        RunConfig.load(overrides={"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")


def test_runconfig_flags_win_over_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"seed": 3, "n_gaussians": 11}))
    cfg = RunConfig.load(p, overrides={"seed": 5})
    assert cfg.seed == 5
    assert cfg.n_gaussians == 11


def test_write_trace_round_trips(tmp_path):
    import csv
    trace = [{"iteration": 0, "style_loss": 1.5, "content_loss": 0.25,
              "total": 1.75}]
    p = tmp_path / "trace.csv"
    write_trace(trace, p)
    rows = list(csv.DictReader(open(p)))
    assert float(rows[0]["total"]) == 1.75


# ---------------------------------------------------------------------------
# CLI


def test_cli_exit_codes(tmp_path):
    assert dispatch(["render", "--scene", str(tmp_path / "none.json"),
                     "--camera", "x", "--out-prefix", str(tmp_path / "o")]) == 2
    assert dispatch(["gen-scene", "--gaussians", "0",
                     "--out", str(tmp_path / "s.json")]) == 3
    assert dispatch(["gen-scene", "--gaussians", "5", "--groups", "17",
                     "--out", str(tmp_path / "s.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert dispatch(["pipeline", "--config", str(bad),
                     "--out", str(tmp_path / "run")]) == 2


def test_cli_selftest_passes(capsys):
    assert dispatch(["selftest"]) == 0


def test_cli_end_to_end_small(tmp_path):
    scene_p = tmp_path / "scene.json"
    cams_p = tmp_path / "cams.json"
    assert dispatch(["gen-scene", "--gaussians", "30", "--groups", "2",
                     "--seed", "3", "--out", str(scene_p),
                     "--cams-out", str(cams_p)]) == 0
    assert load_scene(scene_p).n == 30

    keys_p = tmp_path / "keys.json"
    assert dispatch(["select-keyviews", "--cameras", str(cams_p),
                     "--k", "2", "--out", str(keys_p)]) == 0
    assert load_viewset(keys_p).key_indices == [0, 4]

    pre = str(tmp_path / "view")
    assert dispatch(["render", "--scene", str(scene_p),
                     "--camera", str(cams_p), "--view", "1",
                     "--out-prefix", pre]) == 0
    for suffix in (".png", "_depth.pfm", "_coverage.pfm", "_id.pfm"):
        assert Path(pre + suffix).exists()

    style_p = tmp_path / "style.png"
    from gsstyle.images import make_style_image, save_png
    save_png(make_style_image(3), style_p)
    sty_dir = tmp_path / "stylized"
    assert dispatch(["stylize-keyviews", "--scene", str(scene_p),
                     "--style", str(style_p), "--cameras", str(keys_p),
                     "--steps", "1", "--cvsa-block", "none",
                     "--out", str(sty_dir)]) == 0
    assert (sty_dir / "view_0.png").exists()
    assert (sty_dir / "stylize_manifest.json").exists()

    styled_p = tmp_path / "styled.json"
    trace_p = tmp_path / "trace.csv"
    assert dispatch(["transfer", "--scene", str(scene_p),
                     "--keyviews", str(sty_dir), "--iters", "2",
                     "--out", str(styled_p), "--trace", str(trace_p)]) == 0
    styled = load_scene(styled_p)
    assert styled.n == 30
    assert trace_p.exists() and trace_p.with_suffix(".png").exists()

    metrics_p = tmp_path / "metrics.json"
    assert dispatch(["metrics", "--scene", str(styled_p),
                     "--cameras", str(cams_p), "--style", str(style_p),
                     "--content-scene", str(scene_p),
                     "--out", str(metrics_p)]) == 0
    payload = json.loads(metrics_p.read_text())
    assert payload["short_range"]["rmse"] >= 0.0
    assert payload["content_loss"] is not None
    assert metrics_p.with_suffix(".png").exists()
