from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gsstyle.grouping import IdentityClassifier
from gsstyle.pipeline import RunConfig, run_pipeline
from gsstyle.scene import make_orbit_cameras, make_scene
from gsstyle.styling import FeatureExtractor


@pytest.fixture(scope="session")
def small_scene():
    return make_scene("blocks", 60, 3, seed=11)


@pytest.fixture(scope="session")
def small_cam():
    return make_orbit_cameras(1, width=32, height=32)[0]


@pytest.fixture(scope="session")
def fx():
    return FeatureExtractor(seed=1)


@pytest.fixture(scope="session")
def clf3():
    return IdentityClassifier.embedding(3)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """One full reference-config pipeline run, shared across acceptance tests."""
    out = tmp_path_factory.mktemp("reference") / "run"
    cfg = RunConfig.load()
    t0 = time.monotonic()
    manifest = run_pipeline(cfg, out)
    elapsed = time.monotonic() - t0
    return {"cfg": cfg, "dir": out, "manifest": manifest, "elapsed": elapsed}
