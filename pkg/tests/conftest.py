"""Shared fixtures: small deterministic scene bundles and a tiny fit run.

Session-scoped so the expensive artifacts (bundle generation, a short
optimization run) happen once.
"""
import json

import pytest
import torch
from hypothesis import settings

from monophys.diff_engine import set_deterministic
from monophys.optimizer import OptimSchedule, run_fit
from monophys.synth_data import GenerationSpec, SceneBundle, generate_scene

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


SMALL_ELASTIC = dict(
    shape="sphere", material_model="NeoHookean", size=0.07,
    grid_res=24, dx=0.022, n_frames=6, fps=20.0, substeps_per_frame=24,
    width=48, height=48, E=2.0e4, nu=0.3, v0=(0.05, -0.02, -0.5),
)

SMALL_PLASTICINE = dict(
    shape="box", material_model="Plasticine", size=0.08,
    grid_res=28, dx=0.022, n_frames=6, fps=20.0, substeps_per_frame=24,
    width=48, height=48, E=2.0e4, nu=0.3, sigma_y=300.0,
    v0=(0.0, 0.01, -0.6),
)


@pytest.fixture(scope="session", autouse=True)
def _deterministic_mode():
    set_deterministic(True)
    yield


@pytest.fixture(scope="session")
def elastic_bundle(tmp_path_factory) -> SceneBundle:
    root = tmp_path_factory.mktemp("bundles") / "elastic"
    spec = GenerationSpec(**SMALL_ELASTIC)
    generate_scene(spec, seed=3, out_dir=root)
    return SceneBundle.load(root)


@pytest.fixture(scope="session")
def plasticine_bundle(tmp_path_factory) -> SceneBundle:
    root = tmp_path_factory.mktemp("bundles") / "plasticine"
    spec = GenerationSpec(**SMALL_PLASTICINE)
    generate_scene(spec, seed=4, out_dir=root)
    return SceneBundle.load(root)


TINY_SCHED = OptimSchedule(total_iters=6, frames_start=2, frames_max=3,
                           ramp_end=4, inner_appearance_steps=1,
                           relocate_every=4, stage2_iters=8)


@pytest.fixture(scope="session")
def fit_run(tmp_path_factory, elastic_bundle):
    """A short but complete fit producing a full run directory."""
    out = tmp_path_factory.mktemp("runs") / "tiny"
    result = run_fit(elastic_bundle, out_dir=out, scale_init=0.9,
                     sched=TINY_SCHED, seed=1)
    return out, result


def read_json(path):
    with open(path) as f:
        return json.load(f)


@pytest.fixture()
def rng():
    return torch.Generator().manual_seed(1234)
