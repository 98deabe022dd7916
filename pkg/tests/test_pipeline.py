import json
import os

import numpy as np
import pytest

from layout_retouch.backends import derive_conditions, make_toy_pair, ToyBackendSpec
from layout_retouch.core import LatentTensor, PipelineConfig
from layout_retouch.errors import ConfigError, PipelineError, ValidationError
from layout_retouch.pipeline import (RunRecord, generate, generate_layout, initial_noise,
                                     mask_debug, retouch)
from layout_retouch.plugins import Plugins
from layout_retouch.sampler import ddim_sample, make_schedule

from conftest import PROMPT

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def plain_sampling(backend, cond, config):
    """Independent single-denoiser loop to compare stage 1 against."""
    sched = make_schedule(config.T)
    z = initial_noise(config)
    return ddim_sample(z, lambda z, s, i: backend.denoise(z.data, cond, i), sched).data


def test_lambda1_zero_is_pure_personalized(vanilla, personalized):
    cfg = PipelineConfig(lambda1=0)
    _, z0, rec = generate_layout(vanilla, personalized, PROMPT, cfg)
    y_p, _, _ = derive_conditions(PROMPT, personalized)
    assert z0.data.tobytes() == plain_sampling(personalized, y_p, cfg).tobytes()
    assert {row["backend"] for row in rec.step_log["layout"]} == {"personalized"}


def test_lambda1_T_is_pure_vanilla(vanilla, personalized):
    cfg = PipelineConfig(lambda1=50)
    _, z0, _ = generate_layout(vanilla, personalized, PROMPT, cfg)
    _, y_pm, _ = derive_conditions(PROMPT, vanilla)
    assert z0.data.tobytes() == plain_sampling(vanilla, y_pm, cfg).tobytes()


def test_layout_step_log_switches_after_lambda1(vanilla, personalized):
    _, _, rec = generate_layout(vanilla, personalized, PROMPT, PipelineConfig(lambda1=5))
    log = rec.step_log["layout"]
    assert [r["backend"] for r in log] == ["vanilla"] * 5 + ["personalized"] * 45
    assert [r["cond"] for r in log[:5]] == ["y_p_minus"] * 5
    assert log[0]["i"] == 50 and log[-1]["i"] == 1


def test_layout_rejects_prompt_without_token(vanilla, personalized):
    with pytest.raises(PipelineError) as info:
        generate_layout(vanilla, personalized, "a red vase", PipelineConfig())
    assert info.value.stage == "layout"


def test_backend_shape_mismatch(vanilla):
    other = make_toy_pair(ToyBackendSpec(latent_shape=(4, 4, 4)))[1]
    with pytest.raises(PipelineError):
        generate_layout(vanilla, other, PROMPT, PipelineConfig())


@pytest.fixture(scope="module")
def full_run(toy_pair):
    vanilla, personalized = toy_pair
    return generate(PROMPT, None, vanilla, personalized, PipelineConfig())


def test_target_starts_at_layout_latent(full_run):
    _, rec = full_run
    assert rec.latents["retouch_target_zT"].tobytes() == rec.latents["retouch_layout_zT"].tobytes()


def test_retouch_branch_log(full_run):
    _, rec = full_run
    log = rec.step_log["retouch"]
    assert [r["s"] for r in log] == list(range(1, 51))
    assert all(r["branch"] == "layout" for r in log[:40])
    assert all(r["branch"] == "reference" for r in log[40:])
    assert [r["s"] for r in log if r["blend"]] == list(range(31, 51))
    assert log[0]["overrides"] == {"0": ["k", "q", "v"], "1": ["k", "q", "v"],
                                   "2": ["k", "q", "v"], "3": ["k", "q", "v"]}
    assert log[45]["overrides"] == {"0": ["blend_source", "k", "v"], "2": ["blend_source", "k", "v"]}


def test_masks_recorded(full_run):
    _, rec = full_run
    assert set(rec.masks) == {"mc", "msam", "mk", "m"}
    assert rec.meta["mask_step"] == 31
    m = rec.masks["m"]
    assert m.shape == (64, 64) and m.min() >= 0.5 and m.max() <= 1.0


def test_golden_latent_hashes(full_run):
    _, rec = full_run
    with open(os.path.join(FIXTURES, "golden_latents.json")) as fh:
        golden = json.load(fh)["latent_hashes"]
    assert rec.latent_hashes() == golden


def test_runs_are_deterministic(toy_pair, full_run):
    _, rec2 = generate(PROMPT, None, *toy_pair, PipelineConfig())
    assert rec2.latent_hashes() == full_run[1].latent_hashes()


def test_record_save_writes_every_file(full_run, tmp_path):
    _, rec = full_run
    path = rec.save(tmp_path)
    doc = json.loads(open(path).read())
    assert doc["files"]
    for rel in doc["files"].values():
        assert (tmp_path / rel).exists()
    assert set(doc["timings"]) >= {"layout", "segment", "retouch.inversion", "retouch.denoise"}


def test_blend_start_above_T_fails_before_compute(toy_pair):
    with pytest.raises(ConfigError):
        cfg = PipelineConfig(blend_start=51)
        generate(PROMPT, None, *toy_pair, cfg)


def _layout_inputs(toy_pair, cfg):
    vanilla, personalized = toy_pair
    layout, _, _ = generate_layout(vanilla, personalized, PROMPT, cfg)
    y_p, _, y_r = derive_conditions(PROMPT, personalized)
    return layout, (y_r, y_p), Plugins().segment(layout)


def test_degenerate_retouch_reconstructs_layout(toy_pair):
    cfg = PipelineConfig(lambda2=0, blend_enabled=False)
    personalized = toy_pair[1]
    layout, conds, msam = _layout_inputs(toy_pair, cfg)
    out, _ = retouch(layout, layout, personalized, conds, msam, cfg)
    x0 = personalized.encode_image(layout)
    rel = np.linalg.norm(personalized.encode_image(out) - x0) / np.linalg.norm(x0)
    assert rel < 5e-2


def test_self_swap_equals_plain_resampling(toy_pair):
    cfg = PipelineConfig(swap_source="self", blend_enabled=False)
    personalized = toy_pair[1]
    layout, conds, msam = _layout_inputs(toy_pair, cfg)
    _, rec = retouch(layout, layout, personalized, conds, msam, cfg)
    zT = LatentTensor(rec.latents["retouch_target_zT"], cfg.T)
    y_r = conds[0]
    plain = ddim_sample(zT, lambda z, s, i: personalized.denoise(z.data, y_r, i), make_schedule(cfg.T))
    assert np.max(np.abs(plain.data - rec.latents["retouch_target_z0"])) < 1e-5


def test_retouch_validates_inputs(toy_pair):
    cfg = PipelineConfig()
    personalized = toy_pair[1]
    layout, conds, msam = _layout_inputs(toy_pair, cfg)
    with pytest.raises(PipelineError):
        retouch(layout, layout, personalized, conds, None, cfg)
    with pytest.raises(PipelineError):
        retouch(layout, np.zeros((8, 8, 3)), personalized, conds, msam, cfg)
    with pytest.raises(PipelineError):
        retouch(layout, layout, personalized, conds, np.zeros((8, 8)), cfg)


def test_mask_debug_matches_retouch_masks(full_run, toy_pair):
    _, rec = full_run
    stages = mask_debug(rec.images["layout"], PROMPT, toy_pair[1], PipelineConfig())
    np.testing.assert_array_equal(stages["m"].data, rec.masks["m"])
    np.testing.assert_array_equal(stages["mc"].data, rec.masks["mc"])


def test_stage_wraps_errors():
    rec = RunRecord({})
    with pytest.raises(PipelineError) as info:
        with rec.stage("demo"):
            raise ValidationError("nope")
    assert info.value.stage == "demo"
    assert "demo" in rec.timings
