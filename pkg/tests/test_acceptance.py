"""Acceptance criteria. Each test prints one PASS/FAIL line, visible even under capture.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from layout_retouch.attention import AttentionTrace
from layout_retouch.backends import AttentionOverride, derive_conditions
from layout_retouch.cli import main
from layout_retouch.core import LatentTensor, PipelineConfig
from layout_retouch.evalkit import (center_point_stats, inception_score_from_posteriors,
                                    placement_masks, sigma2_avg)
from layout_retouch.maskops import (adaptive_mask_stages, blend_latents, distance_transform,
                                    remove_small_components)
from layout_retouch.pipeline import generate, generate_layout, initial_noise
from layout_retouch.sampler import ddim_invert, ddim_sample, make_schedule, refined_schedule

from conftest import PROMPT
from oracles import brute_edt, composite_oracle, flood_remove_small

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@contextmanager
def criterion(capsys, number, title):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} FAIL  {title}: {type(exc).__name__}: {exc}")
        raise
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} PASS  {title}" + (f" ({extra})" if extra else ""))


def _pure(backend, cond, config):
    z = initial_noise(config)
    return ddim_sample(z, lambda z, s, i: backend.denoise(z.data, cond, i),
                       make_schedule(config.T)).data


def test_1_schedule_boundary_identities(capsys, vanilla, personalized):
    with criterion(capsys, 1, "schedule-boundary identities") as d:
        y_p, y_pm, _ = derive_conditions(PROMPT, personalized)
        for lam, backend, cond in ((0, personalized, y_p), (50, vanilla, y_pm)):
            cfg = PipelineConfig(T=50, lambda1=lam)
            start = time.perf_counter()
            _, z0, _ = generate_layout(vanilla, personalized, PROMPT, cfg)
            elapsed = time.perf_counter() - start
            assert z0.data.tobytes() == _pure(backend, cond, cfg).tobytes()
            assert elapsed < 5.0, f"lambda1={lam} took {elapsed:.2f}s"
            d[f"t_lambda1_{lam}"] = f"{elapsed:.2f}s"


def test_2_self_substitution_identity(capsys, personalized):
    with criterion(capsys, 2, "self-substitution identity") as d:
        sched = make_schedule(50)
        y_p, _, _ = derive_conditions(PROMPT, personalized)
        trace = AttentionTrace("own")

        def plain(z, s, i):
            taps = {}
            eps = personalized.denoise(z.data, y_p, i, taps=taps)
            trace.record(s, taps, personalized.catalog)
            return eps

        def echoed(z, s, i):
            ov = {l.index: AttentionOverride(q=e.q, k=e.k, v=e.v)
                  for l in personalized.catalog
                  for e in [trace.get(s, l.index, l.kind)]}
            assert len(ov) == len(personalized.catalog)
            return personalized.denoise(z.data, y_p, i, overrides=ov)

        zT = initial_noise(PipelineConfig())
        a = ddim_sample(zT, plain, sched)
        b = ddim_sample(zT, echoed, sched)
        err = float(np.max(np.abs(a.data - b.data)))
        assert trace.steps() == list(range(1, 51))
        assert err <= 1e-6
        d["max_abs"] = err


def _inversion_error(backend, T):
    sched = refined_schedule(T)
    x0 = backend.encode_image(backend.decode_latent(
        np.random.default_rng(5).standard_normal(backend.latent_shape).astype(np.float32) * 0.5))
    empty = backend.empty_condition()
    zT = ddim_invert(LatentTensor(x0, 0), backend, empty, sched)
    rec = ddim_sample(zT, lambda z, s, i: backend.denoise(z.data, empty, i), sched)
    return float(np.linalg.norm(rec.data - x0) / np.linalg.norm(x0))


def test_3_inversion_round_trip(capsys, personalized):
    with criterion(capsys, 3, "DDIM inversion round trip") as d:
        errs = [_inversion_error(personalized, T) for T in (50, 100, 200)]
        d.update({f"T{T}": f"{e:.2e}" for T, e in zip((50, 100, 200), errs)})
        assert errs[0] < 5e-2
        assert errs[0] > errs[1] > errs[2]


def test_4_mask_math_oracles(capsys):
    with criterion(capsys, 4, "mask-math oracles") as d:
        rng = np.random.default_rng(0)
        for _ in range(200):
            h, w = rng.integers(1, 33, size=2)
            m = rng.random((h, w)) < rng.uniform(0.05, 0.95)
            assert np.array_equal(distance_transform(m), brute_edt(m))
            t = int(rng.integers(0, 12))
            once = remove_small_components(m, t).data.astype(bool)
            assert np.array_equal(once, flood_remove_small(m, t))
            assert np.array_equal(remove_small_components(once, t).data.astype(bool), once)
        r, c = np.indices((8, 8))
        mc = (r // 2 + c // 2) % 2 == 0
        mc[2:6, 2:6] = True
        r, c = np.indices((32, 32))
        sam = (r - 15.5) ** 2 + (c - 12) ** 2 <= 49
        stages = adaptive_mask_stages(mc, sam, 16)
        expect, raw = composite_oracle(mc, sam, 16)
        np.testing.assert_allclose(stages["m"].data, expect, atol=1e-6)
        np.testing.assert_allclose(stages["raw"], raw, atol=1e-6)
        assert stages["normalized"].min() >= 0.5 and stages["raw"].min() >= 0.5
        fg = stages["mc_clean"].data > 0
        assert fg.any() and np.all(stages["m"].data[fg] == 1.0)
        d["random_masks"] = 200


def test_5_blend_endpoints(capsys, rng):
    with criterion(capsys, 5, "blend endpoints") as d:
        t = rng.standard_normal((4, 8, 8)).astype(np.float32)
        o = rng.standard_normal((4, 8, 8)).astype(np.float32)
        assert np.array_equal(blend_latents(t, o, np.ones((8, 8))), t)
        assert np.array_equal(blend_latents(t, o, np.zeros((8, 8))), o)
        err = float(np.max(np.abs(blend_latents(t, o, np.full((8, 8), 0.5)) - (t + o) / 2)))
        assert err <= 1e-6
        d["midpoint_err"] = err


@pytest.fixture(scope="module")
def golden_run(toy_pair):
    start = time.perf_counter()
    _, record = generate(PROMPT, None, *toy_pair, PipelineConfig(seed=0))
    return record, time.perf_counter() - start


def test_6_branch_schedule(capsys, golden_run):
    with criterion(capsys, 6, "retouch branch schedule from the run record"):
        record, _ = golden_run
        assert (record.config["T"], record.config["lambda2"], record.config["blend_start"]) == (50, 10, 31)
        log = record.step_log["retouch"]
        assert [r["s"] for r in log] == list(range(1, 51))
        for r in log:
            if r["s"] <= 40:
                assert r["branch"] == "layout"
                assert all(set(v) >= {"q", "k", "v"} for v in r["overrides"].values())
                assert set(r["overrides"]) == {"0", "1", "2", "3"}
            else:
                assert r["branch"] == "reference"
                assert set(r["overrides"]) == {"0", "2"}
                assert all("q" not in v and {"k", "v"} <= set(v) for v in r["overrides"].values())
            assert r["blend"] == (r["s"] >= 31)
            assert (r["s"] >= 31) == all("blend_source" in r["overrides"][k] for k in ("0", "2"))


def test_7_evaluation_instruments(capsys):
    with criterion(capsys, 7, "evaluation instruments") as d:
        assert sigma2_avg([(0.4, 0.6)] * 8) == 0.0
        assert abs(sigma2_avg([(0.25, 0.5), (0.75, 0.5)]) - 0.03125) <= 1e-6
        assert abs(inception_score_from_posteriors(np.full((5, 4), 0.25)) - 1.0) <= 1e-6
        assert abs(inception_score_from_posteriors(np.eye(2)) - 2.0) <= 1e-6
        runs = [(center_point_stats(placement_masks("uniform", 64, seed=1)).sigma2_avg,
                 center_point_stats(placement_masks("centered", 64, seed=1)).sigma2_avg)
                for _ in range(2)]
        assert runs[0] == runs[1]
        assert runs[0][0] > runs[0][1]
        d["uniform"], d["centered"] = f"{runs[0][0]:.4f}", runs[0][1]


def test_8_determinism_and_regression(capsys, golden_run, toy_pair):
    with criterion(capsys, 8, "determinism and golden regression") as d:
        record, elapsed = golden_run
        with open(os.path.join(FIXTURES, "golden_latents.json")) as fh:
            golden = json.load(fh)["latent_hashes"]
        assert record.latent_hashes() == golden
        _, again = generate(PROMPT, None, *toy_pair, PipelineConfig(seed=0))
        assert again.latent_hashes() == golden
        assert elapsed < 60.0
        d["end_to_end"] = f"{elapsed:.2f}s"


def test_9_lambda1_sweep_protocol(capsys, tmp_path):
    with criterion(capsys, 9, "lambda1 sweep protocol (toy metrics)") as d:
        values = [0, 3, 5, 10]
        code = main(["sweep-lambda1", "--prompt", PROMPT, "--values", ",".join(map(str, values)),
                     "--out", str(tmp_path)])
        capsys.readouterr()
        assert code == 0
        root = tmp_path / "sweep-lambda1-seed0"
        rows = json.loads((root / "scores.json").read_text())["rows"]
        assert [r["lambda1"] for r in rows] == values
        for r in rows:
            assert set(r) >= {"identity", "fidelity", "record"}
            assert (root / r["record"]).exists()
        assert (root / "scores.csv").read_text().count("\n") == len(values) + 1
        d["rows"] = len(rows)
