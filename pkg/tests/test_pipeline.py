import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsect.core import Image2D, Rng
from sparsect.pipeline import (
    ConfigError,
    DetectorEnsemble,
    ExperimentConfig,
    MissingModelError,
    bilinear_resize,
    dose_reduction,
    generate_splits,
    load_schema,
    normalize_12bit,
    prepare_data,
    run_detection_experiment,
    run_quality_experiment,
    run_saliency_experiment,
    run_timing_harness,
    select_tv_weights,
    train_detector_stage,
    train_unets,
    validate_report,
    window_hu,
    write_split_manifests,
)
from sparsect.projector import ScanGeometry, radon_forward
from sparsect.stats import bonferroni, delong_analysis

TINY = dict(
    size=16,
    reference_views=64,
    views=(32, 16, 8),
    n_train=12,
    n_val=6,
    n_test=12,
    tv_grid=(0.01, 0.1, 0.03),
    tv_pairs=4,
    unet_depth=2,
    unet_base_channels=2,
    unet_pairs=8,
    unet_epochs=2,
    det_channels=(2, 4),
    det_epochs=2,
    saliency_samples=4,
    timing_images=2,
    timing_repeats=1,
    n_bootstrap=50,
)


class TestWindow:
    def test_clamps(self):
        out = window_hu(np.array([[-10.0, 0.0, 40.0, 80.0, 200.0]])).data
        np.testing.assert_array_equal(out, [[0.0, 0.0, 0.5, 1.0, 1.0]])

    def test_idempotent_unit_window(self):
        x = Rng(0).normal((8, 8))
        once = window_hu(x, 0, 1)
        np.testing.assert_array_equal(window_hu(once, 0, 1).data, once.data)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            window_hu(np.zeros((2, 2)), 5, 5)


def test_normalize_12bit():
    out = normalize_12bit(np.array([[4095.0, 0.0, 5000.0, 2047.5, -3.0]])).data
    np.testing.assert_array_equal(out, [[1.0, 0.0, 1.0, 0.5, 0.0]])


class TestResize:
    def test_same_size(self):
        x = Rng(1).random((7, 9))
        np.testing.assert_array_equal(bilinear_resize(x, 9, 7).data, x)

    def test_constant(self):
        out = bilinear_resize(np.full((5, 5), 3.25), 13, 4).data
        assert out.shape == (4, 13) and np.all(out == 3.25)

    def test_ramp(self):
        x = np.tile(np.arange(10.0), (6, 1))
        out = bilinear_resize(x, 19, 11).data
        expect = np.tile(np.arange(19) * 9 / 18, (11, 1))
        np.testing.assert_allclose(out, expect, atol=1e-9)

    def test_keeps_value_range(self):
        assert bilinear_resize(Image2D(np.zeros((4, 4)), (0.0, 2.0)), 2, 2).value_range == (0.0, 2.0)

    def test_single_pixel_samples_centre(self):
        x = np.arange(9.0).reshape(3, 3)
        assert bilinear_resize(x, 1, 1).data[0, 0] == 4.0

    def test_bad_size(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.zeros((3, 3)), 0, 3)

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(2, 20), w=st.integers(2, 20), oh=st.integers(2, 40), ow=st.integers(2, 40),
        a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
    )
    def test_affine_exact(self, h, w, oh, ow, a, b, c):
        rr, cc = np.mgrid[0:h, 0:w]
        img = a * cc + b * rr + c
        out = bilinear_resize(img, ow, oh).data
        r2, c2 = np.mgrid[0:oh, 0:ow]
        expect = a * c2 * (w - 1) / (ow - 1) + b * r2 * (h - 1) / (oh - 1) + c
        np.testing.assert_allclose(out, expect, atol=1e-9)


class TestDose:
    def test_values(self):
        assert dose_reduction(512) == 0.875
        assert dose_reduction(256) == 0.9375
        assert dose_reduction(4096) == 0.0
        assert dose_reduction(16, 512) == pytest.approx(0.96875)

    @pytest.mark.parametrize("v", [0, -1, 4097])
    def test_invalid(self, v):
        with pytest.raises(ValueError):
            dose_reduction(v)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.views == (256, 128, 64, 32, 16) and cfg.reference_views == 512 and cfg.sparsest == 16
        assert cfg.unet_config().bottleneck_shape == (64, 8, 8)

    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig(**TINY)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg

    @pytest.mark.parametrize(
        "bad",
        [
            {"nonsense": 1},
            {"views": [300]},
            {"views": [512]},
            {"views": [16, 16]},
            {"methods": ["tv"]},
            {"methods": ["fbp", "magic"]},
            {"size": 60},
            {"tv_pairs": 1000},
            {"det_window": [1, 0]},
            {"ensemble_folds": 1},
            {"unet_views": [7]},
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "missing.json")
        (tmp_path / "x.json").write_text("[1, 2]")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "x.json")

    def test_stage_streams_independent(self):
        a = ExperimentConfig(seed=3).stage_rng("test").random_u64(4)
        b = ExperimentConfig(seed=3).stage_rng("test").random_u64(4)
        c = ExperimentConfig(seed=3).stage_rng("train").random_u64(4)
        assert np.array_equal(a, b) and not np.array_equal(a, c)


class TestSplits:
    def test_disjoint_and_deterministic(self, tmp_path):
        cfg = ExperimentConfig(**TINY)
        a, b = generate_splits(cfg), generate_splits(cfg)
        seeds = [set(s.seeds()) for s in a.values()]
        assert not (seeds[0] & seeds[1] or seeds[0] & seeds[2] or seeds[1] & seeds[2])
        assert [s.seeds() for s in a.values()] == [s.seeds() for s in b.values()]
        paths = write_split_manifests(a, tmp_path)
        ids = [{e["id"] for e in json.loads(p.read_text())} for p in paths.values()]
        assert sum(len(i) for i in ids) == len(set().union(*ids)) == 30
        seed_sets = [{e["seed"] for e in json.loads(p.read_text())} for p in paths.values()]
        assert len(set().union(*seed_sets)) == 30

    def test_seed_changes_data(self):
        a = generate_splits(ExperimentConfig(**TINY))["test"].seeds()
        b = generate_splits(ExperimentConfig(**{**TINY, "seed": 1}))["test"].seeds()
        assert a != b

    def test_lesion_counts(self):
        data = generate_splits(ExperimentConfig(**TINY))
        assert data["test"].labels.sum() == 6 and data["val"].labels.sum() == 3


@pytest.fixture(scope="module")
def tiny():
    cfg = ExperimentConfig(**TINY)
    data = prepare_data(cfg)
    tv = select_tv_weights(cfg, data["val"])
    unets, _ = train_unets(cfg, data["train"], data["val"])
    det, _ = train_detector_stage(cfg, data["train"], data["val"])
    return cfg, data, tv, unets, det


class TestQuality:
    def test_report(self, tiny, tmp_path):
        cfg, data, tv, unets, _ = tiny
        report = run_quality_experiment(cfg, data["test"], tv, unets, out_dir=tmp_path)
        ref = [r for r in report["rows"] if r["views"] == cfg.reference_views]
        assert len(ref) == 1 and ref[0]["method"] == "fbp"
        assert ref[0]["ssim"] == {"n": 12, "mean": 1.0, "ci_lo": 1.0, "ci_hi": 1.0}
        assert ref[0]["psnr"]["mean"] == math.inf and ref[0]["snr"]["ci_hi"] == math.inf
        assert len(report["rows"]) == 1 + 3 * 3
        for r in report["rows"]:
            for k in ("ssim", "psnr", "snr"):
                c = r[k]
                assert c["n"] == 12 and c["ci_lo"] <= c["mean"] <= c["ci_hi"]
        assert {t["alpha"] for t in report["tests"]} == {bonferroni(cfg.alpha, 3)}
        assert len(report["tests"]) == 3 * 3 * 3
        doc = json.loads((tmp_path / "quality.json").read_text())
        jsonschema.validate(doc, load_schema("quality"))
        assert doc["rows"][0]["psnr"]["mean"] == "inf"
        assert (tmp_path / "quality_rows.csv").read_text().splitlines()[0] == "image_id,views,method,ssim,psnr,snr"

    def test_reproducible(self, tiny):
        cfg, data, tv, unets, _ = tiny
        a = validate_report(run_quality_experiment(cfg, data["test"], tv, unets))
        b = validate_report(run_quality_experiment(cfg, data["test"], tv, unets))
        assert json.dumps(a) == json.dumps(b)

    def test_missing_unet(self, tiny):
        cfg, data, tv, unets, _ = tiny
        with pytest.raises(MissingModelError):
            run_quality_experiment(cfg, data["test"], tv, None)
        with pytest.raises(MissingModelError):
            run_quality_experiment(cfg, data["test"], tv, {8: unets[8]})
        with pytest.raises(MissingModelError):
            run_quality_experiment(cfg, data["test"], None, unets)

    def test_fbp_only(self, tiny):
        cfg, data, _, _, _ = tiny
        cfg = ExperimentConfig(**{**TINY, "methods": ("fbp",)})
        report = run_quality_experiment(cfg, data["test"])
        assert {r["method"] for r in report["rows"]} == {"fbp"} and report["tests"] == []


def test_fbp_ssim_ordered_by_views():
    cfg = ExperimentConfig(n_train=1, n_val=1, n_test=20, tv_pairs=1, unet_pairs=1, methods=("fbp",), n_bootstrap=100)
    test = prepare_data(cfg, ("test",))["test"]
    report = run_quality_experiment(cfg, test)
    means = {r["views"]: r["ssim"]["mean"] for r in report["rows"]}
    ladder = sorted(means, reverse=True)
    assert ladder[0] == 512 and means[512] == 1.0
    assert all(means[a] > means[b] for a, b in zip(ladder, ladder[1:]))


class TestDetection:
    def test_report(self, tiny, tmp_path):
        cfg, data, tv, unets, det = tiny
        report = run_detection_experiment(cfg, data["test"], det, tv, unets, out_dir=tmp_path)
        jsonschema.validate(json.loads((tmp_path / "detection.json").read_text()), load_schema("detection"))
        full = [c for c in report["cells"] if c["method"] == "full"]
        assert len(full) == 1 and full[0]["views"] == cfg.reference_views
        stored = np.array(report["scores"][f"full_{cfg.reference_views}"])
        recomputed = delong_analysis(stored, np.array(report["labels"], bool))
        assert full[0]["auc"] == recomputed.auc and full[0]["variance"] == recomputed.variance
        assert len(report["cells"]) == 1 + 3 * 3
        for v in cfg.views:
            rows = [p for p in report["p_values"] if p["views"] == v]
            assert len(rows) == 6
            assert sum(p["a"] == "full" for p in rows) == 3
            assert {p["alpha"] for p in rows if p["a"] == "full"} == {bonferroni(cfg.alpha, 6)}
            assert {p["alpha"] for p in rows if p["a"] != "full"} == {bonferroni(cfg.alpha, 3)}
        for c in report["cells"]:
            m = c["confusion"]
            assert m["tp"] + m["fn"] == 6 and m["fp"] + m["tn"] == 6
        assert set(report["auc_series"]) == {"fbp", "tv", "unet"}

    def test_missing_detector(self, tiny):
        cfg, data, tv, unets, _ = tiny
        with pytest.raises(MissingModelError):
            run_detection_experiment(cfg, data["test"], None, tv, unets)

    def test_ensemble(self, tiny):
        cfg, data, *_ = tiny
        ecfg = ExperimentConfig(**{**TINY, "ensemble_folds": 2})
        det, logs = train_detector_stage(ecfg, data["train"], data["val"])
        assert isinstance(det, DetectorEnsemble) and len(det.members) == 2 and len(logs) == 2
        x = data["test"].recon[64][:3]
        expect = np.mean([m.predict_proba(x) for m in det.members], axis=0)
        np.testing.assert_array_equal(det.predict_proba(x), expect)


def test_saliency_report(tiny, tmp_path):
    cfg, data, _, unets, det = tiny
    report = run_saliency_experiment(cfg, data["test"], det, unets, out_dir=tmp_path)
    jsonschema.validate(json.loads((tmp_path / "saliency.json").read_text()), load_schema("saliency"))
    assert report["views"] == 8 and len(report["ids"]) == 4
    assert set(report["ratios"]) == {"fbp", "unet"}
    assert all(r >= 0 for r in report["ratios"]["fbp"])


class TestTiming:
    def test_single(self, tiny):
        cfg, data, *_ = tiny
        cfg = ExperimentConfig(**{**TINY, "timing_images": 1, "timing_repeats": 1})
        geom = ScanGeometry.for_image(cfg.size, cfg.reference_views)
        sino = radon_forward(data["test"].samples[0].image, geom)
        report = run_timing_harness(cfg, [sino], methods=("fbp",), views=(16,))
        assert len(report["rows"]) == 1
        s = report["rows"][0]["seconds"]
        assert s["n"] == 1 and s["mean"] == s["ci_lo"] == s["ci_hi"] > 0
        validate_report(report)

    def test_missing(self, tiny):
        cfg, data, *_ = tiny
        geom = ScanGeometry.for_image(cfg.size, cfg.reference_views)
        sino = radon_forward(data["test"].samples[0].image, geom)
        with pytest.raises(MissingModelError):
            run_timing_harness(cfg, [sino], methods=("unet",))
        with pytest.raises(MissingModelError):
            run_timing_harness(cfg, [sino], methods=("tv",))

    def test_trends(self):
        cfg = ExperimentConfig(timing_images=6, timing_repeats=10, unet_pairs=1, n_train=1, tv_pairs=1, n_val=1)
        samples = generate_splits(cfg)["test"].samples[:6]
        geom = ScanGeometry.for_image(cfg.size, cfg.reference_views)
        sinos = [radon_forward(s.image, geom) for s in samples]
        from sparsect.models import build_unet

        views = (256, 64, 16)
        net = build_unet(cfg.unet_config(), Rng(0))
        unets = {v: net for v in views}
        tv = {256: 0.001, 64: 0.01, 16: 0.1}
        report = run_timing_harness(cfg, sinos, tv, unets, methods=("tv", "unet"), views=views)
        t = {(r["views"], r["method"]): r["seconds"]["mean"] for r in report["rows"]}
        u = [t[(v, "unet")] for v in views]
        assert max(u) <= 1.2 * min(u)
        assert t[(256, "tv")] < t[(64, "tv")] < t[(16, "tv")]
