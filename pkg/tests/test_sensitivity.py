import numpy as np
import pytest

from selfinverse.data import SyntheticTaskSpec, generate_synthetic, ideal_involution
from selfinverse.sensitivity import (
    SensitivityConfig,
    SensitivityReport,
    SensitivityRow,
    perturb_inputs,
    run_sensitivity,
    sensitivity_summary,
    summary_to_csv,
    summary_to_text,
)


@pytest.fixture
def neg16_ds():
    return generate_synthetic(
        SyntheticTaskSpec(task="biased_negation", image_size=16, n_samples=5, seed=0))


def _ideal(v):
    return ideal_involution("biased_negation", v)


def _noisy_ideal(scale):
    def fn(v):
        out = _ideal(v)
        rng = np.random.default_rng(int(abs(float(v.sum())) * 1e6) % 2**31)
        return np.clip(out + scale * rng.normal(size=out.shape), -1, 1).astype(np.float32)
    return fn


def _models(a=_ideal, b=_ideal, o=_ideal):
    return {"pix2pixA": a, "pix2pixB": b, "one2one": o}


class TestConfig:
    def test_valid(self):
        SensitivityConfig(direction="A", metric="psnr", models=_models())

    def test_bad_direction(self):
        with pytest.raises(ValueError, match="direction"):
            SensitivityConfig(direction="C", metric="psnr", models=_models())

    def test_bad_metric(self):
        with pytest.raises(ValueError, match="metric"):
            SensitivityConfig(direction="A", metric="mse", models=_models())

    def test_missing_model(self):
        with pytest.raises(ValueError, match="one2one"):
            SensitivityConfig(direction="A", metric="psnr",
                              models={"pix2pixA": _ideal, "pix2pixB": _ideal})


class TestPerturbInputs:
    def test_direction_a_replaces_x_keeps_y(self, neg16_ds):
        pert = perturb_inputs(neg16_ds, "A", _ideal)
        for s, p in zip(neg16_ds.samples, pert.samples):
            assert p.id == s.id + "+perturbed"
            np.testing.assert_array_equal(p.y, s.y)
            np.testing.assert_allclose(p.x, _ideal(s.y), atol=1e-6)

    def test_direction_b_replaces_y_keeps_x(self, neg16_ds):
        pert = perturb_inputs(neg16_ds, "B", _ideal)
        for s, p in zip(neg16_ds.samples, pert.samples):
            np.testing.assert_array_equal(p.x, s.x)
            np.testing.assert_allclose(p.y, _ideal(s.x), atol=1e-6)

    def test_ideal_opposite_gives_near_zero_perturbation(self, neg16_ds):
        # for an exact inverse model the perturbed input equals the clean one
        pert = perturb_inputs(neg16_ds, "A", _ideal)
        for s, p in zip(neg16_ds.samples, pert.samples):
            assert np.abs(p.x - s.x).max() < 1e-6


class TestRunSensitivity:
    def test_zero_de_for_exact_models(self, neg16_ds):
        cfg = SensitivityConfig(direction="A", metric="l1", models=_models())
        base, o2o = run_sensitivity(cfg, neg16_ds)
        assert base.model == "pix2pixA"
        assert o2o.model == "one2one"
        assert base.mean_de < 1e-6
        assert o2o.mean_de < 1e-6

    def test_de_is_absolute_difference(self, neg16_ds):
        cfg = SensitivityConfig(direction="A", metric="psnr",
                                models=_models(b=_noisy_ideal(0.2)))
        base, o2o = run_sensitivity(cfg, neg16_ds)
        for rep in (base, o2o):
            for r in rep.per_sample:
                assert r.de == pytest.approx(abs(r.e_perturbed - r.e_clean), abs=1e-12)
                assert r.de >= 0

    def test_noisy_opposite_creates_positive_de(self, neg16_ds):
        cfg = SensitivityConfig(direction="A", metric="l1",
                                models=_models(b=_noisy_ideal(0.3)))
        base, _ = run_sensitivity(cfg, neg16_ds)
        assert base.mean_de > 0.01

    def test_robust_model_has_lower_de(self, neg16_ds):
        # a constant model ignores its input entirely, so its dE is zero while
        # the faithful model's dE is positive under a noisy perturbation
        const = lambda v: np.zeros_like(v)
        cfg = SensitivityConfig(direction="A", metric="l1",
                                models=_models(a=_ideal, b=_noisy_ideal(0.3), o=const))
        base, o2o = run_sensitivity(cfg, neg16_ds)
        assert o2o.mean_de < 1e-12 < base.mean_de

    def test_direction_b_uses_pix2pixb_baseline(self, neg16_ds):
        cfg = SensitivityConfig(direction="B", metric="ssim",
                                models=_models(a=_noisy_ideal(0.2)))
        base, _ = run_sensitivity(cfg, neg16_ds)
        assert base.model == "pix2pixB"
        assert base.direction == "B"

    def test_report_io(self, neg16_ds, tmp_path):
        import json
        cfg = SensitivityConfig(direction="A", metric="psnr",
                                models=_models(b=_noisy_ideal(0.1)))
        base, _ = run_sensitivity(cfg, neg16_ds)
        base.to_json(tmp_path / "r.json")
        base.to_csv(tmp_path / "r.csv")
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["model"] == "pix2pixA"
        assert doc["mean_de"] == pytest.approx(base.mean_de)
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert lines[0] == "id,e_clean,e_perturbed,de"
        assert len(lines) == 1 + len(neg16_ds)


class TestSummary:
    def _reports(self):
        row = SensitivityRow(id="s", e_clean=1.0, e_perturbed=1.5, de=0.5)
        return [
            SensitivityReport(model="pix2pixA", direction="A", metric="psnr", per_sample=[row]),
            SensitivityReport(model="one2one", direction="A", metric="psnr", per_sample=[row]),
        ]

    def test_table_layout_and_gaps(self):
        rows = sensitivity_summary(self._reports())
        # 2 directions x 2 models x 2 metrics
        assert len(rows) == 8
        filled = [r for r in rows if r.mean_de is not None]
        assert len(filled) == 2
        assert all(r.mean_de == pytest.approx(0.5) for r in filled)
        gaps = [r for r in rows if r.mean_de is None]
        assert {(r.direction, r.metric) for r in gaps} >= {("B", "psnr"), ("A", "ssim")}

    def test_csv_marks_missing(self, tmp_path):
        summary_to_csv(sensitivity_summary(self._reports()), tmp_path / "s.csv")
        text = (tmp_path / "s.csv").read_text()
        assert text.splitlines()[0] == "direction,model,metric,mean_dE"
        assert "missing" in text
        assert "0.5" in text

    def test_text_table(self):
        out = summary_to_text(sensitivity_summary(self._reports()))
        assert "dPSNR" in out
        assert "missing" in out
