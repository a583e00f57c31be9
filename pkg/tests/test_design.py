"""Envelope audits, parameter sweeps, and the safe-design search."""

import dataclasses

import numpy as np
import pytest

from envpeek import runio
from envpeek.benchmark import PRESETS, EnvelopeSpec, SweepSpec, preset_spec
from envpeek.design import (AuditBudget, DEFAULT_SAFETY_THRESHOLD, audit_envelope,
                            parameter_sweep, recommend_design)
from envpeek.training import TrainingDivergedError

# Smallest budget an audit accepts; keeps these end-to-end tests quick.
SMOKE = AuditBudget(pairs=100, iterations=200, batch_size=8,
                    content_size=(64, 64), capture_size=(60, 80))


class TestAuditBudget:
    def test_floors_enforced(self):
        with pytest.raises(ValueError):
            AuditBudget(iterations=100)
        with pytest.raises(ValueError):
            AuditBudget(pairs=50)

    def test_dict_roundtrip(self):
        assert AuditBudget.from_dict(SMOKE.to_dict()) == SMOKE


class TestAuditEnvelope:
    def test_identity_envelope_is_unsafe(self, tmp_path):
        verdict = audit_envelope(preset_spec("identity"), SMOKE, tmp_path, seed=1)
        assert verdict.verdict == "unsafe"
        assert verdict.attack_metrics.ssim >= verdict.threshold
        # content is fully visible even before any training
        assert verdict.baseline_metrics.ssim > 0.99

    def test_verdict_rule_and_artifacts(self, tmp_path):
        verdict = audit_envelope(preset_spec("easy"), SMOKE, tmp_path, seed=2)
        assert verdict.verdict == ("unsafe" if verdict.attack_metrics.ssim >=
                                   verdict.threshold else "safe")
        assert verdict.threshold == DEFAULT_SAFETY_THRESHOLD
        doc = runio.read_json(tmp_path / "verdict.json")
        # raw scores stay available so any other threshold can be applied
        assert "ssim" in doc["attack_metrics"]
        assert doc["threshold"] == DEFAULT_SAFETY_THRESHOLD
        assert (tmp_path / "evidence.png").exists()
        assert (tmp_path / "metrics.json").exists()
        assert doc["envelope"]["optics"]["k_t"] == preset_spec("easy").k_t

    def test_determinism_across_run_directories(self, tmp_path):
        v1 = audit_envelope(preset_spec("easy"), SMOKE, tmp_path / "a", seed=9)
        v2 = audit_envelope(preset_spec("easy"), SMOKE, tmp_path / "b", seed=9)
        assert v1.attack_metrics == v2.attack_metrics
        assert v1.verdict == v2.verdict
        assert ((tmp_path / "a" / "metrics.json").read_bytes() ==
                (tmp_path / "b" / "metrics.json").read_bytes())

    def test_divergence_reports_inconclusive_never_safe(self, tmp_path, monkeypatch):
        import envpeek.design as design_mod

        def exploding(*args, **kwargs):
            raise TrainingDivergedError("boom", checkpoint_path=None)

        monkeypatch.setattr(design_mod, "train", exploding)
        verdict = audit_envelope(preset_spec("safe"), SMOKE, tmp_path, seed=3)
        assert verdict.verdict == "inconclusive"
        assert verdict.attack_metrics is None
        doc = runio.read_json(tmp_path / "verdict.json")
        assert doc["verdict"] == "inconclusive"


class TestParameterSweep:
    def test_single_point_sweep_reduces_to_audit(self, tmp_path):
        spec = preset_spec("easy")
        sweep = SweepSpec(base=spec, axes={"k_t": [spec.k_t]})
        report = parameter_sweep(sweep, SMOKE, tmp_path / "sweep", seed=9)
        assert len(report["setups"]) == 1
        entry = report["setups"][0]
        direct = audit_envelope(spec, SMOKE, tmp_path / "direct", seed=9)
        assert entry["attack_ssim"] == pytest.approx(direct.attack_metrics.ssim,
                                                     abs=1e-12)
        assert entry["verdict"] == direct.verdict

    def test_forward_only_baselines_and_strips(self, tmp_path):
        sweep = SweepSpec(base=preset_spec("easy"),
                          axes={"k_t": [0.8, 0.4, 0.1], "kernel_size": [1, 9, 17],
                                "k_A": [0.2, 0.6, 1.0]})
        report = parameter_sweep(sweep, SMOKE, tmp_path, seed=21, audit=False)
        by_axis = {}
        for entry in report["setups"]:
            assert "attack_ssim" not in entry
            by_axis.setdefault(entry["axis"], []).append(entry["baseline_ssim"])
        for axis, values in by_axis.items():
            assert values[0] > values[1] > values[2], axis
        for axis in sweep.axes:
            assert (tmp_path / f"strip_{axis}.png").exists()
            assert (tmp_path / f"curve_{axis}.png").exists()
        assert (tmp_path / "curves.csv").exists()

    def test_per_setup_failures_isolated(self, tmp_path):
        sweep = SweepSpec(base=preset_spec("easy"),
                          axes={"kernel_size": [1, 129]})  # 129 exceeds the frame
        report = parameter_sweep(sweep, SMOKE, tmp_path, seed=5, audit=False)
        entries = {e["setup_id"]: e for e in report["setups"]}
        assert "error" in entries["kernel_size_129"]
        assert "baseline_ssim" in entries["kernel_size_1"]


class TestRecommendDesign:
    def test_range_containing_safe_point_returns_safe_design(self, tmp_path):
        base = preset_spec("easy")
        ranges = {"k_A": [1.0], "k_t": [0.1], "kernel_size": [17]}
        result = recommend_design(base, ranges, SMOKE, tmp_path, seed=4)
        assert result.found
        assert result.verdict.verdict == "safe"
        assert result.design.k_A == 1.0 and result.design.k_t == 0.1
        assert result.design.kernel_size == 17

    def test_found_design_stays_safe_on_fresh_seed(self, tmp_path):
        base = preset_spec("easy")
        ranges = {"k_A": [1.0], "k_t": [0.1], "kernel_size": [17]}
        result = recommend_design(base, ranges, SMOKE, tmp_path / "search", seed=4)
        assert result.found
        re_audit = audit_envelope(result.design, SMOKE, tmp_path / "recheck", seed=40)
        assert re_audit.verdict == "safe"

    def test_identity_only_range_has_no_safe_design(self, tmp_path):
        base = preset_spec("identity")
        ranges = {"k_A": [base.k_A], "k_t": [base.k_t], "kernel_size": [base.kernel_size]}
        result = recommend_design(base, ranges, SMOKE, tmp_path, seed=6)
        assert not result.found
        assert result.design is None
        assert result.message == "no safe design in range"
        doc = runio.read_json(tmp_path / "recommendation.json")
        assert doc["found"] is False

    def test_empty_ranges_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            recommend_design(preset_spec("easy"), {}, SMOKE, tmp_path)


class TestSafeDominance:
    def test_strictly_safer_design_stays_safe(self, tmp_path):
        safe = preset_spec("safe")
        verdict = audit_envelope(safe, SMOKE, tmp_path / "safe", seed=8)
        assert verdict.verdict == "safe"
        safer = dataclasses.replace(safe, k_t=0.05, kernel_size=19)
        verdict2 = audit_envelope(safer, SMOKE, tmp_path / "safer", seed=8)
        assert verdict2.verdict == "safe"
