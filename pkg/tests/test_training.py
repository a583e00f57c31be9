"""The optimization loop, loss wiring, evaluation and checkpoints."""

import math

import numpy as np
import pytest
import torch

from envpeek import runio
from envpeek.benchmark import PRESETS, build_dataset, make_manifest
from envpeek.model import AttackModel, ForwardTrace
from envpeek.training import (LossWeights, PairSet, TrainConfig,
                              TrainingDivergedError, evaluate,
                              evaluate_checkpoint, load_pairs, total_loss, train)

from oracles import total_loss_oracle


def _trace_from(target, j_hat=None, j_coarse=None, a_pred=None, warped=None):
    return ForwardTrace(
        warped_input=warped if warped is not None else target.clone(),
        A_pred=a_pred,
        t_pred=torch.full_like(target, 0.5),
        J_coarse=j_coarse,
        J_hat=j_hat if j_hat is not None else target.clone(),
        H_pred=None,
    )


def _tiny_pairs(n=8, capture=(24, 24), content=(24, 24), seed=0):
    g = torch.Generator().manual_seed(seed)
    caps = torch.rand(n, 3, *capture, generator=g)
    gts = torch.rand(n, 3, *content, generator=g)
    test = max(1, n // 5)
    return PairSet(captures=caps, contents=gts,
                   train_indices=list(range(n - test)),
                   test_indices=list(range(n - test, n)))


class TestTotalLoss:
    def test_perfect_prediction_is_zero(self):
        g = torch.Generator().manual_seed(1)
        target = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        trace = _trace_from(target, j_hat=target.clone(), j_coarse=target.clone(),
                            a_pred=target.clone(), warped=target.clone())
        total, breakdown = total_loss(trace, target, LossWeights())
        assert float(total) == pytest.approx(0.0, abs=1e-12)
        assert breakdown == {"recon": 0.0, "j_term": 0.0, "a_term": 0.0}

    @pytest.mark.parametrize("variant,zeroed", [
        ("no_A_constraint", "a_term"),
        ("no_J_constraint", "j_term"),
    ])
    def test_dropped_term_is_exact_zero(self, variant, zeroed):
        g = torch.Generator().manual_seed(2)
        target = torch.rand(2, 3, 16, 16, generator=g)
        trace = _trace_from(target, j_hat=torch.rand(2, 3, 16, 16, generator=g),
                            j_coarse=torch.rand(2, 3, 16, 16, generator=g),
                            a_pred=torch.rand(2, 3, 16, 16, generator=g),
                            warped=torch.rand(2, 3, 16, 16, generator=g))
        _, breakdown = total_loss(trace, target, LossWeights(), variant)
        assert breakdown[zeroed] == 0.0
        other = {"a_term": "j_term", "j_term": "a_term"}[zeroed]
        assert breakdown[other] > 0.0

    def test_black_box_drops_both_terms(self):
        g = torch.Generator().manual_seed(3)
        target = torch.rand(2, 3, 16, 16, generator=g)
        trace = ForwardTrace(warped_input=torch.rand(2, 3, 16, 16, generator=g),
                             A_pred=None, t_pred=None, J_coarse=None,
                             J_hat=torch.rand(2, 3, 16, 16, generator=g), H_pred=None)
        total, breakdown = total_loss(trace, target, LossWeights(), "black_box")
        assert breakdown["j_term"] == 0.0 and breakdown["a_term"] == 0.0
        assert float(total) == pytest.approx(breakdown["recon"], abs=1e-6)

    def test_missing_trace_field_rejected(self):
        g = torch.Generator().manual_seed(4)
        target = torch.rand(1, 3, 16, 16, generator=g)
        trace = ForwardTrace(warped_input=target.clone(), A_pred=None, t_pred=None,
                             J_coarse=None, J_hat=target.clone(), H_pred=None)
        with pytest.raises(ValueError):
            total_loss(trace, target, LossWeights(), "full")

    def test_breakdown_sums_to_total(self):
        g = torch.Generator().manual_seed(5)
        target = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        trace = _trace_from(target,
                            j_hat=torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64),
                            j_coarse=torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64),
                            a_pred=torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64),
                            warped=torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64))
        total, breakdown = total_loss(trace, target, LossWeights())
        assert float(total) == pytest.approx(sum(breakdown.values()), abs=1e-9)

    def test_matches_scalar_loop_oracle(self):
        r = np.random.default_rng(9)
        shape = (12, 12, 3)
        target = r.uniform(0, 1, shape)
        j_hat = r.uniform(0, 1, shape)
        j_coarse = r.uniform(0, 1, shape)
        a_pred = r.uniform(0, 1, shape)
        warped = r.uniform(0, 1, shape)

        def chw(a):
            return torch.tensor(a).permute(2, 0, 1).unsqueeze(0)

        trace = ForwardTrace(warped_input=chw(warped), A_pred=chw(a_pred),
                             t_pred=chw(np.full(shape, 0.5)), J_coarse=chw(j_coarse),
                             J_hat=chw(j_hat), H_pred=None)
        total, _ = total_loss(trace, chw(target), LossWeights())
        expected = total_loss_oracle(target, j_hat, j_coarse, a_pred, warped,
                                     (1.0, 1.0, 0.1))
        assert float(total) == pytest.approx(expected, abs=1e-9)


class TestTrainLoop:
    def test_fixed_seed_reproduces_loss_history(self):
        pairs = _tiny_pairs()
        cfg = TrainConfig(iterations=25, batch_size=4, seed=7)
        _, s1 = train(pairs, cfg)
        _, s2 = train(pairs, cfg)
        assert s1.loss_history == s2.loss_history

    def test_history_records_three_terms_every_iteration(self):
        pairs = _tiny_pairs()
        _, state = train(pairs, TrainConfig(iterations=12, batch_size=4, seed=1))
        assert len(state.loss_history) == 12
        assert all(len(row) == 5 for row in state.loss_history)

    def test_loss_decreases_on_overfit(self):
        pairs = _tiny_pairs(n=2)
        _, state = train(pairs, TrainConfig(iterations=150, batch_size=2, seed=3))
        first = state.loss_history[0][1]
        last = np.mean([row[1] for row in state.loss_history[-10:]])
        assert last < 0.5 * first

    def test_divergence_aborts_and_keeps_checkpoint(self, tmp_path, monkeypatch):
        pairs = _tiny_pairs()
        calls = {"n": 0}
        import envpeek.training as training_mod
        real = training_mod.total_loss

        def poisoned(trace, target, weights, variant="full"):
            calls["n"] += 1
            total, breakdown = real(trace, target, weights, variant)
            if calls["n"] >= 5:
                return total * float("nan"), breakdown
            return total, breakdown

        monkeypatch.setattr(training_mod, "total_loss", poisoned)
        run_dir = tmp_path / "run"
        cfg = TrainConfig(iterations=20, batch_size=4, seed=1, checkpoint_interval=2)
        with pytest.raises(TrainingDivergedError) as err:
            train(pairs, cfg, run_dir=run_dir)
        assert err.value.checkpoint_path is not None
        assert err.value.checkpoint_path.exists()
        assert (run_dir / "loss.csv").exists()

    def test_weight_decay_shrinks_at_zero_lr(self):
        pairs = _tiny_pairs()

        def norm_after(iters):
            cfg = TrainConfig(lr=0.0, weight_decay=0.05, iterations=iters,
                              batch_size=4, seed=5)
            model, _ = train(pairs, cfg)
            with torch.no_grad():
                return float(sum(p.norm() ** 2 for p in model.parameters()).sqrt())

        n1, n2, n3 = norm_after(1), norm_after(3), norm_after(6)
        assert n1 > n2 > n3

    def test_run_dir_layout(self, tmp_path):
        pairs = _tiny_pairs()
        run_dir = tmp_path / "run"
        cfg = TrainConfig(iterations=10, batch_size=4, seed=2, checkpoint_interval=5)
        train(pairs, cfg, run_dir=run_dir)
        assert (run_dir / "manifest.json").exists()
        assert (run_dir / "loss.csv").exists()
        assert (run_dir / "checkpoint_final.pt").exists()
        assert (run_dir / "checkpoints" / "ckpt_000005.pt").exists()
        assert (run_dir / "checkpoints" / "ckpt_000010.pt").exists()
        manifest = runio.read_json(run_dir / "manifest.json")
        assert manifest["config"]["iterations"] == 10
        lines = (run_dir / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "iteration,total,recon,j_term,a_term"
        assert len(lines) == 11

    def test_variant_model_mismatch_rejected(self):
        pairs = _tiny_pairs()
        model = AttackModel("no_refine", pairs.capture_size, pairs.content_size)
        with pytest.raises(ValueError):
            train(pairs, TrainConfig(iterations=5, variant="full"), model=model)


class TestEvaluate:
    def test_oracle_predictions_score_perfectly(self):
        pairs = _tiny_pairs(n=6)

        class OracleModel(torch.nn.Module):
            variant = "full"

            def forward(self, caps):
                idx = pairs.test_indices[: caps.shape[0]]
                gts = pairs.contents[torch.as_tensor(idx)]
                return ForwardTrace(warped_input=caps.clone() if caps.shape[-2:] ==
                                    gts.shape[-2:] else gts.clone(),
                                    A_pred=None, t_pred=None, J_coarse=None,
                                    J_hat=gts.clone(), H_pred=None)

        report = evaluate(OracleModel(), pairs)
        assert report.aggregate.ssim == pytest.approx(1.0, abs=1e-9)
        assert report.aggregate.rmse == 0.0
        assert report.aggregate.psnr == 99.0

    def test_row_count_is_test_size_plus_aggregate(self, tmp_path):
        pairs = _tiny_pairs(n=10)
        model, _ = train(pairs, TrainConfig(iterations=5, batch_size=4, seed=0))
        report = evaluate(model, pairs)
        assert len(report.per_image) == len(pairs.test_indices)
        report.write(tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        model_rows = [ln for ln in lines[1:] if ",model," in ln]
        assert len(model_rows) == len(pairs.test_indices) + 1

    def test_empty_test_set_rejected(self):
        pairs = _tiny_pairs()
        pairs.test_indices = []
        model = AttackModel("full", pairs.capture_size, pairs.content_size)
        with pytest.raises(ValueError):
            evaluate(model, pairs)

    def test_checkpoint_roundtrip_reproduces_metrics_bit_exact(self, tmp_path):
        pairs = _tiny_pairs(n=8)
        run_dir = tmp_path / "run"
        cfg = TrainConfig(iterations=15, batch_size=4, seed=4)
        model, _ = train(pairs, cfg, run_dir=run_dir)
        live = evaluate(model, pairs)
        from_disk = evaluate_checkpoint(run_dir / "checkpoint_final.pt", pairs,
                                        expected_variant="full")
        assert live.aggregate == from_disk.aggregate
        assert live.per_image == from_disk.per_image

    def test_checkpoint_resolution_mismatch_rejected(self, tmp_path):
        pairs = _tiny_pairs(n=6)
        run_dir = tmp_path / "run"
        train(pairs, TrainConfig(iterations=5, batch_size=2, seed=0), run_dir=run_dir)
        other = _tiny_pairs(n=6, capture=(32, 32), content=(32, 32))
        with pytest.raises(ValueError, match="match dataset"):
            evaluate_checkpoint(run_dir / "checkpoint_final.pt", other)


class TestEndToEndDirection:
    def test_easy_setup_attack_beats_warped_input(self, tmp_path):
        manifest = make_manifest("easy_small", PRESETS["easy"], pairs=100,
                                 content_size=(48, 48), capture_size=(60, 80), seed=11)
        build_dataset(manifest, tmp_path / "ds")
        pairs = load_pairs(tmp_path / "ds")
        model, _ = train(pairs, TrainConfig(iterations=400, batch_size=8, seed=3))
        report = evaluate(model, pairs)
        assert report.aggregate.ssim > report.baseline_aggregate.ssim

    def test_hard_setup_baseline_below_trained_model(self, tmp_path):
        manifest = make_manifest("hard_small", PRESETS["hard"], pairs=100,
                                 content_size=(48, 48), capture_size=(60, 80), seed=12)
        build_dataset(manifest, tmp_path / "ds")
        pairs = load_pairs(tmp_path / "ds")
        model, _ = train(pairs, TrainConfig(iterations=400, batch_size=8, seed=3))
        report = evaluate(model, pairs)
        base = report.baseline_aggregate
        agg = report.aggregate
        assert agg.ssim > base.ssim
        assert agg.psnr > base.psnr
        assert agg.rmse < base.rmse
