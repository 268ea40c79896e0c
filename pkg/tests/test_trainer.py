import math

import numpy as np
import pytest

from ci_sed import trainer as tr
from ci_sed.causal import ContextPool, pool_update
from ci_sed.metrics import read_metrics_csv
from ci_sed.model import CheckpointError, ModelConfig, init_model
from ci_sed.synthdata import GeneratorConfig, emit_dataset, generate_clip, load_strong_split, load_weak_split
from ci_sed.trainer import Optimizer, TrainConfig, labels_to_matrix, train_step

TINY = dict(channels=8, widths=(2, 4), epochs=2, batch_size=8)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    emit_dataset(GeneratorConfig(n=24, seed=0), 16, 8, 8, out_dir=out, workers=1)
    return out


@pytest.fixture(scope="module")
def train_clips(data_dir):
    return load_weak_split(data_dir)


@pytest.fixture(scope="module")
def trained(train_clips):
    model, pool, _ = tr.train_model(TrainConfig(variant="ci", **TINY), train_clips, 6)
    return model, pool


@pytest.fixture(scope="module")
def run(data_dir, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(**{**TINY, "epochs": 1})
    csv = tr.run_experiment(cfg, data_dir, [0, 1, 2], run_dir, workers=1)
    return cfg, run_dir, csv


def _batch(n_clips=4, n=24, seed=0):
    clips = [generate_clip(GeneratorConfig(n=n, seed=seed), "train", i) for i in range(n_clips)]
    return np.stack([c.spec for c in clips]), labels_to_matrix([c.weak for c in clips], 6)


def _fresh(cfg, k=6, mel_bins=64, n=24):
    model = init_model(cfg.model_config(k, mel_bins), cfg.seed)
    pool = ContextPool.zeros(k, n, cfg.lam) if cfg.variant == "ci" else None
    return model, pool, Optimizer(model.named_parameters(), cfg)


def _random_projection(model, seed=0):
    rng = np.random.default_rng(seed)
    proj = model.projection
    proj.weight.data = rng.normal(0, 0.5, proj.weight.shape).astype(proj.weight.dtype)
    proj.bias.data = rng.normal(0, 0.1, proj.bias.shape).astype(proj.bias.dtype)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lam == 0.01 and cfg.optimizer == "adam"
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
        assert cfg.batch_size == 32

    @pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(lam=-0.1), dict(variant="other"),
                                        dict(optimizer="rmsprop")])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_fingerprint(self):
        assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
        assert TrainConfig().fingerprint() != TrainConfig(lr=2e-3).fingerprint()
        assert TrainConfig(seed=0).fingerprint(exclude=("seed",)) == TrainConfig(seed=4).fingerprint(exclude=("seed",))


class TestTrainStep:
    @pytest.mark.parametrize("variant", ["baseline", "ci"])
    def test_perfect_branches(self, variant):
        cfg = TrainConfig(variant=variant, dtype="float64", **TINY)
        model, pool, opt = _fresh(cfg)
        model.classifier.weight.data[:] = 0.0
        model.classifier.bias.data[:] = 60.0
        specs, _ = _batch()
        res = train_step(model, pool, specs, np.ones((4, 6)), cfg, opt)
        # each branch sits on the clamp: -log(1 - 1e-7) per entry
        clamped = -math.log1p(-1e-7)
        assert res.loss == pytest.approx(2 * clamped, rel=1e-12)
        assert res.loss <= 2e-7 * (1 + 1e-7)

    def test_ci_initial_loss_equals_baseline(self):
        specs, y = _batch()
        losses = {}
        for variant in ("baseline", "ci"):
            cfg = TrainConfig(variant=variant, **TINY)
            model, pool, opt = _fresh(cfg)
            res = train_step(model, pool, specs, y, cfg, opt)
            losses[variant] = res.loss
            assert res.branch1 == res.branch2
        assert losses["ci"] == losses["baseline"]

    def test_loss_is_sum_of_branches(self):
        cfg = TrainConfig(variant="ci", dtype="float64", **TINY)
        model, pool, opt = _fresh(cfg)
        _random_projection(model)
        specs, y = _batch(8)
        for step in range(5):
            res = train_step(model, pool, specs, y, cfg, opt)
            pool = res.pool
            assert abs(res.loss - (res.branch1 + res.branch2)) <= 1e-12
            assert res.branch1 != res.branch2

    def test_baseline_loss_doubles_branch_one(self):
        cfg = TrainConfig(variant="baseline", dtype="float64", **TINY)
        model, pool, opt = _fresh(cfg)
        res = train_step(model, pool, *_batch(), cfg, opt)
        assert res.loss == 2 * res.branch1
        assert res.pool is None

    def test_overfit_fixed_batch(self):
        # nominal model width; events nearly fill the clip so a frame
        # detector can drive every clip score to its label
        clips = [generate_clip(GeneratorConfig(n=24, duration_frac=(0.9, 0.98)), "train", i) for i in range(8)]
        specs = np.stack([c.spec for c in clips])
        y = labels_to_matrix([c.weak for c in clips], 6)
        cfg = TrainConfig(variant="ci", lr=1e-3, channels=64, widths=(16, 32))
        model, pool, opt = _fresh(cfg)
        for step in range(500):
            res = train_step(model, pool, specs, y, cfg, opt)
            pool = res.pool
            if res.loss < 0.01:
                break
        assert res.loss < 0.01

    def test_empty_batch(self):
        cfg = TrainConfig(**TINY)
        model, pool, opt = _fresh(cfg)
        with pytest.raises(ValueError, match="non-empty"):
            train_step(model, pool, np.zeros((0, 64, 24)), np.zeros((0, 6)), cfg, opt)

    def test_non_finite_loss_reports_batch_and_norms(self):
        cfg = TrainConfig(**TINY)
        model, pool, opt = _fresh(cfg)
        specs, y = _batch()
        specs[1, 3, 5] = np.nan
        with pytest.raises(FloatingPointError, match=r"batch \(0, 3\).*parameter norms"):
            train_step(model, pool, specs, y, cfg, opt, batch_id=(0, 3))

    def test_pool_is_not_an_optimizer_parameter(self):
        cfg = TrainConfig(variant="ci", **TINY)
        model, pool, opt = _fresh(cfg)
        assert not any("pool" in name for name in opt.named)
        res = train_step(model, pool, *_batch(), cfg, opt)
        before = res.pool.q.copy()
        opt.step()
        np.testing.assert_array_equal(res.pool.q, before)


class TestEvaluate:
    def test_repeatable(self, trained, data_dir):
        model, pool = trained
        clips = load_strong_split(data_dir, "eval_confounded")
        q = pool.q.copy()
        a = tr.evaluate(model, pool, clips, "ci")
        b = tr.evaluate(model, pool, clips, "ci")
        assert a == b
        np.testing.assert_array_equal(pool.q, q)

    def test_baseline_branches_coincide(self, trained, data_dir):
        model, pool = trained
        specs = np.stack([c.spec for c in load_strong_split(data_dir, "eval_decorrelated")])
        out = tr.predict(model, None, specs, "baseline")
        np.testing.assert_array_equal(out["s1"], out["s2"])
        np.testing.assert_array_equal(out["m1"], out["m2"])

    def test_zero_projection_matches_baseline(self, trained, data_dir):
        model, pool = trained
        saved = model.projection.weight.data.copy(), model.projection.bias.data.copy()
        try:
            model.projection.weight.data[:] = 0
            model.projection.bias.data[:] = 0
            clips = load_strong_split(data_dir, "eval_decorrelated")
            assert tr.evaluate(model, pool, clips, "ci") == tr.evaluate(model, None, clips, "baseline")
        finally:
            model.projection.weight.data, model.projection.bias.data = saved

    def test_trained_projection_differs(self, trained, data_dir):
        model, pool = trained
        specs = np.stack([c.spec for c in load_strong_split(data_dir, "eval_decorrelated")])
        out = tr.predict(model, pool, specs, "ci")
        assert not np.array_equal(out["s1"], out["s2"])


class TestTrainModel:
    def test_deterministic(self, train_clips):
        cfg = TrainConfig(variant="ci", **TINY)
        m1, p1, l1 = tr.train_model(cfg, train_clips, 6)
        m2, p2, l2 = tr.train_model(cfg, train_clips, 6)
        assert l1 == l2
        np.testing.assert_array_equal(p1.q, p2.q)
        for name, p in m1.named_parameters().items():
            np.testing.assert_array_equal(p.data, m2.named_parameters()[name].data)

    @pytest.mark.parametrize("variant,expected_per_epoch", [("ci", 16), ("baseline", 0)])
    def test_one_pool_update_per_clip_per_epoch(self, train_clips, monkeypatch, variant, expected_per_epoch):
        calls = []

        def counting(pool, m, present):
            calls.append(len(list(present)))
            return pool_update(pool, m, present)

        monkeypatch.setattr(tr, "pool_update", counting)
        cfg = TrainConfig(variant=variant, **TINY)
        _, pool, _ = tr.train_model(cfg, train_clips, 6)
        assert len(calls) == cfg.epochs * expected_per_epoch
        if variant == "ci":
            labels = sum(len(c.weak) for c in train_clips)
            assert pool.touches.sum() == cfg.epochs * labels
        else:
            assert pool is None

    def test_resume_matches_uninterrupted(self, train_clips, tmp_path):
        cfg = TrainConfig(variant="ci", **TINY)
        ref_model, ref_pool, ref_losses = tr.train_model(cfg, train_clips, 6, tmp_path / "a")
        tr.train_model(TrainConfig(variant="ci", **{**TINY, "epochs": 1}), train_clips, 6, tmp_path / "b")
        model, pool, losses = tr.train_model(cfg, train_clips, 6, tmp_path / "b")
        assert losses == ref_losses
        np.testing.assert_array_equal(pool.q, ref_pool.q)
        np.testing.assert_array_equal(pool.touches, ref_pool.touches)
        for name, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, ref_model.named_parameters()[name].data)


class TestRunExperiment:
    def test_cardinality(self, run):
        _, _, csv = run
        rows = read_metrics_csv(csv)
        for metric in ("seg_f1", "event_f1", "sed_map", "at_f1", "at_map"):
            sel = [r for r in rows if r["metric"] == metric]
            assert len(sel) == 2 * 3 * 2
            assert {(r["model"], r["seed"], r["split"]) for r in sel} == {
                (v, s, sp) for v in ("baseline", "ci") for s in (0, 1, 2) for sp in tr.EVAL_SPLITS}

    def test_checkpoints_written(self, run):
        _, run_dir, _ = run
        for v in ("baseline", "ci"):
            for s in (0, 1, 2):
                assert tr.checkpoint_path(run_dir, v, s).exists()

    def test_rerun_appends_nothing(self, run, data_dir):
        cfg, run_dir, csv = run
        before = csv.read_bytes()
        tr.run_experiment(cfg, data_dir, [0, 1, 2], run_dir, workers=1)
        assert csv.read_bytes() == before

    def test_missing_rows_are_evaluated_without_retraining(self, run, data_dir, tmp_path):
        cfg, run_dir, csv = run
        before = csv.read_bytes()
        stamps = {p: p.stat().st_mtime_ns for p in (run_dir / "checkpoints").iterdir()}
        copy = tmp_path / "copy"
        copy.mkdir()
        (copy / "checkpoints").mkdir()
        for p in stamps:
            (copy / "checkpoints" / p.name).write_bytes(p.read_bytes())
        out = tr.run_experiment(cfg, data_dir, [0, 1, 2], copy, workers=1)
        assert out.read_bytes() == before
        assert all(p.stat().st_mtime_ns == t for p, t in stamps.items())

    def test_worker_count_does_not_change_csv(self, run, data_dir, tmp_path):
        cfg, _, csv = run
        out = tr.run_experiment(cfg, data_dir, [0, 1, 2], tmp_path, workers=2)
        assert out.read_bytes() == csv.read_bytes()

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            tr.run_experiment(TrainConfig(**TINY), tmp_path / "nothing", [0], tmp_path / "run")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no checkpoint"):
            tr.load_trained(tmp_path, "ci", 0)

    def test_config_mismatch_rejected(self, run):
        _, run_dir, _ = run
        other = ModelConfig(mel_bins=64, n_classes=6, channels=12, widths=(2, 4))
        with pytest.raises(CheckpointError):
            tr.load_trained(run_dir, "ci", 0, expected=other)
