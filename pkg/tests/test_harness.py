import math
from dataclasses import replace

import numpy as np
import pytest

from cdn import cli, ops
from cdn.ablation import CUTOFFS, VARIANTS, AblationTable, run_ablation
from cdn.checkpoint import load_checkpoint
from cdn.data import DataError, Dataset, NoiseSpec, make_batch
from cdn.losses import LossToggles, composite_loss, loss_kld, loss_ssim
from cdn.metrics import PSNR_CAP, psnr, ssim_map, ssim_metric
from cdn.model import CdnModel, ModelConfig
from cdn.optim import Adam, adam_reference, lr_at
from cdn.tensor import Param, backward, use_tape
from cdn.textures import smoke_dataset
from cdn.train import NumericalError, TrainConfig, Trainer, evaluate, load_model, smoothed, train

TINY = ModelConfig(features=4, idm_widths=(4, 4))


def tiny_cfg(**kw):
    base = dict(batch=2, patch_size=8, epochs=1, model=TINY)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def toy():
    return smoke_dataset(seed=0, count=7, size=16, n_test=1)


class TestAdam:
    def test_first_step(self):
        p = Param(np.array([1.0]), dtype=np.float64)
        p.grad[...] = 1.0
        Adam([("p", p)], lr=0.1, weight_decay=0).step()
        assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)

    def test_weight_decay_only(self):
        p = Param(np.array([1.0]), dtype=np.float64)
        Adam([("p", p)], lr=0.1, weight_decay=1e-4).step()
        assert p.data[0] == pytest.approx(adam_reference(1.0, [0.0], 0.1, wd=1e-4)[0], abs=1e-12)

    @pytest.mark.parametrize("wd", [0.0, 1e-2])
    def test_matches_scalar_reference(self, wd):
        rng = np.random.default_rng(8)
        for _ in range(10):
            p0 = float(rng.standard_normal())
            grads = rng.standard_normal(100).tolist()
            p = Param(np.array([p0]), dtype=np.float64)
            opt = Adam([("p", p)], lr=1e-2, weight_decay=wd)
            traj = []
            for g in grads:
                p.grad[...] = g
                opt.step()
                traj.append(p.data[0])
            np.testing.assert_allclose(traj, adam_reference(p0, grads, 1e-2, wd=wd), atol=1e-7, rtol=0)

    def test_decoupled(self):
        p = Param(np.array([2.0]), dtype=np.float64)
        Adam([("p", p)], lr=0.1, weight_decay=0.5, decoupled=True).step()
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_missing_grad(self):
        p = Param(np.array([1.0]))
        p.grad = None
        with pytest.raises(ValueError):
            Adam([("p", p)]).step()

    def test_deterministic_trajectories(self, toy):
        runs = [train(tiny_cfg(max_steps=3), toy[0])[0].state_dict() for _ in range(2)]
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 2e-4), (29, 2e-4), (30, 1e-4), (90, 2.5e-5)])
    def test_step_decay(self, epoch, lr):
        assert lr_at(epoch) == pytest.approx(lr)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(-1)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"lr0": -1}, {"batch": 0}, {"lr_factor": 0}, {"lr_every": 0},
                                    {"patch_size": 6}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            tiny_cfg(**kw)

    def test_dict_round_trip(self):
        cfg = tiny_cfg(seed=5, ssim_loss=False)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTraining:
    def test_records_loss_terms(self, toy):
        _, history = train(tiny_cfg(max_steps=2), toy[0])
        assert [r["step"] for r in history] == [0, 1]
        assert set(history[0]) >= {"l_ssim", "l_kld", "l1", "total", "lr"}

    def test_zero_lr_keeps_parameters(self, toy):
        cfg = tiny_cfg(lr0=0.0, weight_decay=0.0)
        trainer = Trainer(cfg, toy[0])
        before = {n: p.data.copy() for n, p in trainer.model.named_parameters()}
        trainer.run()
        assert trainer.epoch == 1
        assert all(np.array_equal(p.data, before[n]) for n, p in trainer.model.named_parameters())

    def test_mid_epoch_resume_bit_identical(self, toy, tmp_path):
        cfg = tiny_cfg(epochs=10, max_steps=10)
        straight = Trainer(cfg, toy[0])
        straight.run()

        first = Trainer(cfg, toy[0])
        first.run(steps=4, checkpoint_path=tmp_path / "mid.cdnc")
        assert first.index != 0  # stopped inside an epoch
        resumed = Trainer.from_checkpoint(tmp_path / "mid.cdnc", toy[0])
        resumed.run()

        assert resumed.step == straight.step == 10
        a, b = straight.model.state_dict(), resumed.model.state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert [r["total"] for r in straight.history[4:]] == [r["total"] for r in resumed.history]
        for k in straight.optim.state.m:
            assert np.array_equal(straight.optim.state.m[k], resumed.optim.state.m[k])
            assert np.array_equal(straight.optim.state.v[k], resumed.optim.state.v[k])

    def test_checkpoint_per_epoch(self, toy, tmp_path):
        path = tmp_path / "c.cdnc"
        trainer = Trainer(tiny_cfg(epochs=2), toy[0])
        trainer.run(checkpoint_path=path)
        meta = load_checkpoint(path).meta
        assert (meta["epoch"], meta["step"]) == (2, trainer.step)
        assert load_model(path).training is False

    def test_nan_aborts_with_diagnostics(self, tmp_path):
        bad = Dataset(["nan.pgm"], [np.full((1, 8, 8), np.nan, np.float32)])
        trainer = Trainer(tiny_cfg(), bad, diag_dir=tmp_path)
        with np.errstate(all="ignore"), pytest.raises(NumericalError):
            trainer.run()
        assert (tmp_path / "nan_step0.cdnc").exists()
        assert (tmp_path / "nan_step0_noisy.cdnt").exists()

    def test_channel_mismatch(self, toy):
        with pytest.raises(DataError):
            Trainer(tiny_cfg(model=replace(TINY, channels=3)), toy[0])

    def test_empty(self):
        with pytest.raises(DataError):
            Trainer(tiny_cfg(), Dataset([], []))

    def test_smoothed(self):
        np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])
        np.testing.assert_allclose(smoothed([2, 4], window=50), [3.0])


class TestToggles:
    def _grads(self, toy, toggles, manual=None):
        model = CdnModel(TINY, seed=2)
        model.idm.out.weight.data[...] = 0.05
        batch = make_batch(toy[0], NoiseSpec(25.0), 2, 0, 0, 0, 8)
        with use_tape():
            out = model.forward_train(batch.quadrants)
            terms = composite_loss(out.denoised, out.x_c, out.dists, batch.clean_quadrants[0], toggles)
            loss = terms.total if manual is None else manual(terms, out, batch)
            backward(loss, model.parameters())
        return terms, {n: p.grad.copy() for n, p in model.named_parameters()}

    def test_l1_only(self, toy):
        terms, _ = self._grads(toy, LossToggles(ssim=False, kld=False))
        assert terms.l_ssim.item() == 0 and terms.l_kld.item() == 0
        assert terms.total.item() == terms.l1.item()

    @pytest.mark.parametrize("drop", ["ssim", "kld"])
    def test_disabled_term_has_no_gradient(self, toy, drop):
        toggles = LossToggles(ssim=drop != "ssim", kld=drop != "kld")
        terms, got = self._grads(toy, toggles)
        assert terms.values()["l_" + drop] == 0

        def without(terms, out, batch):
            kept = loss_kld(out.dists) if drop == "ssim" else loss_ssim(out.x_c, batch.clean_quadrants[0])
            return ops.sum_scalars([terms.l1, kept])

        _, want = self._grads(toy, LossToggles(ssim=False, kld=False), manual=without)
        for k in want:
            np.testing.assert_allclose(got[k], want[k], rtol=1e-5, atol=1e-9)


class TestMetrics:
    def test_identical_cap(self, rng):
        x = rng.uniform(size=(1, 8, 8))
        assert psnr(x, x) == PSNR_CAP

    def test_one_level_error(self):
        a = np.full((1, 8, 8), 100 / 255)
        assert psnr(a, a + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)

    def test_noisy_baseline(self):
        clean = np.full((1, 512, 512), 0.5)
        noisy = clean + np.random.default_rng(0).standard_normal(clean.shape) * 25 / 255
        assert psnr(noisy, clean) == pytest.approx(10 * math.log10(255 ** 2 / 25 ** 2), abs=0.3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))

    def test_ssim_identity_and_symmetry(self, rng):
        a, b = rng.uniform(size=(1, 20, 20)), rng.uniform(size=(1, 20, 20))
        assert ssim_metric(a, a) == pytest.approx(1.0)
        assert ssim_metric(a, b) == pytest.approx(ssim_metric(b, a), rel=1e-12)

    def test_ssim_mean_bounds(self, rng):
        a, b = rng.uniform(size=(1, 24, 24)), rng.uniform(size=(1, 24, 24))
        m = ssim_map(a, b)
        assert m.min() <= m.mean() <= m.max()
        assert m.shape == (1, 14, 14)

    def test_small_image_uses_one_window(self, rng):
        a, b = rng.uniform(size=(1, 6, 6)), rng.uniform(size=(1, 6, 6))
        assert ssim_map(a, b).shape == (1, 1, 1)


class TestEvaluate:
    def test_zero_model_is_noisy_baseline(self, toy):
        model = CdnModel(TINY)
        report = evaluate(model, toy[1], 25.0)
        assert report.psnr_db == report.noisy_psnr_db
        assert report.ssim == report.noisy_ssim
        assert model.training  # restored

    def test_deterministic(self, toy):
        model = CdnModel(TINY)
        model.idm.out.weight.data[...] = 0.01
        a, b = evaluate(model, toy[1], 25.0, seed=3), evaluate(model, toy[1], 25.0, seed=3)
        assert a == b
        assert "mean" in a.format()

    def test_empty(self):
        with pytest.raises(DataError):
            evaluate(CdnModel(TINY), Dataset([], []), 25.0)


class TestAblation:
    def test_variants(self):
        assert set(VARIANTS) == {"CDN", "CDN-IIP(R)", "CDN-NEP(R)", "CDN-SSIM", "CDN-KLD", "CDN-SSIM-KLD"}
        cfg = VARIANTS["CDN-SSIM-KLD"].apply(tiny_cfg())
        assert (cfg.ssim_loss, cfg.kld_loss) == (False, False)
        assert not VARIANTS["CDN-IIP(R)"].apply(tiny_cfg()).model.use_iip

    def test_removed_path_param_count(self):
        full = CdnModel(VARIANTS["CDN"].apply(tiny_cfg()).model).num_parameters()
        assert CdnModel(VARIANTS["CDN-IIP(R)"].apply(tiny_cfg()).model).num_parameters() < full
        assert CdnModel(VARIANTS["CDN-NEP(R)"].apply(tiny_cfg()).model).num_parameters() < full

    def test_table(self, toy):
        table = run_ablation(tiny_cfg(max_steps=1), toy[0], toy[1], seeds=(0, 1), variants=tuple(VARIANTS))
        assert isinstance(table, AblationTable)
        assert table.variants() == ["CDN", *CUTOFFS, *list(VARIANTS)[1:]]
        assert table.seeds() == [0, 1]
        text = table.format()
        assert all(v in text for v in VARIANTS)


# --- command line ------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    assert cli.main(["smoke-data", "--out", str(root), "--count", "6", "--size", "16", "--test-count", "2"]) == 0
    return root


TINY_FLAGS = ["--f-width", "4", "--idm-widths", "4,4", "--batch", "2", "--patch-size", "8"]


class TestCli:
    def test_train_eval_denoise(self, smoke_dir, tmp_path, capsys):
        ckpt = tmp_path / "m.cdnc"
        log = tmp_path / "loss.csv"
        assert cli.main(["train", "--data", str(smoke_dir / "train"), "--out", str(ckpt), "--epochs", "2",
                         "--log", str(log), *TINY_FLAGS]) == 0
        assert len(log.read_text().splitlines()) == 1 + 4
        report = tmp_path / "r.txt"
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(smoke_dir / "test"), "--sigma", "15,50",
                         "--report", str(report)]) == 0
        assert report.read_text().count("sigma =") == 2
        out = tmp_path / "o.pgm"
        src = smoke_dir / "test" / "tex04.pgm"
        assert cli.main(["denoise", "--ckpt", str(ckpt), "--in", str(src), "--out", str(out),
                         "--sigma", "25", "--add-noise"]) == 0
        assert out.read_bytes()[:2] == b"P5"

    def test_resume(self, smoke_dir, tmp_path):
        ckpt = tmp_path / "m.cdnc"
        data = str(smoke_dir / "train")
        assert cli.main(["train", "--data", data, "--out", str(ckpt), "--max-steps", "1", *TINY_FLAGS]) == 0
        assert cli.main(["train", "--data", data, "--out", str(ckpt), "--resume", str(ckpt),
                         "--max-steps", "3", "--epochs", "5", *TINY_FLAGS]) == 0
        assert load_checkpoint(ckpt).meta["step"] == 3

    def test_missing_required_is_usage_error(self, capsys):
        assert cli.main(["train"]) == 1
        assert cli.main(["no-such-command"]) == 1

    def test_bad_value_is_usage_error(self, smoke_dir, tmp_path):
        assert cli.main(["train", "--data", str(smoke_dir / "train"), "--out", str(tmp_path / "x.cdnc"),
                         "--lr-factor", "2", *TINY_FLAGS]) == 1

    def test_missing_data_is_data_error(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "x.cdnc")]) == 2
        assert cli.main(["eval", "--ckpt", str(tmp_path / "none.cdnc"), "--data", str(tmp_path)]) == 2

    def test_nan_is_numerical_failure(self, monkeypatch, tmp_path):
        bad = Dataset(["nan.pgm"], [np.full((1, 8, 8), np.nan, np.float32)])
        monkeypatch.setattr(cli, "load_dataset", lambda _: bad)
        assert cli.main(["train", "--data", "x", "--out", str(tmp_path / "x.cdnc"), *TINY_FLAGS]) == 3

    def test_config_precedence(self, tmp_path):
        conf = tmp_path / "c.conf"
        conf.write_text("# comment\ndata = /from/config\nsigma = 50\nseed = 7\n")
        args = cli.parse_args(["train", "--config", str(conf), "--out", "o", "--seed", "3"])
        assert (args.data, args.sigma, args.seed, args.lr) == ("/from/config", 50.0, 3, 2e-4)

    def test_unknown_config_key(self, tmp_path):
        conf = tmp_path / "c.conf"
        conf.write_text("bogus = 1\n")
        assert cli.main(["gradcheck", "--config", str(conf)]) == 1

    def test_gradcheck_command(self, capsys):
        assert cli.main(["gradcheck", "--module", "losses"]) == 0
        assert "ssim_global" in capsys.readouterr().out

    def test_ablate_command(self, smoke_dir, tmp_path):
        out = tmp_path / "t.txt"
        assert cli.main(["ablate", "--data", str(smoke_dir / "train"), "--test-data", str(smoke_dir / "test"),
                         "--out", str(out), "--seeds", "1", "--variants", "CDN,CDN-SSIM-KLD", "--max-steps", "1",
                         *TINY_FLAGS]) == 0
        assert "CDN cut-NEP" in out.read_text()
        assert cli.main(["ablate", "--data", str(smoke_dir / "train"), "--out", str(out),
                         "--variants", "NOPE", *TINY_FLAGS]) == 1
