import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from istar import autodiff as ad
from istar.data import load_png, make_corpus, make_pair, quantize, save_png
from istar.metrics import psnr, rgb_to_y, ssim
from istar.model import IstarModel, ModelConfig
from istar.train import (EvalReport, TrainConfig, bicubic_model, evaluate, l1_loss,
                         read_loss_log, train)
from oracles import psnr_scalar, ssim_scalar, y_channel


def test_l1_loss_values_and_gradient():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 1, (2, 3, 4, 4))
    assert l1_loss(ad.constant(t, np.float64), t).value[0] == 0.0
    assert l1_loss(ad.constant(t + 0.5, np.float64), t).value[0] == pytest.approx(0.5)
    store = ad.ParamStore()
    p = store.add("p", t + rng.choice([-0.3, 0.2], t.shape))
    ad.backward(l1_loss(p, t))
    np.testing.assert_allclose(p.grad, np.sign(p.value - t) / t.size)
    res = ad.grad_check(lambda: l1_loss(p, t), store)
    assert res.skipped == 0 and res.max_rel_error < 1e-8
    with pytest.raises(Exception):
        l1_loss(ad.constant(t, np.float64), t[:, :2])


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 1e-4
    assert cfg.lr_at(199) == 1e-4
    assert cfg.lr_at(200) == 5e-5
    assert cfg.lr_at(400) == 2.5e-5
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(halve_every=0)


def test_psnr_uniform_difference():
    a = np.full((3, 12, 12), 0.25)
    # 10 log10(255^2 / 16^2) evaluated directly
    assert psnr(a, a + 16 / 255, mode="RGB") == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)
    assert psnr(a, a + 16 / 255, mode="RGB") == pytest.approx(24.04840, abs=1e-5)
    # luma gains sum to 219, so a per-channel step of 16/219 moves Y by 16
    assert psnr(a, a + 16 / 219, shave=2) == pytest.approx(10 * math.log10(255 ** 2 / 256), abs=1e-9)
    assert psnr(a, a) == math.inf


def test_y_conversion_matches_scalar_oracle():
    img = np.random.default_rng(1).uniform(0, 1, (3, 5, 6))
    np.testing.assert_allclose(rgb_to_y(img), y_channel(img), atol=1e-12)


def fixed_pairs():
    rng = np.random.default_rng(2024)
    pairs = []
    for k in range(5):
        a = quantize(rng.uniform(0, 1, (3, 20, 20)))
        b = quantize(np.clip(a + rng.normal(0, 0.02 * (k + 1), a.shape), 0, 1))
        pairs.append((a, b))
    return pairs


@pytest.mark.parametrize("k", range(5))
def test_metrics_match_scalar_oracle(k):
    a, b = fixed_pairs()[k]
    assert abs(psnr(a, b, shave=2) - psnr_scalar(a, b, 2)) < 1e-9
    assert abs(ssim(a, b, shave=2) - ssim_scalar(a, b, 2)) < 1e-9


def test_ssim_identical_is_exactly_one():
    a = np.random.default_rng(3).uniform(0, 1, (3, 24, 24))
    assert ssim(a, a) == 1.0
    assert ssim(a, a, shave=2) == 1.0


def test_ssim_inverted_image():
    yy, xx = np.mgrid[0:24, 0:24]
    a = np.repeat((((yy // 4) + (xx // 4)) % 2).astype(float)[None], 3, axis=0)
    val = ssim(a, 1 - a)
    assert val < 0
    assert val == pytest.approx(ssim_scalar(a, 1 - a, 0), abs=1e-9)


def test_ssim_constant_shift_closed_form():
    c, d = 0.3, 0.1
    a, b = np.full((3, 16, 16), c), np.full((3, 16, 16), c + d)
    ya, yb = 219 * c + 16, 219 * (c + d) + 16
    c1 = (0.01 * 255) ** 2
    expected = (2 * ya * yb + c1) / (ya ** 2 + yb ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)


def test_metric_argument_errors():
    a = np.zeros((3, 16, 16))
    with pytest.raises(ValueError):
        psnr(a, np.zeros((3, 16, 15)))
    with pytest.raises(ValueError):
        psnr(a, a, shave=8)
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 14, 14), elements=st.floats(0, 1)),
       arrays(np.float64, (3, 14, 14), elements=st.floats(0, 1)))
def test_metrics_are_symmetric(a, b):
    assert psnr(a, b, 1) == psnr(b, a, 1)
    assert ssim(a, b, 1) == pytest.approx(ssim(b, a, 1), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_psnr_falls_with_noise_amplitude():
    rng = np.random.default_rng(4)
    a = rng.uniform(0.2, 0.8, (3, 32, 32))
    noise = rng.uniform(-1, 1, a.shape)
    vals = [psnr(a, a + amp * noise, 2) for amp in (0.001, 0.01, 0.03, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def tiny_setup(seed=0):
    pairs = [make_pair(im, 2, f"t{i}") for i, im in enumerate(make_corpus(4, 32, seed=seed))]
    model = IstarModel(ModelConfig(channels=4, iterations=1), seed=seed)
    cfg = TrainConfig(lr0=1e-3, halve_every=3, epochs=6, steps_per_epoch=1, batch=2, patch=8,
                      seed=seed, checkpoint_every=3)
    return pairs, model, cfg


def test_training_is_deterministic(tmp_path):
    logs = []
    for run in ("a", "b"):
        pairs, model, cfg = tiny_setup()
        train(model, pairs, cfg, out_dir=tmp_path / run)
        logs.append((tmp_path / run / "loss.csv").read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "a" / "last.istar").read_bytes() == (tmp_path / "b" / "last.istar").read_bytes()
    recs = read_loss_log(tmp_path / "a" / "loss.csv")
    assert [r.step for r in recs] == list(range(6))
    assert [r.lr for r in recs] == [1e-3] * 3 + [5e-4] * 3


def test_resume_continues_bit_identically(tmp_path):
    pairs, model, cfg = tiny_setup()
    train(model, pairs, cfg, out_dir=tmp_path / "full")
    part = tmp_path / "part"
    pairs, model, cfg = tiny_setup()
    train(model, pairs, cfg, out_dir=part, stop_step=3)
    resumed, meta = IstarModel.load(part / "ckpt_000003.istar")
    assert int(meta["state.step"]) == 3 and resumed.params.step == 3
    train(resumed, pairs, cfg, out_dir=part, start_step=3)
    assert (part / "loss.csv").read_bytes() == (tmp_path / "full" / "loss.csv").read_bytes()
    assert (part / "last.istar").read_bytes() == (tmp_path / "full" / "last.istar").read_bytes()


def test_train_rejects_empty_dataset():
    _, model, cfg = tiny_setup()
    with pytest.raises(ValueError):
        train(model, [], cfg)


def test_toy_run_reduces_loss():
    pairs = [make_pair(im, 2, f"t{i}") for i, im in enumerate(make_corpus(20, 96, seed=0))]
    model = IstarModel(ModelConfig(channels=16, iterations=2), seed=0)
    cfg = TrainConfig(lr0=1e-3, epochs=200, steps_per_epoch=1, batch=8, patch=32, seed=0)
    recs = train(model, pairs, cfg)
    assert recs[-1].loss < recs[0].loss


def test_evaluate_reports_in_order_and_is_thread_safe():
    pairs = [make_pair(im, 2, f"e{i}") for i, im in enumerate(make_corpus(5, 40, seed=3))]
    hr = {id(p.lr): p.hr for p in pairs}
    perfect = evaluate(lambda lr: hr[id(lr)], pairs, 2)
    assert perfect.mean_ssim == 1.0 and all(math.isinf(v) for v in perfect.psnr)
    base = evaluate(bicubic_model(2), pairs, 2, workers=1)
    threaded = evaluate(bicubic_model(2), pairs, 2, workers=3)
    assert base.names == threaded.names == [p.source for p in pairs]
    assert base.psnr == threaded.psnr and base.ssim == threaded.ssim
    assert all(np.isfinite(base.psnr)) and base.shave == 2 and base.mode == "Y"
    fresh = evaluate(IstarModel(ModelConfig(channels=4, iterations=1)), pairs, 2)
    assert all(np.isfinite(fresh.psnr))


def test_quantized_eval_matches_png_roundtrip(tmp_path):
    pairs = [make_pair(im, 2, f"q{i}") for i, im in enumerate(make_corpus(2, 40, seed=6))]
    up = bicubic_model(2)
    for p in pairs:
        path = tmp_path / f"{p.source}.png"
        save_png(up(p.lr), path)
        assert psnr(load_png(path), p.hr, 2) == psnr(quantize(up(p.lr)), p.hr, 2)
    rep = evaluate(up, pairs, 2)
    assert rep.psnr[0] == psnr(load_png(tmp_path / "q0.png"), pairs[0].hr, 2)


def test_report_csv(tmp_path):
    rep = EvalReport(scale=2, shave=2, names=["a", "b"], psnr=[30.0, 32.0], ssim=[0.9, 0.8])
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["image,psnr_db,ssim", "a,30.000000,0.900000", "b,32.000000,0.800000"]
    assert rep.mean_psnr == 31.0 and "mean" in rep.table()
