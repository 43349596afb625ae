import math
from dataclasses import replace

import numpy as np
import pytest

from trimodal.autodiff import Graph, Tensor
from trimodal.data import DataConfig, make_batches, synthesize
from trimodal.encoders import EncoderConfig, ModelParams, init_params
from trimodal.gradcheck import MICRO_DATA, MICRO_TRAIN, check_full
from trimodal.metrics import evaluate
from trimodal.trainer import (
    AdamState,
    ConfigError,
    IncompatibleError,
    Model,
    NumericError,
    TrainConfig,
    adamw_step,
    batch_loss,
    check_dataset_compat,
    cosine_lr,
    forward_batch,
    load_checkpoint,
    median_table,
    parse_grid,
    ablate,
    save_checkpoint,
    train,
    trainable_names,
)

TINY_DATA = DataConfig(train_shapes=32, test_shapes=8, n_points=32, views=3, d_v=8, vocab=64)
TINY = TrainConfig(epochs=2, batch=8, N=4, D=8, hidden=8, eval_every=1)


@pytest.fixture(scope="module")
def tiny():
    return synthesize(TINY_DATA, 0)


def scalar_params(w0):
    t = {"w": Tensor([[w0]], requires_grad=True), "tau": Tensor([[0.07]], requires_grad=True)}
    return ModelParams(t, EncoderConfig())


def simulate_adamw(p, g, steps, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Plain-float AdamW trajectory for a constant gradient."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1**t), v / (1 - b2**t)
        p = p - lr * (mhat / (math.sqrt(vhat) + eps) + wd * p)
        out.append(p)
    return out


# ---------------------------------------------------------------- optimizer


def test_adamw_matches_scalar_simulator():
    cfg = TrainConfig(precision=64)
    params = scalar_params(0.8)
    state = AdamState()
    expect = simulate_adamw(0.8, 0.3, 25, 1e-2)
    for t in range(25):
        params["w"].grad = np.array([[0.3]])
        params["tau"].grad = np.zeros((1, 1))
        adamw_step(params, ["w", "tau"], state, 1e-2, cfg)
        assert params["w"].item() == pytest.approx(expect[t], rel=1e-13)
    assert state.step == 25


def test_zero_grad_no_decay_leaves_params():
    cfg = TrainConfig(weight_decay=0.0, precision=64)
    params = scalar_params(0.5)
    for _ in range(3):
        params["w"].grad = np.zeros((1, 1))
        params["tau"].grad = np.zeros((1, 1))
        adamw_step(params, ["w", "tau"], AdamState(), 1e-2, cfg)
    assert params["w"].item() == 0.5


def test_decay_only_is_multiplicative_shrink():
    cfg = TrainConfig(weight_decay=0.1, precision=64)
    params = scalar_params(2.0)
    state = AdamState()
    expect = 2.0
    for _ in range(5):
        params["w"].grad = np.zeros((1, 1))
        params["tau"].grad = np.zeros((1, 1))
        adamw_step(params, ["w", "tau"], state, 1e-2, cfg)
        expect *= 1 - 1e-2 * 0.1
        assert params["w"].item() == pytest.approx(expect, rel=1e-14)
    assert params.tau.item() == 0.07  # never decayed


def test_missing_gradient_is_named():
    params = scalar_params(1.0)
    params["tau"].grad = np.zeros((1, 1))
    with pytest.raises(ValueError, match="'w'"):
        adamw_step(params, ["w", "tau"], AdamState(), 1e-3, TrainConfig())


def test_tau_clamped_after_step():
    params = scalar_params(1.0)
    params.tau.data[:] = 2e-3
    params["w"].grad = np.zeros((1, 1))
    params["tau"].grad = np.array([[1.0]])
    adamw_step(params, ["w", "tau"], AdamState(), 0.5, TrainConfig(precision=64))
    assert params.tau.item() == 1e-3


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == 0.0
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    vals = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# ----------------------------------------------------------------- config


def test_single_modality_with_recon_is_rejected_at_startup():
    with pytest.raises(ConfigError):
        TrainConfig(modalities="image", recon="both")
    with pytest.raises(ConfigError):
        TrainConfig(modalities="point", recon="bi")
    TrainConfig(modalities="image", recon="off")


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"fusion": "sum"}, {"loss": "triplet"}, {"precision": 16}, {"batch": 1}])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_roundtrip():
    cfg = TrainConfig(recon="bi", fusion="mlp", seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- forward


def micro_batch(cfg=MICRO_TRAIN):
    data = synthesize(MICRO_DATA, 0)
    batch = make_batches(data["train"], 4, 0)[0]
    params = init_params(cfg.encoder_config(MICRO_DATA), 0, dtype=cfg.dtype, recon=cfg.recon_layout)
    return batch, params


def test_full_objective_gradcheck_micro_batch():
    report = check_full()
    assert report.passed, report.lines()
    for name in ("fusion.w0", "fusion.pool.W1", "rec.p2i.W1", "rec.i2p.W1", "tau", "txt.embed", "pts.mlp.W1", "img.adapter.W2"):
        assert name in report.max_rel_err


def test_two_shape_batch_gradcheck():
    from trimodal.autodiff import grad_check

    data = synthesize(MICRO_DATA, 1)
    batch = make_batches(data["train"], 2, 0)[0]
    params = init_params(MICRO_TRAIN.encoder_config(MICRO_DATA), 1, dtype=np.float64)
    report = grad_check(lambda: batch_loss(batch, params, MICRO_TRAIN), dict(params.subset(["fusion.", "rec.", "tau"])), tol=1e-3)
    assert report.passed, report.lines()


def test_recon_off_gives_exact_zero():
    cfg = replace(MICRO_TRAIN, recon="off")
    batch, params = micro_batch(cfg)
    out = forward_batch(batch, params, cfg)
    assert out.loss_i2p == 0.0 and out.loss_p2i == 0.0
    params.zero_grad()
    with Graph() as g:
        loss = batch_loss(batch, params, cfg)
    g.backward(loss)
    for name in params:
        if name.startswith("rec."):
            assert not params[name].grad.any()
    assert not any(n.startswith("rec.") for n in trainable_names(params, cfg))


def test_forward_is_deterministic():
    batch, params = micro_batch()
    a = forward_batch(batch, params, MICRO_TRAIN)
    b = forward_batch(batch, params, MICRO_TRAIN)
    assert a.shapes.data.tobytes() == b.shapes.data.tobytes()
    assert a.texts.data.tobytes() == b.texts.data.tobytes()


@pytest.mark.parametrize("arm", [
    {"modalities": "image", "recon": "off"},
    {"modalities": "point", "recon": "off"},
    {"fusion": "mlp"},
    {"recon": "bi"},
    {"recon": "i2p"},
    {"loss": "info_nce"},
    {"hn_mirror": "literal"},
])
def test_ablation_arms_run_and_differentiate(arm):
    cfg = replace(MICRO_TRAIN, **arm)
    batch, params = micro_batch(cfg)
    out = forward_batch(batch, params, cfg)
    assert out.shapes.shape == (4, cfg.D)
    report = check_full(train_cfg=cfg)
    assert report.passed, report.lines()


# ---------------------------------------------------------------- training


def test_smoke_training(tiny, tmp_path):
    res = train(TINY, tiny["train"], tiny["test"], out_dir=tmp_path)
    assert len(res.log) == 2 and all(math.isfinite(e["loss"]) for e in res.log)
    assert (tmp_path / "final.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
    assert res.final_metrics is not None


def test_training_preserves_parameter_set_and_freezes_unused(tiny):
    cfg = replace(TINY, recon="off")
    init = init_params(cfg.encoder_config(TINY_DATA), cfg.seed, dtype=cfg.dtype, recon=cfg.recon_layout)
    res = train(cfg, tiny["train"])
    assert res.params.names() == init.names() and res.params.count() == init.count()
    for name in init:
        if name.startswith(("rec.", "baseline.", "head.")):
            assert res.params[name].data.tobytes() == init[name].data.tobytes()


def test_training_is_reproducible(tiny, tmp_path):
    train(TINY, tiny["train"], tiny["test"], out_dir=tmp_path / "a")
    train(TINY, tiny["train"], tiny["test"], out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_nan_input_aborts_with_step(tiny):
    bad = synthesize(TINY_DATA, 0)["train"]
    bad.record(3).views[0, 0] = np.nan
    with pytest.raises(NumericError, match="step"):
        train(TINY, bad)


def test_loss_decreases_by_epoch_20():
    data = synthesize(DataConfig(), 0)
    for seed in range(3):
        res = train(TrainConfig(epochs=20, seed=seed), data["train"])
        assert res.log[19]["loss"] < res.log[0]["loss"], seed


def test_dataset_smaller_than_batch(tiny):
    with pytest.raises(ConfigError):
        train(replace(TINY, batch=64), tiny["train"])


# -------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("precision", [32, 64])
def test_checkpoint_roundtrip_bit_exact(tiny, tmp_path, precision):
    cfg = replace(TINY, precision=precision)
    res = train(cfg, tiny["train"], tiny["test"])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.params, res.state, cfg)
    assert path.read_bytes()[:5] == b"TMRC1"
    params, state, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg and state.step == res.state.step
    for name in res.params:
        assert params[name].data.tobytes() == res.params[name].data.tobytes()
        if name in res.state.m:
            assert state.m[name].tobytes() == res.state.m[name].tobytes()
    a = evaluate(Model(res.params, cfg), tiny["test"])
    b = evaluate(Model(params, cfg2), tiny["test"])
    assert a == b


def test_corrupted_checkpoint(tmp_path, tiny):
    res = train(replace(TINY, epochs=1), tiny["train"])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.params, res.state, res.cfg)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")


def test_incompatible_dataset(tiny):
    params = init_params(TINY.encoder_config(TINY_DATA), 0)
    other = synthesize(replace(TINY_DATA, views=4, train_shapes=8, test_shapes=8), 0)["test"]
    with pytest.raises(IncompatibleError, match="M"):
        check_dataset_compat(params, other)
    check_dataset_compat(params, tiny["test"])


# ------------------------------------------------------------------ ablation


def test_parse_grid_forms():
    assert [a["name"] for a in parse_grid({"arms": [{"name": "x", "recon": "off"}]})] == ["x"]
    assert len(parse_grid([{"recon": "off"}, {"recon": "both"}])) == 2
    axes = parse_grid({"axes": {"recon": ["off", "both"], "fusion": ["cqa", "mlp"]}})
    assert len(axes) == 4 and axes[0]["name"] == "recon=off,fusion=cqa"
    with pytest.raises(ConfigError):
        parse_grid([{"bogus": 1}])


def test_median_table():
    t = lambda v: {d: {m: v for m in ("RR@1", "RR@5", "NDCG@5")} for d in ("S2T", "T2S")}
    assert median_table([t(1.0), t(5.0), t(3.0)])["T2S"]["RR@1"] == 3.0


def test_single_arm_ablation(tiny):
    seen = []
    out = ablate([{"name": "only"}], base=TINY, data_cfg=TINY_DATA, seeds=(0, 1), splits=tiny,
                 on_run=lambda name, s, m: seen.append((name, s)))
    assert len(out) == 1 and out[0].name == "only" and len(out[0].per_seed) == 2
    assert seen == [("only", 0), ("only", 1)]


def test_ablation_data_axis_regenerates(tiny):
    out = ablate([{"views": 1}, {"views": 3}], base=replace(TINY, epochs=1), data_cfg=TINY_DATA, seeds=(0,))
    assert [a.name for a in out] == ["views=1", "views=3"]
