import dataclasses

import numpy as np
import pytest

from hifinet import network as N
from hifinet import tensor as tc
from hifinet.synth import make_sample
from hifinet.taxonomy import builtin
from hifinet.tensor import NumericError, ShapeError

TREE = builtin("mini")


def closed_form_count(cfg: N.ModelConfig, sizes) -> int:
    br = cfg.branch
    s, ca, d, cp = br.stem_width, br.attn_channels, br.embed_dim, br.pconv_channels
    conv = lambda cin, cout, k: cout * cin * k * k + cout  # noqa: E731
    n = conv(3, s, 3) * 2 + conv(s, s, 3) * 2
    cin = 2 * s
    for b in (4, 3, 2, 1):
        w = br.widths[b - 1]
        n += conv(cin, w, 3) + conv(w, w, 3)
        cin = w
    if br.fuse:
        n += sum(conv(br.widths[b - 2], br.widths[b - 1], 1) for b in (2, 3, 4))
    n += 3 * conv(br.widths[3], ca, 1) + conv(ca, d, 1)
    extra = 0
    if cfg.pconv_on:
        n += conv(3, cp, 3) + conv(cp, cp, 3)
        extra = cp
    for b, k in enumerate(sizes, start=1):
        n += k * (br.widths[b - 1] + (extra if b == 4 else 0)) + k
    return n


def dataset(n_real=4, n_forged=4, size=32, seed=0):
    forged = ["splice", "inpaint", "synth_texture_a", "retouch_blur", "copy_move", "synth_texture_b"]
    leaves = ["real"] * n_real + [forged[i % len(forged)] for i in range(n_forged)]
    samples = [make_sample(leaf, seed * 1000 + i, size, size) for i, leaf in enumerate(leaves)]
    return N.SplitData(np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
                       np.array([TREE.leaf_index(s.leaf) for s in samples]))


@pytest.fixture(scope="module")
def tiny_data():
    # the generator's minimum is 16x16; subsample to the tiny preset's 8x8
    d = dataset(4, 4, 16)
    return N.SplitData(d.images[:, :, ::2, ::2].copy(), d.masks[:, :, ::2, ::2].copy(), d.leaves)


def tiny_model(seed=0, **kw):
    m = N.init_model(N.preset("tiny", **kw), TREE, seed)
    return m


# --------------------------------------------------------------------------
# initialisation and forward


@pytest.mark.parametrize("name", ["desk", "tiny", "full"])
def test_param_count_matches_closed_form(name):
    cfg = N.preset(name)
    assert N.init_model(cfg, TREE, 0).params.num_params() == closed_form_count(cfg, TREE.sizes)
    ablated = N.preset(name, pconv_on=False)
    assert N.init_model(ablated, TREE, 0).params.num_params() == closed_form_count(ablated, TREE.sizes)
    flat = N.ModelConfig(branch=dataclasses.replace(N.PRESETS[name], fuse=False))
    assert N.init_model(flat, TREE, 0).params.num_params() == closed_form_count(flat, TREE.sizes)


def test_init_deterministic():
    a, b, c = N.init_model(N.preset("desk"), TREE, 5), N.init_model(N.preset("desk"), TREE, 5), \
        N.init_model(N.preset("desk"), TREE, 6)
    assert tc.tensors_equal(a.params.values(), b.params.values())
    assert not tc.tensors_equal(a.params.values(), c.params.values())


def test_heads_match_taxonomy():
    m = N.init_model(N.preset("desk"), TREE, 0)
    for b, k in enumerate(TREE.sizes, start=1):
        assert m.params[f"head{b}.w"].shape[0] == k


def test_preset_errors():
    with pytest.raises(ValueError):
        N.preset("huge")
    with pytest.raises(ValueError):
        N.init_model(N.ModelConfig(branch=dataclasses.replace(N.PRESETS["desk"], image_size=30)), TREE, 0)


def test_forward_requires_calibration(tiny_data):
    m = tiny_model()
    with pytest.raises(RuntimeError, match="calibrat"):
        N.forward(m, tiny_data.images)


def test_forward_contract(tiny_data):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    out = N.forward(m, tiny_data.images)
    for p in out.probs:
        assert np.abs(p.data.sum(axis=1) - 1).max() <= 1e-9
    assert out.mask_scores.min() >= 0 and out.mask_scores.max() <= 1
    assert np.array_equal(out.binary_mask, (out.mask_scores >= 0.5).astype(float))
    with pytest.raises(ShapeError):
        N.forward(m, np.zeros((1, 3, 16, 16)))


def test_zero_heads_give_uniform(tiny_data):
    m = tiny_model()
    for b in range(1, 5):
        m.params[f"head{b}.w"].data[...] = 0.0
    N.calibrate(m, tiny_data.images[:4])
    pred = N.predict(m, tiny_data.images[0])
    for p, k in zip(pred.level_probs, TREE.sizes):
        np.testing.assert_allclose(p, np.full(k, 1.0 / k), atol=1e-15)
    # uniform level-4 is a tie: the lowest index (real) wins
    assert pred.leaf == 0 and not pred.is_forged


def test_predict_deterministic_and_batch_consistent(tiny_data):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    a, b = N.predict(m, tiny_data.images[5]), N.predict(m, tiny_data.images[5])
    assert all(np.array_equal(x, y) for x, y in zip(a.level_probs, b.level_probs))
    batch = N.predict_batch(m, tiny_data.images)
    np.testing.assert_allclose(batch[5].level_probs[3], a.level_probs[3], atol=1e-14)


def test_prediction_rules():
    m = tiny_model()
    m.calib = N.L.LocalizationCalibration(np.zeros(3), 1.0, 0.4)
    probs = [np.full(k, 1.0 / k) for k in TREE.sizes]
    splice = TREE.leaf_index("splice")
    l4 = np.full(7, 0.05); l4[splice] = 0.7
    out = N.ForwardOut([], [tc.Tensor(p[None]) for p in probs[:3]] + [tc.Tensor(l4[None])], None,
                       np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))
    pred = N.to_prediction(m, out)
    assert pred.is_forged and pred.leaf == splice and pred.path == list(TREE.path_of(splice).per_level)
    assert pred.detection_score == pytest.approx(0.95)
    l4 = np.full(7, 0.05); l4[0] = 0.7
    out.probs[3] = tc.Tensor(l4[None])
    pred = N.to_prediction(m, out)
    assert not pred.is_forged and pred.binary_mask.shape == (1, 8, 8)


def test_calibration_sets_margin(tiny_data):
    m = tiny_model()
    cal = N.calibrate(m, tiny_data.images[:4])
    emb = N.embed_pixels(m, tiny_data.images[:4])
    d = N.L.pixel_distances(emb, emb.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(cal.center, emb.mean(axis=(0, 2, 3)), atol=1e-14)
    assert cal.d_max == pytest.approx(d.max(), rel=1e-12) and cal.tau == 2.5 * cal.d_max
    with pytest.raises(ValueError):
        N.calibrate(m, tiny_data.images[:0])


# --------------------------------------------------------------------------
# optimisation


def test_zero_learning_rates_leave_params(tiny_data):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    before = [p.data.copy() for p in m.params.values()]
    for kind in ("sgd", "adam"):
        opt = N.Optimizer(m.params, kind, 0.0, 0.0)
        N.train_step(m, tiny_data.images, tiny_data.masks, tiny_data.leaves, opt)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, m.params.values()))


def test_train_step_deterministic(tiny_data):
    parts = []
    for _ in range(2):
        m = tiny_model()
        N.calibrate(m, tiny_data.images[:4])
        opt = N.Optimizer(m.params, m.config.optimizer, m.config.lr_base, m.config.lr_loc)
        parts.append(N.train_step(m, tiny_data.images, tiny_data.masks, tiny_data.leaves, opt))
        parts.append(N.checkpoint_bytes(m))
    assert parts[0] == parts[2] and parts[1] == parts[3]


def test_two_rate_groups():
    m = tiny_model()
    opt = N.Optimizer(m.params, "sgd", 1e-4, 3e-4)
    assert opt.group("attn.g.w") == "loc" and opt.group("branch4.0.w") == "base" and opt.group("head4.w") == "base"
    for p in m.params.values():
        p.grad = np.ones_like(p.data)
    before = {k: p.data.copy() for k, p in m.params.items()}
    opt.step()
    assert np.allclose(before["attn.g.w"] - m.params["attn.g.w"].data, 3e-4)
    assert np.allclose(before["head1.w"] - m.params["head1.w"].data, 1e-4)


def test_optimizer_rejects_unknown_kind():
    with pytest.raises(ValueError):
        N.Optimizer(tiny_model().params, "lbfgs")


def test_plateau_scheduler_patience_one_halves_every_epoch():
    m = tiny_model()
    opt = N.Optimizer(m.params, "sgd", 1.0, 3.0)
    sched = N.PlateauScheduler(opt, 0.5, 1)
    rates = []
    for epoch, loss in enumerate([1.0, 2.0, 3.0, 4.0, 5.0]):
        sched.step(loss)
        rates.append(opt.lr["base"])
    assert rates == [1.0, 0.5, 0.25, 0.125, 0.0625]
    assert opt.lr["loc"] == 3.0 * 0.0625


def test_plateau_scheduler_patience_two():
    opt = N.Optimizer(tiny_model().params, "sgd", 1.0, 1.0)
    sched = N.PlateauScheduler(opt, 0.5, 2)
    assert [sched.step(v) for v in [3.0, 2.0, 2.5, 2.5, 1.0, 1.5]] == [False, False, False, True, False, False]


def test_epoch_batches_composition():
    data = dataset(5, 3, 16)
    batches = N.epoch_batches(data, TREE.real_index, 2, 2, np.random.default_rng(0))
    assert len(batches) == 3
    seen = np.concatenate(batches)
    assert set(seen) == set(range(8))
    for b in batches:
        assert (data.leaves[b] == TREE.real_index).sum() == 2


def test_non_finite_loss_reports_sample(tiny_data, monkeypatch):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    orig = N.L.localization_loss

    def poisoned(*args, **kw):
        out = orig(*args, **kw)
        out.data[3] = np.inf
        return out
    monkeypatch.setattr(N.L, "localization_loss", poisoned)
    opt = N.Optimizer(m.params, "sgd", 1e-4, 3e-4)
    before = N.checkpoint_bytes(m)
    with pytest.raises(NumericError, match="sample 3"):
        N.train_step(m, tiny_data.images, tiny_data.masks, tiny_data.leaves, opt)
    assert N.checkpoint_bytes(m) == before


def test_loss_decreases_over_50_steps():
    data = dataset(32, 32, 32, seed=3)
    cfg = N.preset("desk")
    m = N.init_model(cfg, TREE, 0)
    N.calibrate(m, data.images[data.leaves == TREE.real_index])
    opt = N.Optimizer(m.params, cfg.optimizer, cfg.lr_base, cfg.lr_loc, cfg.momentum)
    rng = np.random.default_rng(0)
    totals = []
    while len(totals) < 50:
        for b in N.epoch_batches(data, TREE.real_index, 8, 8, rng):
            totals.append(N.train_step(m, data.images[b], data.masks[b], data.leaves[b], opt)["total"])
    ma = np.convolve(totals[:50], np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]


# --------------------------------------------------------------------------
# train loop and checkpoints


def test_train_loop_zero_epochs(tiny_data):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    before = N.checkpoint_bytes(m)
    hist = N.train_loop(m, tiny_data, tiny_data, 0)
    assert hist.epochs == [] and hist.steps == [] and N.checkpoint_bytes(m) == before


def test_train_loop_writes_checkpoints(tiny_data, tmp_path):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    hist = N.train_loop(m, tiny_data, tiny_data, 2, seed=1, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint_epoch01.hfck", "checkpoint_epoch02.hfck"]
    assert [r["split"] for r in hist.epochs] == ["train", "val", "train", "val"]
    assert len(hist.steps) == 2 * len(N.epoch_batches(tiny_data, 0, 8, 8, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        N.train_loop(m, tiny_data.subset([]), None, 1)


def test_checkpoint_roundtrip(tiny_data, tmp_path):
    m = tiny_model(hierarchy_on=False)
    N.calibrate(m, tiny_data.images[:4])
    N.save_checkpoint(m, tmp_path / "a.hfck")
    raw = (tmp_path / "a.hfck").read_bytes()
    assert raw[:4] == b"HFCK"
    back = N.load_checkpoint(tmp_path / "a.hfck")
    assert N.checkpoint_bytes(back) == raw
    assert back.config == m.config and back.tree == TREE
    hdr = N.read_checkpoint_header(tmp_path / "a.hfck")
    assert hdr["flags"]["hierarchy_on"] is False and hdr["taxonomy_digest"] == TREE.digest()
    a, b = N.predict(m, tiny_data.images[6]), N.predict(back, tiny_data.images[6])
    assert np.array_equal(a.level_probs[3], b.level_probs[3])


def test_checkpoint_corruption(tiny_data, tmp_path):
    m = tiny_model()
    N.calibrate(m, tiny_data.images[:4])
    raw = bytearray(N.checkpoint_bytes(m))
    (tmp_path / "bad.hfck").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ValueError, match="magic"):
        N.load_checkpoint(tmp_path / "bad.hfck")
    raw[5] ^= 0xFF  # config digest
    (tmp_path / "bad2.hfck").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="digest"):
        N.load_checkpoint(tmp_path / "bad2.hfck")


def test_config_dict_roundtrip():
    cfg = N.preset("desk", hierarchy_on=False, levels_on=(True, False, True, True), lr_base=0.5)
    assert N.ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() != N.preset("desk").digest()
