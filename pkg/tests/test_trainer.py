import numpy as np
import pytest
import torch

from conftest import tiny_losses
from sitegen.errors import SitegenError, TrainingError
from sitegen.trainer import Checkpoint, TrainConfig, evaluate, flag_grid, prepare_slices, run_ablation, train

CROP = (32, 32)


def grads(model, loss):
    model.zero_grad(set_to_none=True)
    loss.backward()
    out = {}
    for group, params in model.parameter_groups().items():
        out[group] = [torch.zeros_like(p) if p.grad is None else p.grad.clone() for p in params]
    return out


def test_update_rule_attribution(tiny_model, tiny_batch):
    dice, _ = tiny_losses(tiny_model, tiny_batch)
    g_dice = grads(tiny_model, dice)
    _, site = tiny_losses(tiny_model, tiny_batch)
    g_site_reversed = grads(tiny_model, site)
    _, site_plain = tiny_losses(tiny_model, tiny_batch, reverse=False)
    g_site = grads(tiny_model, site_plain)
    dice, site = tiny_losses(tiny_model, tiny_batch)
    g_total = grads(tiny_model, dice + site)

    # the decoder never sees the site loss, the classifier never sees Dice
    assert all(torch.count_nonzero(g) == 0 for g in g_site_reversed["decoder"])
    assert all(torch.count_nonzero(g) == 0 for g in g_dice["site"])
    for group in ("main", "encoder"):
        for gt, gd, gs in zip(g_total[group], g_dice[group], g_site[group]):
            assert torch.allclose(gt, gd - gs, atol=1e-6, rtol=0)
        # some site signal actually reaches these groups
        assert any(torch.count_nonzero(g) for g in g_site[group])
    for gt, gd in zip(g_total["decoder"], g_dice["decoder"]):
        assert torch.allclose(gt, gd, atol=1e-12, rtol=0)
    for gt, gs in zip(g_total["site"], g_site["site"]):
        assert torch.allclose(gt, gs, atol=1e-12, rtol=0)


def test_site_gradient_through_grl_is_negated_finite_difference(tiny_model, tiny_batch):
    tiny_model.eval()  # fixed batch-norm statistics keep the loss a smooth function
    _, site = tiny_losses(tiny_model, tiny_batch)
    analytic = grads(tiny_model, site)
    param = tiny_model.unet.encoder.blocks[-1][0].weight  # nearest the classifier: largest site gradient
    enc_index = [i for i, p in enumerate(tiny_model.parameter_groups()["encoder"]) if p is param][0]

    def loss():
        with torch.no_grad():
            return tiny_losses(tiny_model, tiny_batch)[1]

    grad = analytic["encoder"][enc_index]
    for flat in torch.topk(grad.abs().flatten(), 5).indices.tolist():
        idx = np.unravel_index(flat, param.shape)
        old = param.data[idx].item()
        eps = 1e-5
        param.data[idx] = old + eps
        up = loss().item()
        param.data[idx] = old - eps
        down = loss().item()
        param.data[idx] = old
        numeric = (up - down) / (2 * eps)
        assert numeric != 0
        assert abs(-grad[idx].item() - numeric) <= 1e-3 * abs(numeric)


def test_sgd_step_is_minus_lr_times_gradient():
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=0.001)
    (3.5 * p).sum().backward()
    opt.step()
    assert p.item() == pytest.approx(2.0 - 0.001 * 3.5, abs=1e-15)


def test_classifier_update_ignores_dice(tiny_model, tiny_batch):
    """One SGD step moves the classifier identically with or without the Dice term."""
    state = {k: v.clone() for k, v in tiny_model.state_dict().items()}

    def step(with_dice):
        tiny_model.load_state_dict(state)
        opt = torch.optim.SGD(tiny_model.parameters(), lr=0.01)
        dice, site = tiny_losses(tiny_model, tiny_batch)
        opt.zero_grad()
        (dice + site if with_dice else dice.detach() + site).backward()
        opt.step()
        return [p.detach().clone() for p in tiny_model.parameter_groups()["site"]]

    for a, b in zip(step(True), step(False)):
        assert torch.equal(a, b)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size) == (0.001, 50, 16)
    for e in range(50):
        assert cfg.lr_at(e) == pytest.approx(0.001 * 0.96**e, rel=1e-12)
    l2 = TrainConfig(decay_mode="l2")
    assert l2.lr_at(10) == 0.001 and l2.l2_coefficient == 0.04


def test_config_round_trip_and_validation():
    cfg = TrainConfig(seed=3, use_main=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(width_multiplier=1.5)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def quick_config(**kw):
    base = dict(learning_rate=0.5, epochs=2, batch_size=8, width_multiplier=0.0625, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_excludes_held_out_site(three_site_volumes):
    checkpoint, curves = train(three_site_volumes, 1, quick_config(), CROP)
    held = {v.subject_id for v in three_site_volumes if v.site_id == 1}
    assert held.isdisjoint(checkpoint.train_subjects)
    assert sorted(checkpoint.site_index) == [0, 2]
    assert len(curves.epochs) == 2
    assert all(np.isfinite(e.total_loss) and 0 <= e.site_accuracy <= 1 for e in curves.epochs)
    assert curves.epochs[1].lr == pytest.approx(0.5 * 0.96)


def test_train_is_reproducible(three_site_volumes):
    a = train(three_site_volumes, 0, quick_config(), CROP)[1]
    b = train(three_site_volumes, 0, quick_config(), CROP)[1]
    np.testing.assert_allclose(a.column("total_loss"), b.column("total_loss"), rtol=0, atol=1e-6)


def test_train_needs_two_sites_for_adversary(three_site_volumes):
    one_site = [v for v in three_site_volumes if v.site_id == 0]
    with pytest.raises(TrainingError) as err:
        train(one_site, None, quick_config(), CROP)
    assert err.value.code == "need-multiple-sites"
    train(one_site, None, quick_config(use_site_adversary=False, epochs=1), CROP)


def test_train_empty_set(three_site_volumes):
    with pytest.raises(TrainingError) as err:
        train([v for v in three_site_volumes if v.site_id == 0], 0, quick_config(), CROP)
    assert err.value.code == "empty-training-set"


def test_checkpoint_round_trip(tmp_path, three_site_volumes):
    checkpoint, _ = train(three_site_volumes, 2, quick_config(epochs=1), CROP)
    path = checkpoint.save(tmp_path / "model.ckpt")
    loaded = Checkpoint.load(path)
    assert loaded.site_index == checkpoint.site_index
    assert loaded.config == checkpoint.config
    assert torch.equal(loaded.rng_state["torch"], checkpoint.rng_state["torch"])
    slices = prepare_slices(three_site_volumes[-1:], CROP)
    x = torch.from_numpy(slices.images)[:, None]
    b = torch.from_numpy(slices.brain)[:, None]
    assert torch.equal(checkpoint.build_model().segment(x, b), loaded.build_model().segment(x, b))
    a = evaluate(checkpoint, three_site_volumes[-2:])
    c = evaluate(loaded, three_site_volumes[-2:])
    assert [m.dice for m in a] == [m.dice for m in c]


def test_checkpoint_index_lists_groups(tmp_path, three_site_volumes):
    import json

    checkpoint, _ = train(three_site_volumes, 2, quick_config(epochs=1), CROP)
    raw = checkpoint.save(tmp_path / "m.ckpt").read_bytes()
    size = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + size])
    groups = {t["group"] for t in header["tensors"]}
    assert groups == {"main", "encoder", "decoder", "site", "rng"}
    total = sum(t["nbytes"] for t in header["tensors"])
    assert len(raw) == 16 + size + total


def test_missing_checkpoint(tmp_path):
    with pytest.raises(SitegenError) as err:
        Checkpoint.load(tmp_path / "nope.ckpt")
    assert err.value.code == "checkpoint-not-found"


def test_all_flags_off_is_plain_unet(three_site_volumes):
    cfg = quick_config(epochs=1).with_flags(False, False, False)
    checkpoint, curves = train(three_site_volumes, 0, cfg, CROP)
    model = checkpoint.build_model()
    assert model.main is None and model.site is None and not model.use_augmentation
    assert all(np.isnan(e.site_accuracy) for e in curves.epochs)


def test_flag_grid():
    assert len(flag_grid()) == 8
    assert len(flag_grid([(1, 0, 0), (1, 0, 0), (0, 0, 0)])) == 2


def test_run_ablation_rows(three_site_volumes):
    rows = run_ablation(three_site_volumes, 0, [(0, 0, 0), (1, 1, 1)], quick_config(epochs=1), crop_shape=CROP)
    assert len(rows) == 2
    assert {(r["DA"], r["SL"], r["MAIN"]) for r in rows} == {(False, False, False), (True, True, True)}
    assert all(0 <= r["dice"] <= 1 for r in rows)


def test_optimizer_choice(three_site_volumes):
    from sitegen.trainer import make_model, make_optimizer

    model = make_model(quick_config(), CROP, 3)
    assert isinstance(make_optimizer(model, quick_config(momentum=0.9)), torch.optim.SGD)
    assert isinstance(make_optimizer(model, quick_config(optimizer="adam")), torch.optim.Adam)
    assert make_optimizer(model, quick_config(decay_mode="l2")).param_groups[0]["weight_decay"] == 0.04


def test_balanced_sampling_runs(three_site_volumes):
    _, curves = train(three_site_volumes, 0, quick_config(epochs=1, balanced_sampling=True), CROP)
    assert np.isfinite(curves.epochs[0].total_loss)
