import numpy as np
import pytest
import torch
from torch import nn

from sitegen.backbone import UNet, count_macc, count_parameters, layer_maccs, predict_mask, scaled_widths
from sitegen.errors import SitegenError
from sitegen.losses import dice_loss
from sitegen.main_normalizer import MainNormalizer, apply_main, normalize_batch, predict_affine
from sitegen.site_adversary import SiteClassifier, classify_site, grl
from sitegen.volumes import SliceSample


def central_difference(fn, tensor, index, eps=1e-4):
    with torch.no_grad():
        old = tensor[index].item()
        tensor[index] = old + eps
        up = fn().item()
        tensor[index] = old - eps
        down = fn().item()
        tensor[index] = old
    return (up - down) / (2 * eps)


# ----------------------------------------------------------------------- MAIN


def test_main_fc_width_for_atlas_crop():
    main = MainNormalizer((224, 192))
    assert main.gamma_head.fc_in_features == 2688 == (224 // 4) * (192 // 4)
    assert main.gamma_head.fc.out_features == 256


def test_main_branches_share_nothing():
    main = MainNormalizer((16, 16))
    gamma_ids = {id(p) for p in main.gamma_head.parameters()}
    assert gamma_ids.isdisjoint(id(p) for p in main.beta_head.parameters())


def test_main_rejects_bad_shape():
    with pytest.raises(SitegenError) as err:
        MainNormalizer((10, 10))
    assert err.value.code == "shape-mismatch"
    main = MainNormalizer((16, 16))
    with pytest.raises(SitegenError):
        main.predict_affine(torch.zeros(1, 1, 16, 20))


def test_main_outputs_two_scalars_and_identity_start():
    torch.manual_seed(0)
    main = MainNormalizer((32, 32)).eval()
    gamma, beta = predict_affine(np.random.default_rng(0).normal(size=(32, 32)), main)
    assert isinstance(gamma, float) and isinstance(beta, float)
    assert abs(gamma - 1) < 0.2 and abs(beta) < 0.2


def test_main_zero_heads_zero_input():
    main = MainNormalizer((16, 16), identity_init=False).eval()
    for head in (main.gamma_head, main.beta_head):
        nn.init.zeros_(head.fc.weight)
        nn.init.zeros_(head.fc.bias)
    assert predict_affine(np.zeros((16, 16)), main) == (0.0, 0.0)


@pytest.mark.parametrize("head", ["gamma_head", "beta_head"])
def test_main_fc_gradient_finite_difference(head):
    torch.manual_seed(1)
    main = MainNormalizer((16, 24)).double().eval()
    x = torch.randn(1, 1, 16, 24, dtype=torch.float64)
    branch = getattr(main, head)
    out = lambda: branch(x)[0]
    out().backward()
    weight = branch.fc.weight
    rng = np.random.default_rng(0)
    for _ in range(10):
        idx = (int(rng.integers(weight.shape[0])), int(rng.integers(weight.shape[1])))
        numeric = central_difference(out, weight.data, idx)
        analytic = weight.grad[idx].item()
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


def test_main_input_gradient_finite_difference():
    torch.manual_seed(2)
    main = MainNormalizer((8, 8)).double().eval()
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    mask = torch.ones_like(x)
    loss = lambda: main(x, mask)[0].pow(2).sum()
    loss().backward()
    grad = x.grad.clone()
    numeric = torch.zeros_like(grad)
    for idx in np.ndindex(*x.shape):
        numeric[idx] = central_difference(loss, x.data, idx, eps=1e-6)
    rel = (grad - numeric).norm() / numeric.norm()
    assert rel < 1e-3


def test_apply_main_arithmetic():
    image = np.array([[0.5, -1.0], [2.0, 3.0]])
    mask = np.array([[1.0, 1.0], [0.0, 1.0]])
    np.testing.assert_array_equal(apply_main(image, mask, 1.0, 0.0), image * mask)
    np.testing.assert_array_equal(apply_main(image, mask, 0.0, 1.0), mask)
    assert apply_main(image, mask, 2.0, -1.0)[0, 0] == 0.0


def test_apply_main_zero_outside_mask():
    rng = np.random.default_rng(3)
    for _ in range(100):
        image = torch.tensor(rng.normal(size=(3, 1, 6, 6)) * 10)
        mask = torch.tensor((rng.random((3, 1, 6, 6)) > 0.5).astype(float))
        gamma = torch.tensor(rng.normal(size=3) * 5)
        beta = torch.tensor(rng.normal(size=3) * 5)
        out = apply_main(image, mask, gamma, beta)
        assert torch.all(out[mask == 0] == 0)


def _samples(n, shape=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        brain = np.zeros(shape, np.float32)
        brain[2:-2, 2:-2] = 1
        image = (rng.normal(size=shape) * brain).astype(np.float32)
        out.append(SliceSample(image, brain, np.zeros(shape, np.float32), 0, slice_index=i))
    return out


def test_normalize_batch_per_image():
    torch.manual_seed(3)
    main = MainNormalizer((16, 16)).eval()
    samples = _samples(5)
    base = normalize_batch(samples, main)
    perm = [3, 0, 4, 1, 2]
    permuted = normalize_batch([samples[i] for i in perm], main)
    for j, i in enumerate(perm):
        np.testing.assert_allclose(permuted[j], base[i], atol=1e-6)
    dup = normalize_batch([samples[0], samples[1], samples[0]], main)
    np.testing.assert_array_equal(dup[0], dup[2])
    for out, s in zip(base, samples):
        assert out.shape == (16, 16) and np.all(out[s.brain_mask == 0] == 0)


# ------------------------------------------------------------------- backbone


def test_unet_desk_scale_shapes():
    net = UNet(0.125)
    assert net.widths == (8, 16, 32, 64, 128)
    with torch.no_grad():
        probs, bottleneck = net(torch.randn(2, 1, 224, 96))
    assert probs.shape == (2, 1, 224, 96)
    assert bottleneck.shape == (2, 128, 14, 6)


def test_unet_probabilities_in_unit_interval():
    torch.manual_seed(0)
    net = UNet(0.0625)
    with torch.no_grad():
        probs, _ = net(torch.randn(3, 1, 32, 16) * 5)
    assert probs.min() >= 0 and probs.max() <= 1


def test_unet_rejects_indivisible_input():
    with pytest.raises(SitegenError) as err:
        UNet(0.0625)(torch.zeros(1, 1, 30, 16))
    assert err.value.code == "shape-mismatch"


def test_unet_skip_pairing():
    trace = {}
    with torch.no_grad():
        UNet(0.0625)(torch.zeros(1, 1, 32, 32), trace=trace)
    # decoder stage i concatenates encoder stage 5 - i: channel count doubles back
    assert trace["up1"][0] == 2 * trace["conv4"][0] and trace["up1"][1:] == trace["conv4"][1:]
    assert trace["up4"][0] == 2 * trace["conv1"][0] and trace["up4"][1:] == trace["conv1"][1:]


def test_every_backbone_parameter_gets_dice_gradient():
    torch.manual_seed(4)
    net = UNet(0.0625)
    x = torch.randn(4, 1, 32, 16)
    target = torch.zeros(4, 1, 32, 16)
    target[:, :, 10:20, 4:10] = 1
    probs, _ = net(x)
    dice_loss(probs, target).backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_predict_mask_threshold():
    assert predict_mask(np.full((3, 3), 0.5)).sum() == 0
    assert predict_mask(np.full((3, 3), 0.51)).sum() == 9
    rng = np.random.default_rng(0)
    probs = rng.random((20, 20))
    previous = predict_mask(probs, 0.0)
    for t in np.linspace(0, 1, 21):
        current = predict_mask(probs, t)
        assert np.all(current <= previous)
        previous = current


def hook_macc(net, shape):
    """Count conv multiply-accumulates by observing real layer outputs."""
    total = 0

    def hook(module, inputs, output):
        nonlocal total
        kh, kw = module.kernel_size
        total += kh * kw * module.in_channels * module.out_channels * output.shape[-2] * output.shape[-1]

    handles = [m.register_forward_hook(hook) for m in net.modules() if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        net(torch.zeros(1, 1, *shape))
    for h in handles:
        h.remove()
    return total


@pytest.mark.parametrize("width", [0.0625, 0.125])
def test_analytic_macc_matches_hooks(width):
    net = UNet(width)
    assert count_macc(net, (64, 32)).macc == hook_macc(net, (64, 32))


def test_macc_halves_on_hemisphere_input():
    half, full = count_macc(0.125, (224, 96)), count_macc(0.125, (224, 192))
    assert half.macc * 2 == full.macc
    assert half.activation_bytes * 2 == full.activation_bytes


def test_macc_quadratic_in_width():
    small, large = count_macc(0.25, (64, 32)).macc, count_macc(0.5, (64, 32)).macc
    assert 3.9 < large / small < 4.01


def test_layer_table_covers_all_convs():
    assert len(layer_maccs(scaled_widths(1.0), (224, 96))) == 10 + 4 * 3 + 1


# -------------------------------------------------------------- site adversary


def test_grl_forward_identity_backward_negation():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        x = torch.randn(3, 4, 5, generator=gen, requires_grad=True)
        y = grl(x)
        assert torch.equal(y, x)
        upstream = torch.randn(3, 4, 5, generator=gen)
        (g,) = torch.autograd.grad(y, x, upstream)
        assert torch.equal(g, -upstream)
    z = torch.zeros(4, requires_grad=True)
    assert torch.equal(grl(z), z)
    (g,) = torch.autograd.grad(grl(z), z, torch.zeros(4))
    assert torch.equal(g, torch.zeros(4))
    x = torch.randn(5, requires_grad=True)
    assert torch.equal(grl(grl(x)), x)
    (g,) = torch.autograd.grad(grl(grl(x)), x, torch.ones(5))
    assert torch.equal(g, torch.ones(5))


def test_site_classifier_paper_shape():
    clf = SiteClassifier(1024, 8).eval()
    assert clf.fc.in_features == 1024 and clf.fc.out_features == 8
    with torch.no_grad():
        logits = classify_site(torch.randn(1, 1024, 14, 6), clf)
    assert logits.shape == (1, 8) and torch.isfinite(logits).all()


def test_site_classifier_batch_equivariance_and_shape_check():
    torch.manual_seed(5)
    clf = SiteClassifier.for_width(0.0625, 3).eval()
    x = torch.randn(4, 64, 4, 2)
    with torch.no_grad():
        base = clf(x)
        perm = clf(x[[2, 0, 3, 1]])
    torch.testing.assert_close(perm, base[[2, 0, 3, 1]])
    with pytest.raises(SitegenError):
        clf(torch.randn(1, 32, 4, 2))
