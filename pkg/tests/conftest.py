import numpy as np
import pytest
import torch

from sitegen.losses import dice_loss, site_loss
from sitegen.model import SiteGeneralizingSegmenter
from sitegen.volumes import SiteParams, generate_synthetic_site

TINY_CROP = (16, 32)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    model = SiteGeneralizingSegmenter(TINY_CROP, num_sites=3, width_multiplier=0.03).double()
    model.train()
    return model


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    n = 4
    brain = np.zeros((n, 1, *TINY_CROP))
    brain[..., 2:-2, 3:-3] = 1
    zs = rng.normal(size=brain.shape) * brain
    lesion = np.zeros_like(brain)
    lesion[:, :, 5:9, 6:12] = 1
    lesion[1, :, 4:8, 20:26] = 1
    pick = torch.tensor([[0, 0], [0, 1], [1, 1], [2, 0], [3, 1], [3, 0]])
    sites = torch.tensor([0, 0, 1, 2, 1, 1])
    return {
        "zs": torch.tensor(zs),
        "brain": torch.tensor(brain),
        "lesion": torch.tensor(lesion),
        "pick": pick,
        "sites": sites,
    }


def tiny_losses(model, batch, reverse=True):
    probs, bottleneck, _ = model.forward_training(batch["zs"], batch["brain"], batch["pick"])
    targets = model.hemispheres(batch["lesion"])[batch["pick"][:, 0], batch["pick"][:, 1]]
    dice = dice_loss(probs, targets)
    logits = model.site_logits(bottleneck) if reverse else model.site(bottleneck)
    return dice, site_loss(logits, batch["sites"])


@pytest.fixture(scope="session")
def three_site_volumes():
    shape = (10, 36, 36)
    params = [SiteParams(1.0, 0.0, 1.0, 0.03), SiteParams(1.6, 0.1, 0.9, 0.05), SiteParams(2.2, -0.05, 1.2, 0.04)]
    volumes = []
    for site, p in enumerate(params):
        volumes += generate_synthetic_site(site, 2, shape, 50 + site, p)
    return volumes
