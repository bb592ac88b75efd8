import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rpnode.errors import ConfigurationError
from rpnode.losses import (LossWeights, cluster_loss, consistency_loss, cross_entropy, flat_cosine,
                           total_loss)
from rpnode.perturb import NoiseConfig, gaussian_companion


# -- perturb ----------------------------------------------------------------------

def test_zero_image_unchanged_by_multiplicative_noise():
    img = torch.zeros(16, 16)
    assert torch.equal(gaussian_companion(img, NoiseConfig(sigma=0.5, seed=3)), img)


def test_vanishing_sigma_is_identity():
    img = torch.rand(8, 8, generator=torch.Generator().manual_seed(0))
    out = gaussian_companion(img, NoiseConfig(sigma=1e-12, seed=1))
    assert float((out - img).abs().max()) < 1e-9


def test_multiplicative_noise_moments():
    img = torch.full((100, 100), 0.5)
    out = gaussian_companion(img, NoiseConfig(sigma=0.1, seed=11, clip=False))
    rel = ((out - img) / img).flatten()
    assert abs(float(rel.mean())) < 0.005
    assert abs(float(rel.std()) - 0.1) < 0.01


def test_additive_mode_moments():
    img = torch.full((100, 100), 0.5)
    out = gaussian_companion(img, NoiseConfig("additive", sigma=0.05, seed=2, clip=False))
    assert abs(float((out - img).std()) - 0.05) < 0.005


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), sigma=st.floats(0.01, 2.0),
       mode=st.sampled_from(["multiplicative", "additive"]))
def test_companion_properties(seed, sigma, mode):
    g = torch.Generator().manual_seed(seed % 1000)
    img = torch.rand(2, 6, 6, generator=g)
    img[0, 0, 0] = 0.0
    cfg = NoiseConfig(mode, sigma, seed)
    a, b = gaussian_companion(img, cfg), gaussian_companion(img, cfg)
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0
    if mode == "multiplicative":
        assert a[0, 0, 0] == 0.0


def test_noise_config_validation():
    with pytest.raises(ConfigurationError):
        NoiseConfig(sigma=0.0)
    with pytest.raises(ConfigurationError):
        NoiseConfig(mode="salt")


# -- losses -------------------------------------------------------------------------

def onehot(labels, n):
    return torch.nn.functional.one_hot(labels, n).permute(2, 0, 1).double()


def test_cross_entropy_perfect_prediction():
    gt = torch.tensor([[0, 1], [1, 0]])
    assert float(cross_entropy(onehot(gt, 2), gt)) <= 1e-11


def test_cross_entropy_uniform_is_ln2():
    gt = torch.tensor([[0, 1], [1, 1]])
    probs = torch.full((2, 2, 2), 0.5)
    assert float(cross_entropy(probs, gt)) == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_pixel_permutation_invariance():
    g = torch.Generator().manual_seed(0)
    probs = torch.softmax(torch.randn(3, 4, 5, generator=g), 0)
    gt = torch.randint(0, 3, (4, 5), generator=g)
    perm = torch.randperm(20, generator=g)
    p2 = probs.reshape(3, -1)[:, perm].reshape(3, 4, 5)
    g2 = gt.reshape(-1)[perm].reshape(4, 5)
    assert float(cross_entropy(probs, gt)) == pytest.approx(float(cross_entropy(p2, g2)), abs=1e-14)


def test_cross_entropy_with_class_ids_and_mismatch():
    gt = torch.tensor([[0, 5], [5, 0]])
    probs = onehot(torch.tensor([[0, 1], [1, 0]]), 2)
    assert float(cross_entropy(probs, gt, (0, 5))) <= 1e-11
    with pytest.raises(ConfigurationError):
        cross_entropy(probs, torch.tensor([[0, 3], [5, 0]]), (0, 5))
    with pytest.raises(ConfigurationError):
        cross_entropy(probs, torch.tensor([[0, 2], [1, 0]]))


def test_consistency_equals_cross_entropy():
    g = torch.Generator().manual_seed(1)
    probs = torch.softmax(torch.randn(2, 3, 3, generator=g), 0)
    gt = torch.randint(0, 2, (3, 3), generator=g)
    assert torch.equal(consistency_loss(probs, gt), cross_entropy(probs, gt))
    assert float(consistency_loss(torch.full((2, 3, 3), 0.5), gt)) == pytest.approx(math.log(2), abs=1e-12)
    assert float(consistency_loss(onehot(gt, 2), gt)) <= 1e-11


def test_cluster_loss_reference_cases():
    a = [torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 2.0]])]
    assert float(cluster_loss(a, a)) == pytest.approx(0.0, abs=1e-15)
    ortho = [torch.tensor([[0.0, 3.0]]), torch.tensor([[1.0, 0.0]])]
    assert float(cluster_loss(a, ortho)) == pytest.approx(1.0, abs=1e-15)
    anti = [-x for x in a]
    assert float(cluster_loss(a, anti)) == pytest.approx(2.0, abs=1e-15)


def test_cluster_loss_zero_norm_shot():
    a = [torch.zeros(2, 2)]
    assert float(cluster_loss(a, [torch.ones(2, 2)])) == 1.0
    assert float(flat_cosine(torch.zeros(3), torch.ones(3))) == 0.0


def test_cluster_loss_validation():
    with pytest.raises(ConfigurationError):
        cluster_loss([torch.ones(2)], [])
    with pytest.raises(ConfigurationError):
        cluster_loss([torch.ones(2)], [torch.ones(3)])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
def test_cluster_loss_properties(seed, k):
    g = torch.Generator().manual_seed(seed)
    clean = [torch.randn(3, 4, 4, generator=g) for _ in range(k)]
    noisy = [torch.randn(3, 4, 4, generator=g) for _ in range(k)]
    v = float(cluster_loss(clean, noisy))
    assert -1e-12 <= v <= 2 + 1e-12
    assert v == pytest.approx(float(cluster_loss(noisy, clean)), abs=1e-14)
    # pulling the noisy features toward the clean ones never increases the loss
    prev = v
    for lam in np.linspace(0, 1, 11)[1:]:
        cur = float(cluster_loss(clean, [(1 - lam) * n + lam * c for n, c in zip(noisy, clean)]))
        assert cur <= prev + 1e-12
        prev = cur


def test_total_loss_arithmetic():
    w = LossWeights(0.001, 0.01)
    assert total_loss(1.0, 2.0, 3.0, w) == pytest.approx(1.032, abs=1e-15)
    assert total_loss(0.7, 5.0, 9.0, LossWeights(0.0, 0.0)) == 0.7
    assert total_loss(0.0, 0.0, 0.0, w) == 0.0


def test_loss_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(-1.0, 0.0)
    with pytest.raises(ConfigurationError):
        LossWeights(0.0, float("inf"))


def test_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(5)
    gt = torch.randint(0, 3, (4, 4), generator=g)
    logits = torch.randn(3, 4, 4, generator=g, requires_grad=True)
    assert torch.autograd.gradcheck(lambda l: cross_entropy(torch.softmax(l, 0), gt), (logits,), eps=1e-6, rtol=1e-4)
    assert torch.autograd.gradcheck(lambda l: consistency_loss(torch.softmax(l, 0), gt), (logits,), eps=1e-6, rtol=1e-4)
    a = torch.randn(2, 3, 3, generator=g, requires_grad=True)
    b = torch.randn(2, 3, 3, generator=g, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x, y: cluster_loss([x], [y]), (a, b), eps=1e-6, rtol=1e-4)
