import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from realrep.color import EncodedImage
from realrep.contrastive import (DIHEDRAL, ContrastiveBatchInputs, MomentumEncoder,
                                 apply_dihedral, choose_dihedral, contrastive_loss,
                                 contrastive_terms, enabled_terms, info_nce_term,
                                 invert_dihedral, make_positive, momentum_update)

LN_1P_EXP_M2 = 0.12692801104297250  # ln(1 + e^-2), 40-digit evaluation


def unit(v):
    return v / v.norm(dim=-1, keepdim=True)


def scalar_info_nce(a, p, negs, t=1.0):
    sp = sum(x * y for x, y in zip(a, p)) / t
    sn = [sum(x * y for x, y in zip(a, n)) / t for n in negs]
    m = max([sp, *sn])
    return -(sp - m) + math.log(math.exp(sp - m) + sum(math.exp(s - m) for s in sn))


def test_symmetric_point():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    p = torch.tensor([0.6, 0.8], dtype=torch.float64)
    n = torch.tensor([[0.6, -0.8]], dtype=torch.float64)
    assert info_nce_term(a, p, n).item() == pytest.approx(math.log(2), abs=1e-12)


def test_separated_pair():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert info_nce_term(a, a, -a[None]).item() == pytest.approx(LN_1P_EXP_M2, abs=1e-12)
    assert math.log1p(math.exp(-2)) == pytest.approx(LN_1P_EXP_M2, abs=1e-15)


@pytest.mark.parametrize("n", [1, 3, 16])
def test_equal_logits(n):
    a = unit(torch.randn(8, dtype=torch.float64))
    negs = a.expand(n, 8)
    assert info_nce_term(a, a, negs).item() == pytest.approx(math.log(1 + n), abs=1e-12)


def test_temperature_scales_logits():
    a, p = unit(torch.randn(2, 8, dtype=torch.float64))
    n = unit(torch.randn(3, 8, dtype=torch.float64))
    got = info_nce_term(a, p, n, temperature=0.5).item()
    assert got == pytest.approx(scalar_info_nce(a.tolist(), p.tolist(), n.tolist(), 0.5),
                                abs=1e-12)


def test_needs_negatives():
    with pytest.raises(ValueError):
        info_nce_term(torch.ones(4), torch.ones(4), torch.ones(0, 4))


def _random_batch(b=3, k=2, d=8, g=2, dtype=torch.float64, seed=0):
    gen = torch.Generator().manual_seed(seed)

    def glob(*s):
        return unit(torch.randn(*s, d, generator=gen, dtype=dtype))

    def loc(*s):
        return nn.functional.normalize(torch.randn(*s, d, g, g, generator=gen, dtype=dtype),
                                       dim=-3)
    keys = [f"{c}_{v}" for c in ("lum", "chr") for v in ("g", "l")]
    a = {key: glob(b) if key.endswith("g") else loc(b) for key in keys}
    p = {key: glob(b) if key.endswith("g") else loc(b) for key in keys}
    n = {key: glob(b, k) if key.endswith("g") else loc(b, k) for key in keys}
    return ContrastiveBatchInputs(a, p, n)


def scalar_batch_loss(batch):
    total = 0.0
    for key in batch.terms:
        a, p, n = (t.tolist() for t in (batch.anchors[key], batch.positives[key],
                                         batch.negatives[key]))
        vals = []
        for i in range(len(a)):
            if key.endswith("_g"):
                vals.append(scalar_info_nce(a[i], p[i], n[i]))
            else:
                arr_a, arr_p = np.array(a[i]), np.array(p[i])
                arr_n = np.array(n[i])
                for y in range(arr_a.shape[1]):
                    for x in range(arr_a.shape[2]):
                        vals.append(scalar_info_nce(arr_a[:, y, x], arr_p[:, y, x],
                                                    [arr_n[j, :, y, x]
                                                     for j in range(arr_n.shape[0])]))
        total += sum(vals) / len(vals)
    return total


def test_batch_matches_scalar_oracle():
    batch = _random_batch()
    assert contrastive_loss(batch).item() == pytest.approx(scalar_batch_loss(batch), abs=1e-9)


def test_four_terms_at_symmetric_point():
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    p = torch.tensor([[0.6, 0.8]], dtype=torch.float64)
    n = torch.tensor([[[0.6, -0.8]]], dtype=torch.float64)
    loc = {"a": a[:, :, None, None], "p": p[:, :, None, None], "n": n[:, :, :, None, None]}
    batch = ContrastiveBatchInputs(
        {"lum_g": a, "chr_g": a, "lum_l": loc["a"], "chr_l": loc["a"]},
        {"lum_g": p, "chr_g": p, "lum_l": loc["p"], "chr_l": loc["p"]},
        {"lum_g": n, "chr_g": n, "lum_l": loc["n"], "chr_l": loc["n"]})
    assert contrastive_loss(batch).item() == pytest.approx(4 * math.log(2), abs=1e-12)


def test_enabled_terms():
    assert len(enabled_terms()) == 4
    assert enabled_terms(use_chr=False) == ("lum_g", "lum_l")
    assert enabled_terms(use_local=False) == ("lum_g", "chr_g")
    batch = _random_batch()
    batch.terms = enabled_terms(use_chr=False)
    assert set(contrastive_terms(batch)) == {"lum_g", "lum_l"}


def test_missing_term_raises():
    batch = _random_batch()
    del batch.negatives["chr_l"]
    with pytest.raises(KeyError):
        contrastive_loss(batch)


def central_difference_check(f, x, h=1e-6):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f(x.detach()).item()
        flat[i] = orig - h
        down = f(x.detach()).item()
        flat[i] = orig
        numeric.view(-1)[i] = (up - down) / (2 * h)
    return (analytic - numeric).norm() / numeric.norm()


def test_gradients_finite_difference():
    gen = torch.Generator().manual_seed(1)
    a, p = torch.randn(2, 8, generator=gen, dtype=torch.float64)
    n = torch.randn(5, 8, generator=gen, dtype=torch.float64)
    assert central_difference_check(lambda v: info_nce_term(v, p, n), a) < 1e-4
    assert central_difference_check(lambda v: info_nce_term(a, v, n), p) < 1e-4
    assert central_difference_check(lambda v: info_nce_term(a, p, v), n) < 1e-4
    assert torch.autograd.gradcheck(lambda v: info_nce_term(v, p, n), (a.requires_grad_(),))


def test_dihedral_group():
    x = torch.arange(2 * 3 * 4 * 4, dtype=torch.float32).view(2, 3, 4, 4)
    hflip = DIHEDRAL.index((0, True))
    assert torch.equal(apply_dihedral(apply_dihedral(x, hflip), hflip), x)
    for i in range(len(DIHEDRAL)):
        assert torch.equal(invert_dihedral(apply_dihedral(x, i), i), x)
        arr = x[0].permute(1, 2, 0).numpy()
        np.testing.assert_array_equal(invert_dihedral(apply_dihedral(arr, i), i), arr)


def test_positive_keeps_histogram():
    img = EncodedImage(np.random.default_rng(0).random((8, 8, 3)))
    pos = make_positive(img, seed=4)
    np.testing.assert_array_equal(np.sort(pos.pixels, axis=None), np.sort(img.pixels, axis=None))
    assert not np.array_equal(pos.pixels, img.pixels)
    np.testing.assert_array_equal(make_positive(img, seed=4).pixels, pos.pixels)


def test_choose_dihedral_rectangular():
    rng = np.random.default_rng(0)
    picks = {choose_dihedral(rng, square=False) for _ in range(200)}
    assert all(DIHEDRAL[i][0] % 2 == 0 and i != 0 for i in picks)
    assert make_positive(EncodedImage(np.random.rand(4, 6, 3)), 1).pixels.shape == (4, 6, 3)


def test_momentum_update_rules():
    shadow, live = [torch.zeros(3)], [torch.ones(3)]
    momentum_update(shadow, live, 1.0)
    assert torch.all(shadow[0] == 0)
    momentum_update(shadow, live, 0.999)
    torch.testing.assert_close(shadow[0], torch.full((3,), 0.001), atol=1e-9, rtol=0)
    momentum_update(shadow, live, 0.0)
    assert torch.equal(shadow[0], live[0])
    with pytest.raises(ValueError):
        momentum_update([torch.zeros(2)], [torch.zeros(3)], 0.5)
    with pytest.raises(ValueError):
        momentum_update(shadow, live, 1.5)


def test_momentum_encoder_is_frozen_copy():
    live = nn.Linear(4, 2)
    mom = MomentumEncoder(live, 0.5)
    assert all(not p.requires_grad for p in mom.module.parameters())
    with torch.no_grad():
        live.weight.add_(1.0)
    before = mom.module.weight.clone()
    mom.update(live)
    torch.testing.assert_close(mom.module.weight, 0.5 * before + 0.5 * live.weight)
    assert mom(torch.zeros(1, 4)).shape == (1, 2)
