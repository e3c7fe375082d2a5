import numpy as np
import pytest
import torch

from xmatch import CrossModalNet, ModelConfig, ValidationError
from xmatch.mim import (MaskedTokens, ReconstructionHead, mim_loss, overwrite_masked,
                        paste_patches, sample_mask_pair)
from xmatch.nn.backbone import FeaturePyramid


def test_mask_counts_for_standard_size():
    m = sample_mask_pair((448, 640), 0.5, 64, seed=0)
    assert m.mask_a.shape == (7, 10)
    assert m.mask_a.sum() == 35 and m.mask_b.sum() == 35
    assert m.upscale(8, "a").sum() == 35 * 64
    assert m.upscale(1, "b").shape == (448, 640)


def test_zero_ratio_and_determinism():
    assert not sample_mask_pair((128, 128), 0.0).mask_a.any()
    a = sample_mask_pair((256, 256), 0.5, seed=9)
    b = sample_mask_pair((256, 256), 0.5, seed=9)
    np.testing.assert_array_equal(a.mask_a, b.mask_a)
    np.testing.assert_array_equal(a.mask_b, b.mask_b)


def test_mask_rejects_unpadded_dims():
    with pytest.raises(ValidationError):
        sample_mask_pair((100, 128))
    with pytest.raises(ValidationError):
        sample_mask_pair((128, 128), 1.5)


def _pyramid():
    return FeaturePyramid(torch.randn(1, 8, 2, 2), torch.randn(1, 6, 4, 4), torch.randn(1, 4, 8, 8))


def test_empty_mask_leaves_pyramid_unchanged():
    pyr = _pyramid()
    out = overwrite_masked(pyr, torch.zeros(1, 16, 16, dtype=torch.bool), MaskedTokens((8, 6, 4)))
    for x, y in ((pyr.f_coarse, out.f_coarse), (pyr.f_mid, out.f_mid), (pyr.f_fine, out.f_fine)):
        torch.testing.assert_close(x, y)


def test_full_mask_gives_only_tokens():
    tokens = MaskedTokens((8, 6, 4))
    out = overwrite_masked(_pyramid(), torch.ones(1, 16, 16, dtype=torch.bool), tokens)
    for k, f in enumerate((out.f_coarse, out.f_mid, out.f_fine)):
        torch.testing.assert_close(f, tokens(k)[None, :, None, None].expand_as(f).detach())


def test_masked_cell_count_matches_patch_count():
    m = sample_mask_pair((128, 192), 0.5, 32, seed=1)
    pix = torch.from_numpy(m.upscale(1, "a"))[None]
    tokens = MaskedTokens((8, 6, 4))
    pyr = FeaturePyramid(torch.randn(1, 8, 16, 24), torch.randn(1, 6, 32, 48), torch.randn(1, 4, 64, 96))
    out = overwrite_masked(pyr, pix, tokens)
    n_patches = int(m.mask_a.sum())
    assert int((out.f_coarse == tokens(0)[None, :, None, None]).all(1).sum()) == n_patches * 16
    assert int((out.f_fine == tokens(2)[None, :, None, None]).all(1).sum()) == n_patches * 256


def test_zero_projection_gives_zero_patches():
    head = ReconstructionHead(4)
    torch.nn.init.zeros_(head.proj.weight)
    torch.nn.init.zeros_(head.proj.bias)
    out = head(torch.randn(3, 25, 4))
    assert out.shape == (3, 10, 10) and (out == 0).all()


def test_loss_of_constant_offset():
    target = torch.rand(2, 16, 16)
    mask = torch.zeros(2, 16, 16, dtype=torch.bool)
    mask[:, :8] = True
    loss = mim_loss(target + 0.1, target, mask)
    assert float(loss) == pytest.approx(0.01, rel=1e-5)
    assert float(mim_loss(target + 5.0, target, torch.zeros_like(mask))) == 0.0


@pytest.mark.parametrize("mode", ["resample", "overlap"])
def test_paste_constant_patches(mode):
    patches = torch.full((2, 10, 10), 0.25)
    img, cover = paste_patches(patches, torch.tensor([0, 0]), torch.tensor([0, 1]),
                               torch.tensor([1, 1]), (1, 16, 24), mode)
    torch.testing.assert_close(img[cover], torch.full((int(cover.sum()),), 0.25))
    assert cover[0, :, 8:16].all()


def test_reconstruction_reuses_the_matching_decoder():
    torch.manual_seed(0)
    net = CrossModalNet(ModelConfig.toy()).eval()
    calls = []
    net.decoder.register_forward_hook(lambda m, i, o: calls.append(m))
    masks = sample_mask_pair((64, 64), 0.5, 32, seed=0)
    img = torch.rand(1, 1, 64, 64)
    ra, rb = net.reconstruct(img, img, torch.from_numpy(masks.upscale(1, "a"))[None],
                             torch.from_numpy(masks.upscale(1, "b"))[None])
    assert calls == [net.decoder]
    assert ra.shape == (1, 64, 64)
    assert (ra[0][~torch.from_numpy(masks.upscale(1, "a"))] == 0).all()
