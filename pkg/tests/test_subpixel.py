import numpy as np
import torch

from xmatch.coarse import CoarseMatchSet
from xmatch.fine import FineMatchSet
from xmatch.subpixel import (SubPixelRegressor, assemble_matches, fine_cell_centers,
                             read_match_file, unique_by_confidence, write_match_file)


def _zero_last(reg):
    torch.nn.init.zeros_(reg.mlp[-1].weight)
    torch.nn.init.zeros_(reg.mlp[-1].bias)


def test_zero_final_layer_gives_zero_offsets():
    reg = SubPixelRegressor(8)
    _zero_last(reg)
    out = reg(torch.randn(5, 8), torch.randn(5, 8))
    assert out.shape == (5, 4) and (out == 0).all()


def test_offsets_in_open_interval():
    reg = SubPixelRegressor(4)
    with torch.no_grad():
        reg.mlp[-1].bias.fill_(100.0)
    out = reg(torch.randn(10, 4) * 100, torch.randn(10, 4) * 100)
    assert (out.abs() < 1).all()


def test_cell_centres():
    centre = torch.tensor([[4, 6]])
    xy = fine_cell_centers(centre, torch.tensor([12]))
    assert xy.tolist() == [[12.5, 8.5]]
    xy0 = fine_cell_centers(centre, torch.tensor([0]))
    assert xy0.tolist() == [[8.5, 4.5]]


def _sets(idx_a, idx_b, conf, centres=((4, 4),)):
    n = len(idx_a)
    z = torch.zeros(n, dtype=torch.long)
    coarse = CoarseMatchSet(z, z, z, torch.ones(n), z, (2, 2), (2, 2))
    fine = FineMatchSet(torch.tensor(idx_a), torch.tensor(idx_b), torch.tensor(conf),
                        torch.ones(n, dtype=torch.bool))
    c = torch.tensor(list(centres) * n)[:n]
    return coarse, fine, (c, c)


def test_offset_just_below_one_moves_less_than_a_pixel():
    coarse, fine, centres = _sets([12], [12], [0.9])
    off = torch.full((1, 4), 1 - 1e-6, dtype=torch.float64)
    out = assemble_matches(coarse, fine, off, centers=centres)
    d = out.xy_a - out.cell_center_a
    assert (d > 0).all() and (d < 1).all()


def test_duplicate_cells_keep_higher_confidence():
    coarse, fine, centres = _sets([12, 12, 3], [0, 1, 2], [0.4, 0.8, 0.5])
    out = assemble_matches(coarse, fine, None, centers=centres)
    assert len(out) == 2
    np.testing.assert_allclose(sorted(out.confidence), [0.5, 0.8], rtol=1e-6)
    assert out.parent.tolist() == [1, 2]


def test_unique_by_confidence_tie_breaks_on_index():
    keep = unique_by_confidence(["x", "x"], ["p", "q"], np.array([0.5, 0.5]))
    assert keep.tolist() == [0]


def test_scales_and_bounds():
    coarse, fine, centres = _sets([0], [24], [0.9])
    out = assemble_matches(coarse, fine, None, scales=((0.5, 0.5), (2.0, 2.0)),
                           bounds=((100, 100), (3, 3)), centers=centres)
    np.testing.assert_allclose(out.xy_a, [[(4 * 2 - 2 * 2 + 0.5) / 0.5] * 2])
    np.testing.assert_allclose(out.xy_b, [[2.0, 2.0]])


def test_match_file_round_trip(tmp_path):
    coarse, fine, centres = _sets([0, 6], [1, 7], [0.25, 0.75])
    out = assemble_matches(coarse, fine, None, centers=centres)
    path = write_match_file(tmp_path / "m.txt", out)
    back = read_match_file(path)
    np.testing.assert_allclose(back.xy_a, out.xy_a, atol=1e-6)
    np.testing.assert_allclose(back.confidence, out.confidence, atol=1e-6)
    assert path.read_text().startswith("# xA yA xB yB conf")
