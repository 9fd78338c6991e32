import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gren import diffcore as dc
from gren import model
from gren.diffcore import Tensor


def rand_images(seed, n=None):
    shape = (128, 128) if n is None else (n, 128, 128)
    return np.random.default_rng(seed).random(shape)


def pooled_oracle(features, mask_grid):
    c, g, _ = features.shape
    total, count = np.zeros(c), 0
    for r in range(g):
        for q in range(g):
            if mask_grid[r, q]:
                total += features[:, r, q]
                count += 1
    mean = total / count
    return mean / math.sqrt(sum(v * v for v in mean))


def maxpool_oracle(mask, grid=16):
    cell = mask.shape[0] // grid
    out = np.zeros((grid, grid), bool)
    for r in range(grid):
        for q in range(grid):
            out[r, q] = mask[r * cell:(r + 1) * cell, q * cell:(q + 1) * cell].any()
    return out


# ------------------------------------------------------------------ params


def test_init_is_deterministic_by_seed():
    a, b, c = model.init_params(3), model.init_params(3), model.init_params(4)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_init_shapes_biases_and_bounds():
    p = model.init_params(0, num_classes=3)
    assert p["head2.weight"].shape == (3, 32, 1, 1)
    assert [p[f"{n}.weight"].shape[0] for n in ("conv1", "conv2", "conv3", "conv4")] == [8, 16, 32, 64]
    for name, tensor in p.items():
        if name.endswith(".bias"):
            assert not tensor.data.any()
        else:
            fan_in = np.prod(tensor.shape[1:])
            assert np.abs(tensor.data).max() <= math.sqrt(6.0 / fan_in)


def test_init_rejects_zero_classes():
    with pytest.raises(ValueError):
        model.init_params(0, num_classes=0)


def test_fresh_probability_mean_is_moderate():
    means = [model.forward(model.init_params(s), rand_images(100 + s)).probs.data.mean() for s in range(20)]
    assert 0.2 <= np.mean(means) <= 0.8


# ----------------------------------------------------------------- forward


def test_forward_shapes_and_purity():
    p, img = model.init_params(1), rand_images(1)
    a, b = model.forward(p, img), model.forward(p, img)
    assert a.features.shape == (64, 16, 16)
    assert a.probs.shape == (2, 16, 16)
    np.testing.assert_array_equal(a.probs.data, b.probs.data)
    np.testing.assert_array_equal(a.features.data, b.features.data)


def test_forward_batch_matches_single():
    p, imgs = model.init_params(2), rand_images(2, n=3)
    batch = model.forward(p, imgs)
    for i in range(3):
        np.testing.assert_allclose(batch[i].probs.data, model.forward(p, imgs[i]).probs.data, atol=1e-12)


def test_probs_are_sigmoid_of_logits_and_open():
    out = model.forward(model.init_params(5), rand_images(5))
    np.testing.assert_array_equal(out.probs.data, dc.sigmoid(out.logits).data)
    assert np.all((out.probs.data > 0) & (out.probs.data < 1))


@pytest.mark.parametrize("shape", [(64, 64), (128, 127), (2, 1, 128, 128)])
def test_forward_rejects_wrong_size(shape):
    with pytest.raises(ValueError):
        model.forward(model.init_params(0), np.zeros(shape))


def test_head_bias_raises_class_probability():
    p, img = model.init_params(6), rand_images(6)
    before = model.forward(p, img).probs.data
    p["head2.bias"].data[1] += 10.0
    after = model.forward(p, img).probs.data
    assert after[1].mean() > before[1].mean()
    np.testing.assert_array_equal(after[0], before[0])


def test_upsample_doubles_grid():
    out = model.forward(model.init_params(0), rand_images(0), upsample=True)
    assert out.probs.shape == (2, 32, 32)
    assert out.features.shape == (64, 16, 16)


def test_forward_is_differentiable_end_to_end():
    p = model.init_params(7)
    out = model.forward(p, rand_images(7))
    dc.backward(dc.mean(out.probs))
    assert all(np.isfinite(t.grad).all() for t in p.values())
    assert np.abs(p["conv1.weight"].grad).sum() > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_outputs_finite(seed, scale):
    p = model.init_params(seed)
    out = model.forward(p, rand_images(seed) * scale)
    assert np.isfinite(out.features.data).all() and np.isfinite(out.probs.data).all()


def test_grid_geometry_by_impulse_probing():
    """Sweep every pixel offset inside a cell, probing all cells of one parity class at a time.

    Cells of one parity class are two apart, so a cell's response can only come from its own
    impulse or from a neighbour's. Impulses strictly inside a cell must reach that cell alone;
    impulses on the cell border may additionally reach the adjacent cell.
    """
    p = model.init_params(8)
    base = rand_images(8) * 0.5
    ref = model.forward(p, base).features.data
    cells = np.indices((16, 16)).reshape(2, -1).T
    for parity in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        chosen = [(r, c) for r, c in cells if (r % 2, c % 2) == parity]
        probes = []
        for dy in range(8):
            for dx in range(8):
                img = base.copy()
                for r, c in chosen:
                    img[8 * r + dy, 8 * c + dx] += 5.0
                probes.append(img)
        changed = np.abs(model.forward(p, np.stack(probes)).features.data - ref).max(axis=1) > 0
        for idx, (dy, dx) in enumerate((dy, dx) for dy in range(8) for dx in range(8)):
            hit = changed[idx]
            for r, c in chosen:
                assert hit[r, c], (parity, dy, dx, r, c)
            reach_y = {0: (-1, 0), 7: (0, 1)}.get(dy, (0, 0))
            reach_x = {0: (-1, 0), 7: (0, 1)}.get(dx, (0, 0))
            allowed = np.zeros((16, 16), bool)
            for r, c in chosen:
                for oy in range(reach_y[0], reach_y[1] + 1):
                    for ox in range(reach_x[0], reach_x[1] + 1):
                        if 0 <= r + oy < 16 and 0 <= c + ox < 16:
                            allowed[r + oy, c + ox] = True
            assert not (hit & ~allowed).any(), (parity, dy, dx)


# --------------------------------------------------------------- embeddings


def test_downsample_mask_matches_maxpool_oracle():
    mask = np.random.default_rng(0).random((128, 128)) > 0.995
    np.testing.assert_array_equal(model.downsample_mask(mask), maxpool_oracle(mask))


def test_downsample_mask_rejects_non_tiling():
    with pytest.raises(ValueError):
        model.downsample_mask(np.ones((100, 100), bool))


def lung_masks(seed):
    rng = np.random.default_rng(seed)
    left = np.zeros((128, 128), bool)
    right = np.zeros((128, 128), bool)
    y0, x0 = rng.integers(10, 40, size=2)
    left[y0:y0 + 60, x0:x0 + 20] = True
    right[:, 64:] = left[:, :64][:, ::-1]
    return left, right


def test_region_embeddings_match_loop_oracle():
    out = model.forward(model.init_params(9), rand_images(9))
    left, right = lung_masks(9)
    f_l, f_r = model.region_embeddings(out, left, right)
    feats = out.features.data
    np.testing.assert_allclose(f_l.data, pooled_oracle(feats, maxpool_oracle(left)), atol=1e-12)
    np.testing.assert_allclose(f_r.data, pooled_oracle(feats, maxpool_oracle(right)), atol=1e-12)
    assert np.linalg.norm(f_l.data) <= 1 + 1e-12


def test_whole_embedding_matches_loop_oracle_and_is_symmetric():
    out = model.forward(model.init_params(10), rand_images(10))
    left, right = lung_masks(10)
    f = model.whole_embedding(out, left, right)
    np.testing.assert_allclose(f.data, pooled_oracle(out.features.data, maxpool_oracle(left | right)), atol=1e-12)
    np.testing.assert_array_equal(f.data, model.whole_embedding(out, right, left).data)


def test_full_masks_give_equal_embeddings():
    out = model.forward(model.init_params(11), rand_images(11))
    full = np.ones((128, 128), bool)
    f_l, f_r = model.region_embeddings(out, full, full)
    np.testing.assert_array_equal(f_l.data, f_r.data)


def test_constant_feature_map_gives_equal_embeddings():
    feats = Tensor(np.broadcast_to(np.arange(1.0, 65.0)[:, None, None], (64, 16, 16)).copy())
    left, right = lung_masks(12)
    f_l, f_r = model.region_embeddings(feats, left, right)
    np.testing.assert_allclose(f_l.data, f_r.data, atol=1e-15)


def test_empty_masks_rejected():
    out = model.forward(model.init_params(0), rand_images(0))
    empty = np.zeros((128, 128), bool)
    left, _ = lung_masks(0)
    with pytest.raises(ValueError, match="empty"):
        model.region_embeddings(out, empty, left)
    with pytest.raises(ValueError, match="empty"):
        model.whole_embedding(out, empty, empty)
    with pytest.raises(ValueError):
        model.region_embeddings(model.forward(model.init_params(0), rand_images(0, n=2)), left, left)
