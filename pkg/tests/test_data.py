import csv

import numpy as np
import pytest

from splitfedcl import annsim, data, pgm
from splitfedcl.errors import PlacementError

AMAX = annsim.DifficultyParams(amax_scale=4.0)


def plain_config(**kw):
    """Scenes with every nuisance switched off: piecewise-constant images."""
    base = dict(rim_range=(0.0, 0.0), texture_std=0.0, noise_std=0.0, blur_range=(0.0, 0.0), shading=0.0)
    base.update(kw)
    return data.SceneConfig(**base)


def test_every_foreground_class_is_visible():
    cfg = data.SceneConfig()
    for seed in range(100):
        image, label = data.generate_scene(cfg, seed)
        assert image.shape == label.shape == (64, 64)
        frac = np.bincount(label.ravel(), minlength=3) / label.size
        assert frac[1] >= 0.01 and frac[2] >= 0.01


def test_plain_scene_is_piecewise_constant():
    cfg = plain_config(annotation_scale=1)
    image, label = data.generate_scene(cfg, 3)
    for c, level in enumerate(cfg.intensities):
        np.testing.assert_allclose(image[label == c], level, atol=1e-12)


def test_scene_is_deterministic():
    cfg = data.SceneConfig(seed=5)
    a, b = data.generate_scene(cfg, 11), data.generate_scene(cfg, 11)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = data.generate_scene(cfg, 12)
    assert not np.array_equal(a[1], c[1])


def test_shapes_are_disjoint_with_margin():
    cfg = data.SceneConfig()
    for seed in range(20):
        fine_image, fine_label, _ = data.render_scene(cfg, seed)
        # each class is a single ellipse, so its pixels form one blob away from the others
        for c in (1, 2):
            assert (fine_label == c).any()
        a, b = fine_label == 1, fine_label == 2
        grown = a.copy()
        for _ in range(2 * cfg.margin * cfg.annotation_scale):
            grown[1:] |= grown[:-1].copy()
            grown[:-1] |= grown[1:].copy()
            grown[:, 1:] |= grown[:, :-1].copy()
            grown[:, :-1] |= grown[:, 1:].copy()
        assert not (grown & b).any()


def test_placement_failure_raises():
    cfg = data.SceneConfig(size=32, axis_range=(9.0, 9.5), margin=1)
    with pytest.raises(PlacementError):
        for seed in range(5):
            data.generate_scene(cfg, seed)


@pytest.mark.parametrize("kw", [dict(n_classes=1, intensities=(0.2,)), dict(intensities=(0.1, 0.2)),
                                dict(axis_range=(2.0, 5.0)), dict(axis_range=(12.0, 24.0)),
                                dict(blur_range=(1.0, 0.5)), dict(noise_std=-0.1), dict(annotation_scale=0)])
def test_invalid_scene_config(kw):
    with pytest.raises(ValueError):
        data.SceneConfig(**kw)


def test_corrupted_scene_keeps_image_and_clean_label():
    cfg = data.SceneConfig()
    image, clean = data.generate_scene(cfg, 4)
    image2, clean2, noisy = data.generate_corrupted_scene(cfg, 4, AMAX)
    assert image.tobytes() == image2.tobytes() and clean.tobytes() == clean2.tobytes()
    assert noisy.shape == clean.shape and not np.array_equal(noisy, clean)


def test_corrupted_iou_is_moderate():
    cfg = data.SceneConfig()
    ious = []
    for seed in range(30):
        _, clean, noisy = data.generate_corrupted_scene(cfg, seed, AMAX)
        for c in (1, 2):
            a, b = clean == c, noisy == c
            ious.append((a & b).sum() / (a | b).sum())
    assert 0.3 < np.mean(ious) < 0.95


def test_zero_amplitude_is_clean():
    cfg = data.SceneConfig()
    _, clean, noisy = data.generate_corrupted_scene(cfg, 2, annsim.DifficultyParams(amax_scale=0.0))
    assert np.array_equal(clean, noisy)


def test_block_reduction():
    x = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(data.block_mean(x, 2), [[2.5, 4.5], [10.5, 12.5]])
    lab = np.array([[0, 1, 2, 2], [1, 0, 2, 1], [1, 1, 0, 0], [1, 2, 0, 0]])
    # ties go to the lowest class id
    np.testing.assert_array_equal(data.block_mode(lab, 2, 3), [[0, 2], [1, 0]])
    assert data.block_mode(lab, 1, 3) is not lab


def test_default_corrupted_counts():
    assert data.FederationLayout().corrupted_counts() == [20, 75, 160, 0]


@pytest.mark.parametrize("kw", [dict(client_sizes=(1, 2), corruption_ratios=(0.1,)),
                                dict(client_sizes=(0,), corruption_ratios=(0.1,)),
                                dict(client_sizes=(3,), corruption_ratios=(1.5,)),
                                dict(test_size=0)])
def test_invalid_layout(kw):
    with pytest.raises(ValueError):
        data.FederationLayout(**kw)


@pytest.fixture(scope="module")
def small_federation():
    cfg = data.SceneConfig(size=48, axis_range=(4.0, 6.0))
    layout = data.FederationLayout((6, 8, 5), (0.5, 0.0, 1.0), test_size=4)
    return cfg, layout, data.build_federation(cfg, layout, 9, AMAX)


def test_federation_ids_and_flags(small_federation):
    cfg, layout, (clients, test) = small_federation
    ids = [s.sample_id for c in clients for s in c.samples] + [s.sample_id for s in test]
    assert ids == list(range(6 + 8 + 5 + 4))
    assert [int(c.corruption_flags.sum()) for c in clients] == layout.corrupted_counts() == [3, 0, 5]
    assert [len(c) for c in clients] == [6, 8, 5]


def test_unflagged_labels_are_bit_identical(small_federation):
    cfg, _, (clients, test) = small_federation
    for c in clients:
        for s in c.samples:
            image, label = data.generate_scene(cfg, s.sample_id)
            assert s.image.tobytes() == image.tobytes()
            assert s.clean_label.tobytes() == label.tobytes()
            if not s.corrupted:
                assert s.label.tobytes() == label.tobytes()
    for s in test:
        assert not s.corrupted and s.label is s.clean_label


def test_federation_is_deterministic(small_federation):
    cfg, layout, (clients, _) = small_federation
    again, _ = data.build_federation(cfg, layout, 9, AMAX)
    for a, b in zip(clients, again):
        assert np.array_equal(a.corruption_flags, b.corruption_flags)
        assert all(x.label.tobytes() == y.label.tobytes() for x, y in zip(a.samples, b.samples))


def test_ratio_zero_leaves_labels_untouched():
    cfg = data.SceneConfig(size=48, axis_range=(4.0, 6.0))
    clients, _ = data.build_federation(cfg, data.FederationLayout((4,), (0.0,), 1), 0)
    assert all(np.array_equal(s.label, s.clean_label) and not s.corrupted for s in clients[0].samples)


def test_dump_dataset(tmp_path, small_federation):
    _, _, (clients, test) = small_federation
    manifest = data.dump_dataset(clients, test, tmp_path)
    rows = list(csv.DictReader(manifest.open()))
    assert len(rows) == 23
    assert sum(int(r["corrupted"]) for r in rows) == 8
    first = clients[0].samples[0]
    assert np.array_equal(pgm.read_label(tmp_path / "000000_label.pgm"), first.label)


def test_network_input():
    imgs = [np.full((4, 4), 0.5), np.full((4, 4), 0.75)]
    x = data.network_input(imgs)
    assert x.shape == (2, 1, 4, 4) and x.dtype == np.float32
    np.testing.assert_allclose(x[:, 0, 0, 0], [0.0, 1.0])
    assert data.network_input(imgs, np.float64).dtype == np.float64
