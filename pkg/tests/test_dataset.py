import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

# Ensure project root on path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from viewflow.dataset import (
    AZIMUTHS,
    DELTAS,
    MANIFEST_NAME,
    DatasetManifest,
    ViewStore,
    analytic_flow,
    decode_transform,
    encode_transform,
    generate_dataset,
    is_test_instance,
    load_manifest,
    make_sprite,
    render_view,
    sample_tuple_multi,
    sample_tuple_single,
    wrap_delta,
)
from viewflow.errors import ConfigurationError, DataError, UsageError
from viewflow.evaluation import mean_foreground_l1
from viewflow.images import save_png
from viewflow.sampler import bilinear_sample


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sprites")
    generate_dataset(seed=3, instance_count=5, size=32, out_dir=out)
    return out


def _tree(root):
    return {
        str(path.relative_to(root)): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


def test_encode_transform_is_one_hot():
    assert int(np.argmax(encode_transform(-180).vector)) == 0
    assert int(np.argmax(encode_transform(0).vector)) == 9
    assert int(np.argmax(encode_transform(180).vector)) == 18
    for delta in DELTAS:
        vector = encode_transform(delta).vector
        assert vector.shape == (19,) and vector.sum() == 1.0
        assert decode_transform(encode_transform(delta)) == delta


@pytest.mark.parametrize("delta", [37, 200, -200, 10])
def test_encode_transform_rejects_off_vocabulary(delta):
    with pytest.raises(DataError):
        encode_transform(delta)


def test_wrap_delta():
    assert wrap_delta(190) == -170
    assert wrap_delta(-180) == 180
    assert wrap_delta(180) == 180
    assert wrap_delta(360) == 0
    assert wrap_delta(-350) == 10


def test_analytic_flow_is_zero_for_equal_views():
    for theta in (0, 35, 180, 355):
        assert not analytic_flow(theta, theta, 32, 32).any()


def test_analytic_flow_quarter_turn():
    # centre is (1, 1); target pixel (u=2, v=1) reads the source at R(-90) (1, 0) + c
    flow = analytic_flow(0, 90, 3, 3)
    assert flow.shape == (1, 2, 3, 3)
    assert flow[0, :, 1, 2].tolist() == [-1.0, -1.0]
    assert flow[0, :, 1, 1].tolist() == [0.0, 0.0]
    flow = analytic_flow(90, 0, 3, 3)
    assert flow[0, :, 1, 2].tolist() == [-1.0, 1.0]


def test_sprites_are_deterministic():
    a = make_sprite(seed=1, instance_id=4, size=32)
    b = make_sprite(seed=1, instance_id=4, size=32)
    c = make_sprite(seed=1, instance_id=5, size=32)
    assert a.image.tobytes() == b.image.tobytes()
    assert not np.array_equal(a.image, c.image)
    assert set(np.unique(a.mask)) <= {0.0, 1.0}
    assert a.mask.sum() > 0


def test_canonical_view_is_the_sprite():
    sprite = make_sprite(seed=2, instance_id=0, size=32)
    view = render_view(sprite, 0)
    assert np.array_equal(view.image, sprite.image)
    assert np.array_equal(view.mask, sprite.mask)


def test_half_turn_matches_direct_pixel_lookup():
    sprite = make_sprite(seed=2, instance_id=1, size=32)
    view = render_view(sprite, 180)
    for v in range(32):
        for u in range(32):
            expected = sprite.image[:, 31 - v, 31 - u] if sprite.mask[0, 31 - v, 31 - u] else 1.0
            assert np.all(np.abs(view.image[:, v, u] - expected) <= 1e-6)
            assert view.mask[0, v, u] == sprite.mask[0, 31 - v, 31 - u]


def test_analytic_warp_reproduces_rendered_views():
    rng = np.random.default_rng(0)
    errors = []
    for instance_id in range(20):
        sprite = make_sprite(seed=0, instance_id=instance_id, size=64)
        for _ in range(5):
            source_az, target_az = (int(a) for a in rng.choice(AZIMUTHS, size=2))
            source = render_view(sprite, source_az)
            target = render_view(sprite, target_az)
            flow = analytic_flow(source_az, target_az, 64, 64)
            warped = 1.0 - bilinear_sample(1.0 - source.image[None], flow)[0]
            errors.append(mean_foreground_l1(warped, target.image, target.mask))
    assert float(np.mean(errors)) < 0.02


def test_generation_is_deterministic(dataset_dir, tmp_path):
    generate_dataset(seed=3, instance_count=5, size=32, out_dir=tmp_path)
    assert _tree(tmp_path) == _tree(dataset_dir)


def test_manifest_and_layout(dataset_dir):
    manifest = load_manifest(dataset_dir)
    assert manifest.instance_count == 5 and manifest.image_size == 32
    assert manifest.azimuths == AZIMUTHS and manifest.deltas == DELTAS
    assert (dataset_dir / "inst_0000" / "view_355.png").is_file()
    assert (dataset_dir / "inst_0004" / "mask_000.png").is_file()


def test_split_is_disjoint_and_covers_every_instance(dataset_dir):
    manifest = load_manifest(dataset_dir)
    assert not set(manifest.train_ids) & set(manifest.test_ids)
    assert sorted(manifest.train_ids + manifest.test_ids) == list(range(5))
    assert manifest.test_ids == [i for i in range(5) if is_test_instance(3, i)]
    assert len(manifest.test_ids) == 1


def test_views_have_white_background_and_binary_masks(dataset_dir):
    store = ViewStore(dataset_dir)
    for azimuth in (0, 45, 180, 275):
        view = store.view(0, azimuth)
        assert view.image.shape == (3, 32, 32) and view.mask.shape == (1, 32, 32)
        assert set(np.unique(view.mask)) <= {0.0, 1.0}
        assert np.all(view.image[:, view.mask[0] == 0] == 1.0)


def test_view_cache_is_bounded(dataset_dir):
    store = ViewStore(dataset_dir, cache_size=3)
    first = store.view(0, 0)
    for azimuth in (5, 10, 15, 20, 25):
        store.view(0, azimuth)
    assert store.cache_info().currsize == 3
    again = store.view(0, 0)
    assert np.array_equal(again.image, first.image) and np.array_equal(again.mask, first.mask)
    assert store.cache_info().misses == 7


def test_single_tuples_use_the_delta_vocabulary(dataset_dir):
    store = ViewStore(dataset_dir)
    manifest = store.manifest
    rng = np.random.default_rng(1)
    for _ in range(200):
        sample = sample_tuple_single(store, "train", rng)
        assert sample.instance_id in manifest.train_ids
        (delta,) = sample.deltas
        assert delta in DELTAS
        assert (sample.target_azimuth - delta) % 360 == sample.source_azimuths[0]
        assert np.array_equal(sample.source, store.view(sample.instance_id, sample.source_azimuths[0]).image)
        assert np.array_equal(sample.target, store.view(sample.instance_id, sample.target_azimuth).image)
        assert decode_transform(sample.transform) == delta


def test_deltas_are_uniform(dataset_dir):
    store = ViewStore(dataset_dir)
    rng = np.random.default_rng(2)
    draws = 10_000
    counts = Counter(sample_tuple_single(store, "train", rng).deltas[0] for _ in range(draws))
    expected = draws / len(DELTAS)
    chi_square = sum((counts[d] - expected) ** 2 / expected for d in DELTAS)
    # 18 degrees of freedom: mean 18, standard deviation 6
    assert abs(chi_square - 18) <= 18


def test_multi_view_tuples(dataset_dir):
    store = ViewStore(dataset_dir)
    rng = np.random.default_rng(3)
    sample = sample_tuple_multi(store, "test", rng, views=3)
    assert len(sample.sources) == len(sample.deltas) == len(sample.transforms) == 3
    assert sample.instance_id in store.manifest.test_ids
    with pytest.raises(UsageError):
        sample_tuple_multi(store, "test", rng, views=0)
    with pytest.raises(UsageError):
        sample_tuple_single(store, "validation", rng)


def test_single_azimuth_dataset_only_pairs_a_view_with_itself(tmp_path):
    manifest = DatasetManifest(
        seed=0, instance_count=5, image_size=32, azimuths=(0,), train_ids=[1, 2, 3, 4], test_ids=[0]
    )
    for instance_id in range(5):
        sprite = make_sprite(0, instance_id, 32)
        save_png(tmp_path / manifest.view_path.format(instance=instance_id, azimuth=0), sprite.image)
        save_png(tmp_path / manifest.mask_path.format(instance=instance_id, azimuth=0), sprite.mask)
    (tmp_path / MANIFEST_NAME).write_text(manifest.model_dump_json(), encoding="utf-8")

    store = ViewStore(tmp_path)
    rng = np.random.default_rng(4)
    for _ in range(20):
        sample = sample_tuple_multi(store, "train", rng, views=2)
        assert sample.deltas == [0, 0]
        assert np.array_equal(sample.sources[0], sample.target)


def test_generation_arguments_are_checked(tmp_path):
    with pytest.raises(UsageError):
        generate_dataset(seed=0, instance_count=4, size=32, out_dir=tmp_path)
    with pytest.raises(ConfigurationError):
        generate_dataset(seed=0, instance_count=5, size=48, out_dir=tmp_path)


def test_manifest_with_unknown_keys_is_rejected(dataset_dir, tmp_path):
    data = json.loads((dataset_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    data["colour"] = "blue"
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_manifest(tmp_path)
