import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpnode.episodes import (FAMILY_IDS, EpisodeSampler, SynthConfig, generate_synthetic, load_dataset,
                             sample_episode, write_dataset)
from rpnode.errors import DatasetError, InsufficientSlicesError

SMALL = dict(image_size=(24, 24), n_subjects=9, slices_per_subject=6)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SynthConfig(**SMALL, seed=4))


def test_generation_is_deterministic(dataset):
    again = generate_synthetic(SynthConfig(**SMALL, seed=4))
    for split in dataset.splits:
        for a, b in zip(dataset[split], again[split]):
            assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks)
    other = generate_synthetic(SynthConfig(**SMALL, seed=5))
    assert not np.array_equal(other["train"][0].images, dataset["train"][0].images)


def test_slices_have_labels_and_valid_range(dataset):
    for subjects in dataset.splits.values():
        for s in subjects:
            assert s.images.dtype == np.float32 and s.masks.dtype == np.uint8
            assert s.images.min() >= 0 and s.images.max() <= 1
            assert (s.masks.reshape(len(s), -1).max(axis=1) > 0).all()


def test_novel_classes_only_in_test(dataset):
    train_ids = {FAMILY_IDS[f] for f in SynthConfig().train_families}
    novel_ids = {FAMILY_IDS[f] for f in SynthConfig().novel_families}
    assert set(dataset.classes_in("train")) <= train_ids
    assert set(dataset.classes_in("val")) <= train_ids
    assert set(dataset.classes_in("test")) == novel_ids


def test_subjects_do_not_leak_across_splits(dataset):
    ids = [s.subject_id for subjects in dataset.splits.values() for s in subjects]
    assert len(ids) == len(set(ids))
    flat = {split: {s.images.tobytes() for s in subjects} for split, subjects in dataset.splits.items()}
    assert not flat["train"] & flat["test"]


def test_shifted_split():
    ds = generate_synthetic(SynthConfig(**SMALL, shift_gamma=1.6))
    assert {s.domain_tag for s in ds["test_shifted"]} == {"shifted"}
    assert set(ds.classes_in("test_shifted")) == set(ds.classes_in("test"))


def test_config_rejects_overlapping_families():
    with pytest.raises(DatasetError):
        SynthConfig(train_families=("ellipse", "ring"), novel_families=("ring",))
    with pytest.raises(DatasetError):
        SynthConfig(novel_families=("hexagon",))


def test_round_trip_through_disk(dataset, tmp_path):
    write_dataset(dataset, tmp_path)
    back = load_dataset(tmp_path)
    assert back.image_size == dataset.image_size
    assert back.class_names == dataset.class_names
    assert set(back.splits) == set(dataset.splits)
    for split in dataset.splits:
        for a, b in zip(dataset[split], back[split]):
            assert a.subject_id == b.subject_id and a.domain_tag == b.domain_tag
            assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks)


def test_corrupt_index_names_the_line(dataset, tmp_path):
    write_dataset(dataset, tmp_path)
    idx = tmp_path / "train" / "index.txt"
    lines = idx.read_text().splitlines()
    lines.insert(2, "subject broken notanumber")
    idx.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="line 3"):
        load_dataset(tmp_path)


def test_missing_mask_names_the_image(dataset, tmp_path):
    write_dataset(dataset, tmp_path)
    sid = dataset["val"][0].subject_id
    (tmp_path / "val" / sid / "0.msk").unlink()
    with pytest.raises(DatasetError, match="0.img"):
        load_dataset(tmp_path)


def test_empty_root_is_an_error(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_episode_structure(dataset):
    sampler = EpisodeSampler(dataset["train"])
    ep = sampler.sample(n_way=2, k_shot=2, n_query=3, seed=7)
    assert len(ep.class_ids) == 2 and ep.class_ids == tuple(sorted(ep.class_ids))
    assert ep.support_images.shape == (4, 24, 24) and ep.query_images.shape == (3, 24, 24)
    for m in (*ep.support_masks, *ep.query_masks):
        assert set(np.unique(m).tolist()) <= {0, *ep.class_ids}
    # shot k of class n sits at row n*K + k and contains that class
    for n, c in enumerate(ep.class_ids):
        for k in range(2):
            assert (ep.support_masks[n * 2 + k] == c).any()
    assert not set(ep.support_keys) & set(ep.query_keys)
    assert len(set(ep.support_keys)) == 4


def test_episode_sampling_deterministic(dataset):
    sampler = EpisodeSampler(dataset["test"])
    a, b = sampler.sample(seed=11), sampler.sample(seed=11)
    assert a.support_keys == b.support_keys and a.query_keys == b.query_keys
    assert np.array_equal(a.query_images, b.query_images)


def test_class_filter_and_insufficient(dataset):
    sampler = EpisodeSampler(dataset["test"])
    c = sampler.classes[0]
    ep = sampler.sample(class_filter=[c], seed=0)
    assert ep.class_ids == (c,)
    with pytest.raises(InsufficientSlicesError):
        sampler.sample(n_way=3)
    with pytest.raises(InsufficientSlicesError):
        sampler.sample(k_shot=10_000)


def test_every_support_subset_reachable_with_exact_pool():
    # one class with exactly K slices: every draw must use all of them, with no queries
    ds = generate_synthetic(SynthConfig(**SMALL, seed=1))
    sampler = EpisodeSampler(ds["test"])
    c = sampler.classes[0]
    pool = sorted(int(k) for k in sampler.pools[c])
    K = 3
    sampler.pools = {c: np.asarray(pool[:K])}
    expected = {sampler.keys[k] for k in pool[:K]}
    for seed in range(20):
        ep = sampler.sample(k_shot=K, n_query=0, seed=seed)
        got = {(next(i for i, s in enumerate(sampler.subjects) if s.subject_id == sid), i)
               for sid, i in ep.support_keys}
        assert got == expected
        assert ep.query_images.shape == (0, 24, 24)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 3), q=st.integers(0, 2))
def test_sampled_masks_always_contain_their_class(dataset, seed, k, q):
    ep = sample_episode(dataset["train"], n_way=1, k_shot=k, n_query=q, seed=seed)
    c = ep.class_ids[0]
    assert all((m == c).any() for m in ep.support_masks)
    assert all((m == c).any() for m in ep.query_masks)
