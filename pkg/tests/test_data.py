import pytest
import torch

from dormant.data import (
    ImageDataset,
    InvalidInputError,
    PoisonConfig,
    SyntheticSpec,
    TriggerSpec,
    apply_trigger,
    attacker_subset,
    make_trigger,
    poison_dataset,
    poisoned_pool,
    subset_indices,
    synthetic_splits,
)
from dormant.defense import clean_subset


def test_patch_trigger_overwrites_only_masked_pixels():
    trig = make_trigger("badnets", (3, 8, 8), target=2, size=3)
    x = torch.full((2, 3, 8, 8), 0.5)
    out = apply_trigger(x, trig)
    assert torch.equal(out[:, :, :5, :], x[:, :, :5, :])
    assert torch.equal(out[:, :, 5:, 5:], trig.pattern[:, 5:, 5:].expand(2, -1, -1, -1))


def test_blend_trigger_is_convex_combination(blend):
    x = torch.rand(3, 3, 8, 8)
    expected = 0.8 * x + 0.2 * blend.pattern
    assert torch.allclose(apply_trigger(x, blend), expected, atol=1e-7)


def test_apply_trigger_adds_delta_and_clips(blend):
    x = torch.rand(4, 3, 8, 8)
    out = apply_trigger(x, blend, torch.full((3, 8, 8), 2.0))
    assert torch.equal(out, torch.ones_like(out))
    assert apply_trigger(x, blend, -torch.ones(3, 8, 8)).min() == 0


def test_apply_trigger_shape_mismatch(blend):
    with pytest.raises(InvalidInputError):
        apply_trigger(torch.rand(2, 3, 16, 16), blend)
    with pytest.raises(InvalidInputError):
        apply_trigger(torch.rand(2, 3, 8, 8), blend, torch.zeros(3, 4, 4))


def test_trigger_validation():
    with pytest.raises(InvalidInputError):
        TriggerSpec("blend", torch.rand(3, 4, 4), torch.ones(4, 4), 0, alpha=0.0)
    with pytest.raises(InvalidInputError):
        TriggerSpec("patch", torch.rand(3, 4, 4), torch.zeros(4, 4), 0)
    with pytest.raises(InvalidInputError):
        TriggerSpec("stamp", torch.rand(3, 4, 4), torch.ones(4, 4), 0)


def test_trigger_round_trip(tmp_path, blend):
    blend.save(tmp_path / "t.json")
    back = TriggerSpec.load(tmp_path / "t.json")
    assert torch.equal(back.pattern, blend.pattern) and back.alpha == blend.alpha and back.target == 0


def test_poison_count_and_relabel(tiny_data, blend):
    ds, idx = poison_dataset(tiny_data, blend, PoisonConfig(ratio=0.10, target=0, seed=4))
    assert len(idx) == 4 and torch.equal(idx, idx.sort().values)
    assert ds.poison_flags.sum() == 4 and bool(ds.poison_flags[idx].all())
    assert (ds.labels[idx] == 0).all()
    assert torch.equal(ds.images[idx], apply_trigger(tiny_data.images[idx], blend))
    rest = ~ds.poison_flags
    assert torch.equal(ds.images[rest], tiny_data.images[rest])


def test_poison_counts_by_enumeration():
    # floor(ratio * n) for the desk-scale and the reference sizes
    assert len(subset_indices(5000, 0.10, 0)) == 500
    assert len(subset_indices(50000, 0.02, 0)) == 1000
    assert len(subset_indices(5000, 0.05, 0)) == 250


def test_poison_rejects_empty_selection(tiny_data, blend):
    with pytest.raises(InvalidInputError):
        poison_dataset(tiny_data, blend, PoisonConfig(ratio=0.01))
    with pytest.raises(InvalidInputError):
        PoisonConfig(ratio=0.0)


def test_poison_is_seeded(tiny_data, blend):
    a = poison_dataset(tiny_data, blend, PoisonConfig(seed=1))[1]
    b = poison_dataset(tiny_data, blend, PoisonConfig(seed=1))[1]
    assert torch.equal(a, b)


def test_subset_indices_full_and_sorted():
    assert torch.equal(subset_indices(10, 1.0, 3), torch.arange(10))
    idx = subset_indices(100, 0.3, 7)
    assert len(idx) == 30 and len(set(idx.tolist())) == 30 and torch.equal(idx, idx.sort().values)


def test_attacker_pool_and_subset(tiny_data, blend):
    pool = poisoned_pool(tiny_data, blend)
    assert (pool.labels == 0).all() and bool(pool.poison_flags.all())
    sub = attacker_subset(pool, 0.25, seed=2)
    assert len(sub) == 10 and sub.split == "attacker-poison"


def test_clean_subset_size(tiny_data):
    clean, idx = clean_subset(tiny_data, 0.5, seed=0)
    assert len(clean) == 20 and clean.split == "defense-clean"


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        ImageDataset(torch.rand(2, 3, 4, 4) * 2, torch.zeros(2, dtype=torch.long), 2)
    with pytest.raises(InvalidInputError):
        ImageDataset(torch.rand(2, 3, 4, 4), torch.tensor([0, 5]), 2)
    with pytest.raises(InvalidInputError):
        ImageDataset(torch.rand(2, 3, 4, 4), torch.tensor([0, 1]), 2, split="val")


def test_dataset_round_trip(tmp_path, tiny_data, blend):
    ds, _ = poison_dataset(tiny_data, blend, PoisonConfig())
    ds.save(tmp_path / "d", seed=3, trigger=blend)
    back = ImageDataset.load(tmp_path / "d")
    assert torch.equal(back.images, ds.images) and torch.equal(back.poison_flags, ds.poison_flags)


def test_synthetic_splits_deterministic():
    spec = SyntheticSpec(n_train=30, n_test=10, size=16, seed=5)
    a, b = synthetic_splits(spec), synthetic_splits(spec)
    assert torch.equal(a[0].images, b[0].images) and torch.equal(a[1].labels, b[1].labels)
    assert a[0].image_shape == (3, 16, 16)
    assert 0 <= a[0].images.min() and a[0].images.max() <= 1
