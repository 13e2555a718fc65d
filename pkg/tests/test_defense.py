import pytest
import torch

from dormant.data import InvalidInputError
from dormant.defense import METHODS, DefenseConfig, _universal_pgd_augment, defend, index_hash


@pytest.fixture
def backdoored(tiny_model):
    return tiny_model.clone(role="backdoored")


@pytest.mark.parametrize("method", METHODS)
def test_defend_returns_new_defended_model(backdoored, tiny_data, method):
    before = {k: v.clone() for k, v in backdoored.state_dict().items()}
    out = defend(backdoored, tiny_data, DefenseConfig(method, epochs=1, batch_size=8, adv_steps=1))
    assert out.role == "defended" and backdoored.role == "backdoored"
    assert out.provenance["defense"]["method"] == method
    for k, v in backdoored.state_dict().items():
        assert torch.equal(v, before[k])
    assert any(not torch.equal(v, out.state_dict()[k]) for k, v in before.items())


def test_defend_is_seeded(backdoored, tiny_data):
    cfg = DefenseConfig("adversarial-finetune", epochs=1, batch_size=8, adv_steps=2, seed=4)
    a, b = defend(backdoored, tiny_data, cfg), defend(backdoored, tiny_data, cfg)
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


def test_different_seeds_give_different_models(backdoored, tiny_data):
    a = defend(backdoored, tiny_data, DefenseConfig(epochs=1, batch_size=8, seed=1))
    b = defend(backdoored, tiny_data, DefenseConfig(epochs=1, batch_size=8, seed=2))
    assert any(not torch.equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())


def test_defend_requires_backdoored_role(tiny_model, tiny_data):
    with pytest.raises(InvalidInputError):
        defend(tiny_model, tiny_data, DefenseConfig())


def test_reinit_head_changes_every_head_weight(backdoored, tiny_data):
    out = defend(backdoored, tiny_data, DefenseConfig("reinit-head-finetune", epochs=1, lr=1e-9, batch_size=8))
    assert (out.head.weight != backdoored.head.weight).all()


def test_universal_augment_doubles_batch_within_budget(tiny_model):
    x, y = torch.rand(6, 3, 8, 8), torch.arange(6) % 4
    xa, ya = _universal_pgd_augment(0.01, 3)(tiny_model, x, y, torch.Generator().manual_seed(0))
    assert xa.shape == (12, 3, 8, 8) and torch.equal(ya, torch.cat([y, y]))
    shift = xa[6:] - x
    assert shift.abs().max() <= 0.01 + 1e-6
    # one perturbation shared by every image wherever clipping is inactive
    inside = ((x > 0.02) & (x < 0.98)).all(dim=0)
    assert torch.allclose(shift[:, inside], shift[0, inside].expand(6, -1), atol=1e-6)


def test_config_validation_and_label():
    with pytest.raises(InvalidInputError):
        DefenseConfig("prune")
    with pytest.raises(InvalidInputError):
        DefenseConfig(clean_fraction=0)
    assert DefenseConfig("finetune").label == "finetune"
    assert DefenseConfig("finetune", seed=3).label == "finetune@3"
    assert index_hash(torch.arange(5)) == index_hash(torch.arange(5)) != index_hash(torch.arange(6))
