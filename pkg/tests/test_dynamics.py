import json

import numpy as np
import pytest

from rnode.autodiff import Tensor
from rnode.dynamics import (LinearField, build_field, eval_f, field_from_dict,
                            field_to_dict, load_field, save_field)
from rnode.errors import ConfigurationError, DomainError


def perturbed(field, scale=0.3, seed=0):
    p = field.parameters()
    field.load_parameters(p + scale * np.random.default_rng(seed).standard_normal(p.size))
    return field


@pytest.mark.parametrize("d,hidden,depth,blocks", [(1, 8, 2, 1), (2, 64, 4, 2), (3, 5, 3, 3)])
def test_identity_init_is_zero_everywhere(d, hidden, depth, blocks):
    field = build_field(d, hidden, depth, blocks, seed=4)
    rng = np.random.default_rng(0)
    for _ in range(100):
        z = Tensor(rng.standard_normal((2, d)) * 5)
        t = rng.uniform(0, field.T)
        assert np.all(eval_f(field, z, t).data == 0.0)


def test_blocks_set_integration_time():
    assert build_field(2, 8, 2, blocks=2).T == 2.0


def test_same_seed_same_parameters():
    a = build_field(2, 16, 3, 2, seed=9).parameters()
    b = build_field(2, 16, 3, 2, seed=9).parameters()
    assert a.tobytes() == b.tobytes()


def test_invalid_sizes():
    with pytest.raises(ConfigurationError):
        build_field(2, 8, 1, 1)
    with pytest.raises(ConfigurationError):
        build_field(0, 8, 2, 1)


def test_linear_block_contrivance():
    A = np.array([[0.5, -1.0], [2.0, 0.1]])
    z = np.array([[1.0, 2.0], [-0.5, 3.0]])
    out = LinearField(A)(Tensor(z), 0.3).data
    np.testing.assert_allclose(out, z @ A.T)


def test_block_selection_matches_standalone_block():
    field = perturbed(build_field(2, 8, 3, 2, seed=1))
    z = Tensor(np.random.default_rng(2).standard_normal((4, 2)))
    early = eval_f(field, z, 0.5).data
    late = eval_f(field, z, 1.5).data
    assert not np.allclose(early, late)
    np.testing.assert_array_equal(early, field.blocks[0](z, 0.5).data)
    np.testing.assert_array_equal(late, field.blocks[1](z, 1.5).data)


def test_block_boundaries():
    field = build_field(2, 4, 2, 3)
    assert field.block_index(0.0) == 0
    assert field.block_index(0.999) == 0
    assert field.block_index(1.0) == 1
    assert field.block_index(3.0) == 2
    for t in np.linspace(0, 3, 61):
        assert sum(lo <= t < hi or (t == 3.0 and k == 2) for lo, hi, k in field.segments()) == 1


def test_time_outside_domain():
    field = build_field(2, 4, 2, 1)
    with pytest.raises(DomainError):
        eval_f(field, Tensor(np.zeros((1, 2))), 1.5)
    with pytest.raises(DomainError):
        eval_f(field, Tensor(np.zeros((1, 2))), -0.1)


def test_parameter_round_trip_bitwise():
    field = perturbed(build_field(3, 7, 3, 2, seed=5))
    p = field.parameters()
    field.load_parameters(p)
    assert field.parameters().tobytes() == p.tobytes()


def test_trailing_zeros_per_block():
    d, hidden, depth, blocks = 2, 6, 3, 2
    field = build_field(d, hidden, depth, blocks, seed=0)
    p = field.parameters()
    per_block = p.size // blocks
    last = hidden * d + d
    for k in range(blocks):
        chunk = p[k * per_block:(k + 1) * per_block]
        assert np.all(chunk[-last:] == 0.0)


def test_parameter_count_by_hand():
    # (3*64 + 64) + 2 * (64*64 + 64) + (64*2 + 2)
    assert build_field(2, 64, 4, 1).parameter_count() == 256 + 8320 + 130 == 8706


def test_load_length_mismatch():
    with pytest.raises(ConfigurationError):
        build_field(2, 4, 2, 1).load_parameters(np.zeros(3))


def test_checkpoint_round_trip(tmp_path):
    field = perturbed(build_field(2, 5, 3, 2, seed=3))
    path = tmp_path / "ckpt.json"
    save_field(field, path)
    doc = json.loads(path.read_text())
    assert doc["meta"] == {"d": 2, "hidden": 5, "depth": 3, "blocks": 2, "seed": 3}
    assert load_field(path).parameters().tobytes() == field.parameters().tobytes()
    assert field_from_dict(field_to_dict(field)).parameters().tobytes() == field.parameters().tobytes()


def test_malformed_checkpoint():
    with pytest.raises(ConfigurationError):
        field_from_dict({"params": []})
