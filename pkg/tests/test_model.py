import numpy as np
import pytest

from see_classifiers import kernels as K
from see_classifiers import model as M
from see_classifiers.errors import ConfigurationError, ShapeError, UsageError

from conftest import small_spec


def default_spec(layers=(2, 4), fractions=(0.4, 0.7)):
    return M.ArchitectureSpec.build(4, 128, 6, layers, fractions)


def test_shape_arithmetic_exits_after_layers_2_and_4():
    # slices 51 / 38 / 39 samples; trunk lengths worked out by hand for kernel 3, pool 2/2
    sh = M.resolve_shapes(default_spec())
    assert sh.slice_lengths == [51, 38, 39]
    assert sh.trunk == [(51, 49, 24), (24, 22, 11), (20, 18, 9), (9, 7, 3), (5, 3, 1)]
    # late block 1: conv 36, pooled by the trunk's 4x downsampling; block 2 by 16x
    assert sh.late == [(38, 36, 9, 4), (39, 37, 2, 16)]
    # exit 1 sees the layer-2 map of the first slice only
    assert sh.heads[0] == (11, 9, 4, 32, 3, 2)
    # exit 2 head windows shrink to fit a 3-sample map
    assert sh.heads[1] == (3, 1, 1, 8, 3, 1)
    assert sh.heads[2] == (1, 1, 1, 32, 0, 0)


def test_prefix_length_rounding():
    assert M.prefix_length(0.29, 100) == 29
    assert M.prefix_length(0.7, 10) == 7
    assert M.prefix_length(1.0, 128) == 128


@pytest.mark.parametrize("layers,fractions", [((2, 2), (0.4, 0.7)), ((3, 2), (0.4, 0.7)), ((2, 3), (0.7, 0.4)),
                                              ((5,), (0.5,)), ((1, 2, 3), (0.2, 0.4, 0.6))])
def test_invalid_exit_layouts_rejected(layers, fractions):
    with pytest.raises(ConfigurationError):
        M.assemble(default_spec(layers, fractions))


def test_infeasible_shape_names_layer():
    spec = M.ArchitectureSpec.build(4, 128, 6, (4,), (0.1,))
    with pytest.raises(ShapeError, match="trunk layer"):
        M.assemble(spec)
    spec = M.ArchitectureSpec.build(4, 128, 6, (1,), (0.99,))
    with pytest.raises(ShapeError, match="late-input block 1"):
        M.assemble(spec)


def test_terminal_exit_rules():
    spec = default_spec()
    bad = M.ArchitectureSpec(4, 128, 6, spec.exits[:-1] + (M.ExitSpec(5, 1.0, 0.3),))
    with pytest.raises(ConfigurationError):
        bad.validate()


def reference_baseline_logits(model, x):
    """Plain loop implementation of a terminal-only CNN."""
    spec = model.spec
    h = (x - model.input_mean[:, None]) / model.input_std[:, None]
    for p in model.trunk:
        cout, cin, k = p.weights.shape
        conv = np.array([[p.bias[o] + sum(p.weights[o, i, j] * h[i, t + j] for i in range(cin) for j in range(k))
                          for t in range(h.shape[1] - k + 1)] for o in range(cout)])
        n_pool = (conv.shape[1] - spec.pool_width) // spec.pool_stride + 1
        pooled = np.array([[conv[o, t * spec.pool_stride : t * spec.pool_stride + spec.pool_width].max()
                            for t in range(n_pool)] for o in range(cout)])
        h = np.maximum(pooled, 0)
    head = model.heads[-1]
    a = np.maximum(head.fc1.weights @ h.ravel() + head.fc1.bias, 0)
    return head.fc2.weights @ a + head.fc2.bias


def test_zero_exit_model_is_plain_cnn(rng):
    spec = M.ArchitectureSpec.build(3, 64, 4, (), (), trunk_channels=(4, 4, 6), fc_hidden=8)
    model = M.assemble(spec, seed=2)
    assert model.num_exits == 1 and model.late == []
    x = rng.normal(size=(3, 64))
    (z,) = M.forward_all_exits(model, x)
    np.testing.assert_allclose(z, reference_baseline_logits(model, x), rtol=1e-10, atol=1e-12)


def test_without_early_exits_keeps_trunk():
    spec = default_spec()
    base = M.without_early_exits(spec)
    assert base.num_exits == 1 and base.trunk_channels == spec.trunk_channels
    a, b = M.assemble(spec), M.assemble(base)
    assert M.parameter_count(a) > M.parameter_count(b)
    for pa, pb in zip(a.trunk, b.trunk):
        assert pa.weights.shape == pb.weights.shape


def test_logit_dims_and_zero_case(rng):
    model = M.assemble(default_spec(), seed=1)
    logits = M.forward_all_exits(model, rng.normal(size=(4, 128)))
    assert [z.shape for z in logits] == [(6,)] * 3
    for arr in model.parameters().values():
        if arr.ndim == 1:
            arr[...] = 0.0
    assert all(not z.any() for z in M.forward_all_exits(model, np.zeros((4, 128))))


def test_staged_equals_full_forward_bitwise(rng):
    model = M.assemble(default_spec((2, 3)), seed=4)
    x = rng.normal(size=(4, 128))
    full = M.forward_all_exits(model, x)
    slices = M.split_segment(model.spec, x)
    for n in range(1, 4):
        np.testing.assert_array_equal(M.forward_to_exit(model, slices, n), full[n - 1])
    run = model.stage_runner()
    for n, s in enumerate(slices):
        np.testing.assert_array_equal(run.step(s), K.softmax(full[n]))
    batch = M.forward_all_exits(model, np.stack([x, x + 1]))
    for n in range(3):
        np.testing.assert_array_equal(batch[n][0], full[n])


def test_replay_is_deterministic(rng):
    x = rng.normal(size=(4, 128))
    a = M.forward_all_exits(M.assemble(default_spec(), seed=9), x)
    b = M.forward_all_exits(M.assemble(default_spec(), seed=9), x)
    for za, zb in zip(a, b):
        np.testing.assert_array_equal(za, zb)


def test_missing_or_misshapen_slices(rng):
    model = M.assemble(default_spec(), seed=1)
    slices = M.split_segment(model.spec, rng.normal(size=(4, 128)))
    with pytest.raises(UsageError):
        M.forward_to_exit(model, slices[:1], 2)
    with pytest.raises(UsageError):
        M.forward_to_exit(model, slices, 4)
    with pytest.raises(ShapeError):
        M.forward_to_exit(model, [slices[0][:, :-1]], 1)
    with pytest.raises(ShapeError):
        M.split_segment(model.spec, np.zeros((4, 100)))


def test_concat_lengths_match_static_shapes(rng):
    model = M.assemble(default_spec(), seed=1)
    _, tape = M.forward_all_exits(model, rng.normal(size=(4, 128)), record=True)
    sh = model.shapes
    for n, stage in enumerate(tape["stages"][1:]):
        trunk_len, late_len = stage["concat"]
        assert late_len == sh.late[n][2]
        first_layer = model.spec.exits[n].attach_after_layer
        assert trunk_len == sh.trunk[first_layer - 1][2]
        assert trunk_len + late_len == sh.trunk[first_layer][0]


def test_backward_without_tape():
    model = M.assemble(default_spec())
    with pytest.raises(UsageError):
        M.backward(model, None, [np.zeros(6)] * 3)


def test_gradient_linearity_over_exits(rng):
    model = M.assemble(small_spec(2), seed=3)
    x = rng.normal(size=(5, 2, 48))
    logits, tape = M.forward_all_exits(model, x, record=True)
    dl = [rng.normal(size=z.shape) for z in logits]
    total = M.backward(model, tape, dl)
    parts = []
    for n in range(3):
        only = [d if k == n else np.zeros_like(d) for k, d in enumerate(dl)]
        parts.append(M.backward(model, tape, only))
    for name, g in total.items():
        np.testing.assert_allclose(g, sum(p[name] for p in parts), rtol=1e-10, atol=1e-13)


def test_parameter_accounting():
    model = M.assemble(default_spec())
    br = M.parameter_breakdown(model)
    assert br["total"] == sum(a.size for a in model.parameters().values())
    assert br["baseline"] + br["see_additions"] == br["total"]
    assert M.memory_kb(model) == br["total"] * 8 / 1024
    base = M.assemble(M.without_early_exits(model.spec))
    assert M.parameter_count(model) >= M.parameter_count(base)
    macs = M.exit_macs(model)
    assert macs == sorted(macs) and macs[0] > 0


def test_serialization_round_trip_bit_exact(tmp_path, rng):
    model = M.assemble(default_spec(), seed=11)
    model.input_mean = rng.normal(size=4)
    model.input_std = rng.uniform(0.5, 2, size=4)
    p1 = tmp_path / "a.json"
    M.save_model(model, p1)
    loaded = M.load_model(p1)
    assert loaded.spec == model.spec
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[k], v)
    np.testing.assert_array_equal(loaded.input_std, model.input_std)
    p2 = tmp_path / "b.json"
    M.save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_wrong_format(tmp_path):
    d = M.to_dict(M.assemble(default_spec()))
    with pytest.raises(ConfigurationError):
        M.from_dict({**d, "version": 99})
    with pytest.raises(ConfigurationError):
        M.from_dict({**d, "format": "other"})
