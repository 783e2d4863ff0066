import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagan.generator import (Generator, GeneratorSpec, build_generator, check_gradient_flow, encode_bottleneck,
                             generate, vgg_face_spec)
from dagan.nn import Adam, Conv2d, Tensor, grad, grad_check, precision
from dagan.nn.tensor import DimensionError

TINY = GeneratorSpec(num_blocks_per_side=2, layers_per_block=2, k_list=(4, 4), z_dim=3, image_size=(8, 8, 1))
SMALL = GeneratorSpec(num_blocks_per_side=3, layers_per_block=3, k_list=(6, 6, 6), z_dim=5, image_size=(16, 16, 1))


def _inputs(spec, n=2, seed=0):
    rng = np.random.default_rng(seed)
    h, w, c = spec.image_size
    return rng.random((n, c, h, w)).astype(np.float32), rng.normal(size=(n, spec.z_dim)).astype(np.float32)


def test_spec_invariants():
    with pytest.raises(ValueError, match="divisible"):
        GeneratorSpec(image_size=(24, 24, 1))
    with pytest.raises(ValueError, match="k_list"):
        GeneratorSpec(k_list=(64, 64))
    assert GeneratorSpec().bottleneck_size == (2, 2)
    assert vgg_face_spec().k_list == (64, 64, 128, 128)


def test_default_bottleneck_and_filter_counts():
    gen = Generator(GeneratorSpec(), np.random.default_rng(0))
    x = np.zeros((2, 1, 32, 32), dtype=np.float32)
    assert encode_bottleneck(gen, x).shape == (2, 64, 2, 2)
    convs = [m for name, m in gen.named_modules() if isinstance(m, Conv2d) and not name.startswith("out_conv")]
    assert {c.out_ch for c in convs} == {64}


def test_skip_window_resets_every_skip_distance_layers():
    spec = GeneratorSpec(num_blocks_per_side=1, layers_per_block=6, k_list=(8,), z_dim=2, image_size=(4, 4, 1),
                         skip_distance=2)
    ml = Generator(spec, np.random.default_rng(0)).encoder[0].multi
    # layer inputs: x | x+l1 (window full -> reset) | l2 | l2+l3 (reset) | l4
    assert ml.in_channels == [1, 1 + 8, 8, 16, 8]


def test_output_shape_range_and_determinism():
    gen = build_generator(SMALL, np.random.default_rng(1))
    x, z = _inputs(SMALL, 3)
    a = generate(gen, x, z, training=True, rng=np.random.default_rng(5)).data
    b = generate(gen, x, z, training=True, rng=np.random.default_rng(5)).data
    assert a.shape == x.shape
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_array_equal(a, b)


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 3), st.integers(2, 3), st.integers(1, 2), st.sampled_from([1, 3]))
def test_shape_round_trip_over_specs(blocks, n, mult, channels):
    size = 2 ** blocks * mult * 2
    spec = GeneratorSpec(num_blocks_per_side=blocks, layers_per_block=n, k_list=(3,) * blocks, z_dim=2,
                         image_size=(size, size, channels), skip_distance=1 + (n % 2))
    gen = Generator(spec, np.random.default_rng(0)).eval()
    x, z = _inputs(spec, 2)
    assert gen(Tensor(x), Tensor(z)).shape == x.shape


def test_input_validation_names_axes():
    gen = Generator(TINY, np.random.default_rng(0))
    x, z = _inputs(TINY)
    with pytest.raises(DimensionError):
        gen(Tensor(x[:, :, :4]), Tensor(z))
    with pytest.raises(DimensionError):
        gen(Tensor(x), Tensor(z[:, :2]))


def test_no_dead_parameters():
    for spec in (TINY, SMALL, GeneratorSpec(num_blocks_per_side=2, layers_per_block=4, k_list=(4, 5), z_dim=3,
                                            image_size=(8, 8, 3), skip_distance=3)):
        assert check_gradient_flow(Generator(spec, np.random.default_rng(0))) == []


def test_gradient_flow_check_restores_state():
    gen = Generator(SMALL, np.random.default_rng(0)).eval()
    before = gen.state_dict()
    check_gradient_flow(gen)
    assert not gen.training
    for k, v in gen.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_bottleneck_is_pure_in_x_and_ignores_z():
    gen = Generator(SMALL, np.random.default_rng(0))
    x, _ = _inputs(SMALL)
    np.testing.assert_array_equal(encode_bottleneck(gen, x).data, encode_bottleneck(gen, x).data)


def test_batch_independence_in_eval_mode():
    gen = Generator(SMALL, np.random.default_rng(0)).eval()
    x, z = _inputs(SMALL, 3)
    xt = Tensor(x, requires_grad=True)
    out = gen(xt, Tensor(z))
    (g,) = grad(out[1].sum(), [xt])
    assert np.all(g.data[0] == 0) and np.all(g.data[2] == 0) and np.any(g.data[1] != 0)


def test_long_skip_ablation_changes_output():
    gen = Generator(SMALL, np.random.default_rng(0)).eval()
    x, z = _inputs(SMALL)
    base = gen(Tensor(x), Tensor(z)).data
    for level in range(SMALL.num_blocks_per_side):
        gen.ablate_skips = {level}
        assert not np.allclose(gen(Tensor(x), Tensor(z)).data, base), level
    gen.ablate_skips = set()


def test_latent_changes_output_after_a_training_step():
    gen = Generator(SMALL, np.random.default_rng(0))
    opt = Adam(gen.named_parameters(), lr=1e-3)
    x, z = _inputs(SMALL, 4)
    gen.train().set_rng(np.random.default_rng(0))
    loss = ((gen(Tensor(x), Tensor(z)) - Tensor(x)) ** 2.0).mean()
    loss.backward()
    opt.step()
    gen.eval()
    z2 = z.copy()
    z2[:, 0] += 1.0
    assert not np.allclose(gen(Tensor(x), Tensor(z)).data, gen(Tensor(x), Tensor(z2)).data)


def test_tiny_generator_grad_check_float64():
    with precision(np.float64):
        gen = Generator(TINY, np.random.default_rng(3))
    x, z = _inputs(TINY, 3, seed=4)
    w = np.random.default_rng(5).normal(size=x.shape)

    def f(x, z):
        gen.train().set_rng(np.random.default_rng(0))
        return (gen(x, z) * w).sum()

    rep = grad_check(f, [x.astype(np.float64), z.astype(np.float64)], extra_params=gen.parameters(),
                     max_probes=12, rng=np.random.default_rng(0))
    assert rep.passed, rep.worst
