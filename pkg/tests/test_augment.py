import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oct_layertrace.augment import (
    AugmentParams,
    AugmentSpec,
    Sample,
    apply_augmentations,
    column_roll,
    consistency_violations,
    hflip,
    roll_displacement,
    transform,
    vflip,
)
from oct_layertrace.data import PhantomSpec, encode_gt, generate_phantom, raster
from oct_layertrace.exceptions import ConfigError


@pytest.fixture(scope="module")
def phantom():
    spec = PhantomSpec(height=96, width=160, n_slices=2)
    return generate_phantom(spec, np.random.default_rng(2))


def sample_of(vol, i=0):
    return Sample.from_boundaries(vol.images[i] / 255.0, vol.boundaries[i])


class TestSpec:
    def test_defaults(self):
        s = AugmentSpec()
        assert (s.rotation, s.scale, s.hflip_prob, s.vflip_prob, s.shift) == (5.0, (0.95, 1.05), 0.5, 0.5, 10.0)
        assert (s.roll_amplitude, s.roll_period) == (15.0, 200.0)

    @pytest.mark.parametrize("bad", [{"hflip_prob": 1.5}, {"scale": (1.1, 0.9)}, {"rotation": float("nan")},
                                     {"roll_period": 0.0}, {"shift": -1.0}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            AugmentSpec(**bad)

    def test_dict_round_trip_and_unknown_field(self):
        s = AugmentSpec(rotation=3.0, seed=4)
        assert AugmentSpec.from_dict(s.to_dict()) == s
        with pytest.raises(ConfigError):
            AugmentSpec.from_dict({"rotate": 3})

    def test_scaled_to(self):
        s = AugmentSpec().scaled_to(150, 400)
        assert (s.shift, s.roll_amplitude, s.roll_period) == (5.0, 7.5, 100.0)


class TestColumnRoll:
    def test_zero_amplitude_is_identity(self, phantom):
        img = phantom.images[0]
        L = phantom.boundaries[0]
        regions, edge = encode_gt(L, 96)
        out_img, out_L, out_edge, out_reg, wrapped = column_roll(img, L, 0, 200, 0.3, edge, regions)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_L, L)
        np.testing.assert_array_equal(out_edge, edge)
        np.testing.assert_array_equal(out_reg, regions)
        assert not wrapped.any()

    def test_displacement_formula(self):
        d = roll_displacement(400, 15, 200, 0.5)
        x = np.arange(400)
        np.testing.assert_array_equal(d, np.rint(15 * np.sin(2 * np.pi * x / 200 + 0.5)))

    def test_single_column_shift_of_three(self):
        # phase chosen so that d(0) = round(5 * sin(pi/2 - small)) = 5 ... use amplitude 3 at the crest
        img = np.zeros((200, 1))
        img[100, 0] = 1.0
        L = np.array([[100.0]])
        out_img, out_L, _, _, _ = column_roll(img, L, 3, 4, np.pi / 2)
        assert out_L[0, 0] == 103.0
        assert out_img[103, 0] == 1.0

    def test_wrap_is_modular_and_flagged(self):
        L = np.array([[1.0, 5.0]])
        img = np.zeros((10, 2))
        _, out_L, _, _, wrapped = column_roll(img, L, 3, 4, -np.pi / 2)  # d = -3 for x = 0
        assert out_L[0, 0] == 8.0 and wrapped[0]

    def test_dual_path_oracle(self, phantom):
        rng = np.random.default_rng(0)
        for _ in range(20):
            L = phantom.boundaries[int(rng.integers(2))]
            regions, edge = encode_gt(L, 96)
            amp, period, phase = rng.uniform(0, 40), rng.uniform(20, 300), rng.uniform(0, 6.3)
            _, L2, edge_rolled, reg_rolled, wrapped = column_roll(
                phantom.images[0], L, amp, period, phase, edge, regions)
            keep = ~wrapped
            reg_direct, edge_direct = encode_gt(np.where(keep[None], L2, np.nan), 96, keep)
            np.testing.assert_array_equal(edge_direct[:, keep], edge_rolled[:, keep])
            # Region masks agree wherever the rolled pixel did not wrap around.
            src = np.arange(96)[:, None] - roll_displacement(160, amp, period, phase)[None]
            same = ((src >= 0) & (src < 96))[:, keep]
            np.testing.assert_array_equal(reg_direct[:, :, keep][:, same], reg_rolled[:, :, keep][:, same])


class TestFlips:
    def test_hflip_definition(self, phantom):
        s = sample_of(phantom)
        out = hflip(s)
        np.testing.assert_array_equal(out.boundaries, s.boundaries[:, ::-1])
        np.testing.assert_array_equal(out.image, s.image[:, ::-1])

    def test_vflip_reverses_order_and_keeps_consistency(self, phantom):
        s = sample_of(phantom)
        out = vflip(s)
        assert (np.diff(out.boundaries, axis=0) >= 0).all()
        np.testing.assert_array_equal(raster(out.boundaries[0]), 96 - raster(s.boundaries[-1]))
        np.testing.assert_array_equal(out.regions()[0], s.regions()[-1][::-1])
        assert consistency_violations(out) == 0

    def test_vflip_half_row_coordinates(self):
        L = np.array([[2.5, 3.0], [6.5, 7.49]])
        s = Sample.from_boundaries(np.zeros((10, 2)), L)
        out = vflip(s)
        assert consistency_violations(out) == 0
        np.testing.assert_array_equal(raster(out.boundaries), 10 - raster(L[::-1]))

    def test_double_flip_is_identity(self, phantom):
        s = sample_of(phantom)
        for flip in (hflip, vflip):
            twice = flip(flip(s))
            np.testing.assert_array_equal(twice.image, s.image)
            np.testing.assert_array_equal(twice.labels, s.labels)
            np.testing.assert_array_equal(raster(twice.boundaries), raster(s.boundaries))


class TestApply:
    def test_identity_spec(self, phantom):
        s = sample_of(phantom)
        out = apply_augmentations(s, AugmentSpec.identity(), np.random.default_rng(0))
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.boundaries, s.boundaries)

    def test_seed_determinism(self, phantom):
        s = sample_of(phantom)
        a = apply_augmentations(s, AugmentSpec(), np.random.default_rng(3))
        b = apply_augmentations(s, AugmentSpec(), np.random.default_rng(3))
        assert a.params == b.params
        np.testing.assert_array_equal(a.image, b.image)

    def test_integer_shift_moves_coordinates_exactly(self, phantom):
        s = sample_of(phantom)
        out = transform(s, AugmentParams(dy=4, dx=-3), AugmentSpec.identity())
        np.testing.assert_array_equal(out.boundaries[:, :-3], s.boundaries[:, 3:] + 4)
        assert not out.valid[-3:].any()
        assert consistency_violations(out) == 0

    def test_rotation_reextracts_integer_rows(self, phantom):
        s = sample_of(phantom)
        out = transform(s, AugmentParams(angle=4.0, scale=1.03), AugmentSpec.identity())
        v = out.valid
        assert v.mean() > 0.9
        np.testing.assert_array_equal(out.boundaries[:, v], np.round(out.boundaries[:, v]))
        assert consistency_violations(out) == 0

    def test_rejection_keeps_half_the_columns(self, phantom):
        s = sample_of(phantom)
        harsh = AugmentSpec(rotation=40.0, roll_amplitude=60.0, max_tries=50)
        rng = np.random.default_rng(0)
        for _ in range(10):
            out = apply_augmentations(s, harsh, rng)
            assert out.valid.sum() >= 0.5 * s.valid.sum()

    def test_wraps_are_counted(self, phantom):
        s = sample_of(phantom)
        out = transform(s, AugmentParams(roll_phase=0.0), AugmentSpec.identity(roll_amplitude=60.0,
                                                                                roll_period=160.0))
        assert out.wrapped_columns > 0
        assert consistency_violations(out) == 0

    def test_default_roll_on_phantom_never_wraps(self, phantom):
        s = sample_of(phantom)
        spec = AugmentSpec.identity(roll_amplitude=15.0).scaled_to(96, 160)
        for phase in np.linspace(0, 2 * np.pi, 9):
            assert transform(s, AugmentParams(roll_phase=float(phase)), spec).wrapped_columns == 0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_augmentations_preserve_consistency(seed):
    rng = np.random.default_rng(seed)
    spec = PhantomSpec(n_boundaries=int(rng.integers(1, 9)), height=48, width=64, n_slices=1, min_gap=1.0)
    vol = generate_phantom(spec, rng)
    s = Sample.from_boundaries(vol.images[0] / 255.0, vol.boundaries[0])
    aug = dataclasses.replace(AugmentSpec(rotation=8.0, roll_amplitude=6.0, roll_period=60.0, shift=5.0))
    out = apply_augmentations(s, aug, rng)
    assert consistency_violations(out) == 0
    assert (np.diff(out.boundaries[:, out.valid], axis=0) >= 0).all()
