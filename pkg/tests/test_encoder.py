import numpy as np
import pytest

from darn import autodiff as ad
from darn import encoder as enc
from darn.errors import GeometryError, ShapeError


def closed_form_count(in_channels, widths):
    """Hand count of the declared layer stack: per stage two 3x3 convs
    (stride 2 then stride 1), each with bias."""
    total = 0
    cin = in_channels
    for cout in widths:
        total += 9 * cin * cout + cout      # conv1
        total += 9 * cout * cout + cout     # conv2
        cin = cout
    return total


class TestBuildEncoder:
    def test_same_seed_same_checksum(self):
        a = enc.build_encoder(7, 3)
        b = enc.build_encoder(7, 3)
        assert a.checksum() == b.checksum()

    def test_different_seed_different_checksum(self):
        assert enc.build_encoder(7, 3).checksum() != enc.build_encoder(8, 3).checksum()

    def test_param_count_closed_form(self):
        e = enc.build_encoder(42, 3, (16, 32, 64, 128))
        assert e.param_count() == closed_form_count(3, (16, 32, 64, 128)) == 293520

    def test_bad_widths(self):
        with pytest.raises(ShapeError):
            enc.build_encoder(0, 3, (16, 0, 64, 128))
        with pytest.raises(ShapeError):
            enc.build_encoder(0, 3, (16, -1, 64, 128))

    def test_frozen_flags(self):
        e = enc.build_encoder(1, 3)
        assert all(not p.requires_grad for p in e.params.values())
        e.set_frozen(False)
        assert all(p.requires_grad for p in e.params.values())


class TestEncode:
    def test_pyramid_shapes(self):
        e = enc.build_encoder(42, 3)
        pyr = enc.encode(e, ad.Tensor(np.zeros((1, 3, 32, 32))))
        shapes = [f.shape for f in pyr.levels]
        assert shapes == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]

    def test_zero_input_zero_biases(self):
        e = enc.build_encoder(42, 3)
        pyr = enc.encode(e, ad.Tensor(np.zeros((1, 3, 32, 32))))
        for f in pyr.levels:
            assert np.array_equal(f.data, np.zeros_like(f.data))

    def test_deterministic_pyramid(self):
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32))
        e1 = enc.build_encoder(9, 3)
        e2 = enc.build_encoder(9, 3)
        p1 = enc.encode(e1, ad.Tensor(x))
        p2 = enc.encode(e2, ad.Tensor(x))
        for a, b in zip(p1.levels, p2.levels):
            assert np.array_equal(a.data, b.data)

    def test_extent_check(self):
        e = enc.build_encoder(1, 3)
        with pytest.raises(GeometryError):
            enc.encode(e, ad.Tensor(np.zeros((1, 3, 30, 32))))

    def test_frozen_mode_tracks_input_but_not_weights(self):
        e = enc.build_encoder(3, 3)
        x = ad.Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 32, 32)),
                      requires_grad=True)
        with ad.Tape() as tape:
            pyr = enc.encode(e, x)
            loss = ad.tsum(ad.gap(pyr.f4))
        tape.backward(loss)
        assert x.grad is not None and np.abs(x.grad).sum() > 0
        assert all(p.grad is None for p in e.params.values())

    def test_unfrozen_mode_gradients_reach_weights(self):
        e = enc.build_encoder(3, 3, frozen=False)
        x = ad.Tensor(np.random.default_rng(2).uniform(0.2, 1, (1, 3, 32, 32)))
        with ad.Tape() as tape:
            pyr = enc.encode(e, x)
            loss = ad.tsum(ad.gap(pyr.f4))
        tape.backward(loss)
        nonzero = [n for n, p in e.params.items()
                   if p.grad is not None and np.abs(p.grad).sum() > 0]
        assert "enc.s1.conv1.w" in nonzero and "enc.s4.conv2.w" in nonzero
