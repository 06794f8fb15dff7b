from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from intflow.fxcore import (
    FixedScalar,
    QTensor,
    RepresentationError,
    ShapeError,
    add,
    clip,
    clip_symmetric,
    col2im,
    conv2d,
    d,
    from_fixed,
    hadamard,
    im2col,
    is_on_grid,
    matmul,
    q_direct,
    round_half_away,
    to_fixed,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
widths = st.integers(min_value=2, max_value=30)


@pytest.mark.parametrize("k,expected", [(8, 0.0078125), (1, 1.0), (16, 2.0**-15), (24, 2.0**-23)])
def test_d(k, expected):
    assert d(k) == expected


def test_d_rejects_zero_width():
    with pytest.raises(ValueError):
        d(0)


@pytest.mark.parametrize(
    "x,k,expected",
    [(0.0, 8, 0.0), (0.5, 8, 0.5), (0.3, 3, 0.25), (0.3, 8, 38 / 128), (-0.3, 8, -38 / 128)],
)
def test_q_direct_examples(x, k, expected):
    assert q_direct(np.array([x]), k)[0] == expected


@pytest.mark.parametrize("m", [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])
def test_q_direct_ties_round_away_from_zero(m):
    k = 8
    x = m / 2 ** (k - 1)
    got = q_direct(np.array([x]), k)[0] * 2 ** (k - 1)
    assert got == np.sign(m) * np.ceil(abs(m))


def test_round_half_away_near_half():
    # floor(x + 0.5) would round this up
    x = np.nextafter(0.5, 0.0)
    assert round_half_away(np.array([x, -x]))[0] == 0.0
    assert round_half_away(np.array([x, -x]))[1] == 0.0


def test_round_half_away_has_no_negative_zero():
    r = round_half_away(np.array([-0.2]))
    assert not np.signbit(r[0])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_q_direct_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        q_direct(np.array([0.0, bad]), 8)


def test_q_direct_rejects_narrow_width():
    with pytest.raises(ValueError):
        q_direct(np.array([0.1]), 1)


@given(finite, widths)
def test_q_direct_idempotent(x, k):
    once = q_direct(np.array([x]), k)
    assert np.array_equal(q_direct(once, k), once)


@given(finite, widths)
def test_q_direct_error_bound(x, k):
    q = q_direct(np.array([x]), k)[0]
    assert abs(Fraction(q) - Fraction(x)) <= Fraction(1, 2**k)


@given(finite, widths)
def test_q_direct_matches_oracle(x, k):
    assert Fraction(q_direct(np.array([x]), k)[0]) == oracles.q_direct(Fraction(x), k)


@given(finite, widths)
def test_q_direct_lands_on_grid(x, k):
    assert is_on_grid(q_direct(np.array([x]), k), -(k - 1))


def test_clip_examples():
    assert clip(np.array([5.0]), -1, 1)[0] == 1.0
    assert clip(np.array([0.3]), -1, 1)[0] == 0.3
    b = 1 - 1 / 128
    assert np.array_equal(clip(np.array([-2.0, 0.0, 2.0]), -b, b), [-127 / 128, 0.0, 127 / 128])


def test_clip_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        clip(np.array([0.0]), 1, -1)


def test_clip_symmetric_excludes_minus_one():
    assert clip_symmetric(np.array([-1.0]), 8)[0] == -127 / 128


class TestFixedScalar:
    def test_equal_values_at_different_resolution(self):
        assert FixedScalar(1, -1) == FixedScalar(64, -7)
        assert hash(FixedScalar(1, -1)) == hash(FixedScalar(64, -7))

    def test_value_is_exact(self):
        assert FixedScalar(26, -9).value == Fraction(26, 512)
        assert float(FixedScalar(3, -2)) == 0.75

    def test_with_exp_refuses_to_round(self):
        assert FixedScalar(26, -9).with_exp(-10).mantissa == 52
        assert FixedScalar(26, -9).with_exp(-8).mantissa == 13
        with pytest.raises(RepresentationError):
            FixedScalar(13, -8).with_exp(-7)

    def test_bits_and_normalized(self):
        assert FixedScalar(127, 0).bits() == 8
        assert FixedScalar(128, -9).normalized() == FixedScalar(1, -2)
        assert FixedScalar(128, -9).normalized().mantissa == 1

    def test_from_float(self):
        assert FixedScalar.from_float(0.75, -2) == FixedScalar(3, -2)
        with pytest.raises(RepresentationError):
            FixedScalar.from_float(0.1, -10)


class TestQTensor:
    def test_range_is_symmetric(self):
        QTensor(np.array([127, -127]), -7, 8)
        with pytest.raises(RepresentationError, match="index"):
            QTensor(np.array([0, -128]), -7, 8)

    def test_rejects_float_mantissas(self):
        with pytest.raises(TypeError):
            QTensor(np.array([0.5]), -7, 8)

    def test_is_immutable(self):
        q = QTensor(np.array([1, 2]), -7, 8)
        with pytest.raises(ValueError):
            q.mantissas[0] = 3

    def test_storage_dtype(self):
        assert QTensor(np.array([1]), -23, 24).mantissas.dtype == np.int32
        assert QTensor(np.array([1]), -40, 41).mantissas.dtype == np.int64


@pytest.mark.parametrize("x,k,m,e", [(0.5, 8, 64, -7), (127 / 128, 8, 127, -7), (-1 + 2**-23, 24, -(2**23 - 1), -23)])
def test_to_fixed_examples(x, k, m, e):
    q = to_fixed(np.array([x]), k)
    assert q.mantissas[0] == m and q.resolution_exp == e


def test_to_fixed_off_grid_names_index():
    with pytest.raises(RepresentationError, match=r"\(1,\)"):
        to_fixed(np.array([0.5, 0.3]), 8)


def test_to_fixed_out_of_range():
    with pytest.raises(RepresentationError, match="range"):
        to_fixed(np.array([1.0]), 8)


@given(st.lists(st.integers(-(2**23) + 1, 2**23 - 1), min_size=1, max_size=20))
def test_fixed_round_trip(ms):
    x = np.ldexp(np.array(ms, dtype=np.float64), -23)
    assert np.array_equal(from_fixed(to_fixed(x, 24)), x)


class TestKernels:
    def test_hadamard(self):
        a = to_fixed(np.array([0.5]), 8)
        assert hadamard(a, a)[0] == 0.25

    def test_matmul_example(self):
        a = to_fixed(np.array([[2 / 128]]), 8)
        b = to_fixed(np.array([[3 / 128]]), 8)
        assert matmul(a, b)[0, 0] == 6 / 16384

    def test_add_mixed_resolution(self):
        a = to_fixed(np.array([0.5]), 8)
        b = to_fixed(np.array([2.0**-20]), 24)
        assert add(a, b)[0] == 0.5 + 2.0**-20

    def test_shape_errors(self):
        a = to_fixed(np.zeros((2, 3)), 8)
        with pytest.raises(ShapeError):
            matmul(a, a)
        with pytest.raises(ShapeError):
            hadamard(a, to_fixed(np.zeros(3), 8))

    def test_matmul_exact_against_python_ints(self, rng):
        am = rng.integers(-(2**23) + 1, 2**23, size=(5, 300))
        bm = rng.integers(-(2**23) + 1, 2**23, size=(300, 4))
        got = matmul(QTensor(am, -23, 24), QTensor(bm, -23, 24))
        for i in range(5):
            for j in range(4):
                exact = sum(int(a) * int(b) for a, b in zip(am[i], bm[:, j]))
                assert Fraction(got[i, j]) == Fraction(exact, 2**46)

    def test_conv_identity_kernel(self, rng):
        x = to_fixed(q_direct(rng.uniform(-0.9, 0.9, (2, 3, 5, 5)), 8), 8)
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3)] = 0.5
        out = conv2d(x, to_fixed(w, 8))
        assert np.array_equal(out, 0.5 * x.values)

    def test_conv_matches_direct_loop(self, rng):
        x = to_fixed(q_direct(rng.uniform(-0.9, 0.9, (2, 2, 6, 6)), 8), 8)
        w = to_fixed(q_direct(rng.uniform(-0.9, 0.9, (3, 2, 3, 3)), 8), 8)
        out = conv2d(x, w, stride=2, pad=1)
        xp = np.pad(x.values, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros(out.shape)
        for n in range(2):
            for o in range(3):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w.values[o])
        assert np.array_equal(out, ref)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_col2im_is_adjoint_of_im2col(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 7))
        cols = im2col(x, 3, 3, stride, pad)
        y = rng.normal(size=cols.shape)
        lhs = np.sum(cols * y)
        rhs = np.sum(x * col2im(y, x.shape, 3, 3, stride, pad))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_accumulator_headroom_for_large_fan_in():
    # worst case for the configured widths: 2^20 terms of (2^7-1)*(2^23-1)
    worst = (2**20) * (2**7 - 1) * (2**23 - 1)
    assert worst < 2**63 - 1
