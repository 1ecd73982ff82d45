import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from hkd import numcore as nc
from hkd.koopman import (ConditioningError, KoopmanLevelOp, KoopmanOverflowError, LatentPyramid,
                         SpectralBand, band_mask, block_diagonalize, block_exp, evolve,
                         evolve_pyramid, koopman_eigenvalues, spectral_mask, thirds,
                         write_spectra_csv)
from hkd.numcore import ShapeError, Tensor

from conftest import fd_grad, rel_err


def random_op(rng, nb=3, h=2, w=2, scale=0.5, level=1):
    return KoopmanLevelOp(level, Tensor(rng.normal(size=(nb, h, w)) * scale, dtype=np.float64),
                          Tensor(rng.normal(size=(nb, h, w)) * 2, dtype=np.float64))


def dense_evolve(z, op, dt):
    """Assemble the full block-diagonal generator per location and apply expm."""
    d, h, w = z.shape
    out = np.empty_like(z)
    for i in range(h):
        for j in range(w):
            A = np.zeros((d, d))
            for k in range(d // 2):
                a, b = op.alpha.data[k, i, j], op.beta.data[k, i, j]
                A[2 * k:2 * k + 2, 2 * k:2 * k + 2] = [[a, b], [-b, a]]
            out[:, i, j] = expm(A * dt) @ z[:, i, j]
    return out


# --- block_exp ------------------------------------------------------------------------

def test_block_exp_zero_is_identity():
    np.testing.assert_array_equal(block_exp(0.0, 0.0, 1.7), np.eye(2))


def test_block_exp_scalar_growth():
    np.testing.assert_allclose(block_exp(math.log(2), 0.0, 1.0), 2 * np.eye(2), rtol=1e-15)


def test_block_exp_quarter_turn():
    np.testing.assert_allclose(block_exp(0.0, math.pi / 2, 1.0), [[0, 1], [-1, 0]], atol=1e-15)


def test_block_exp_matches_expm():
    a, b, dt = 0.5, 1.0, 0.3
    want = expm(np.array([[a, b], [-b, a]]) * dt)
    assert np.max(np.abs(block_exp(a, b, dt) - want)) < 1e-12


def test_block_exp_guard():
    with pytest.raises(KoopmanOverflowError):
        block_exp(20.0, 0.0, 3.0)


# --- evolve ------------------------------------------------------------------------------

def test_evolve_dt_zero_is_identity(rng):
    op = random_op(rng)
    z = rng.normal(size=(6, 2, 2))
    np.testing.assert_array_equal(evolve(Tensor(z, dtype=np.float64), op, 0.0).data, z)


def test_zero_operator_is_identity(rng):
    op = KoopmanLevelOp.zeros(1, 6, 2, 2, dtype=np.float64)
    z = rng.normal(size=(6, 2, 2))
    np.testing.assert_array_equal(evolve(Tensor(z, dtype=np.float64), op, -2.9).data, z)


def test_evolve_matches_dense_oracle(rng):
    op = random_op(rng, nb=2, h=2, w=2)
    z = rng.normal(size=(4, 2, 2))
    got = evolve(Tensor(z, dtype=np.float64), op, -1.7).data
    assert np.max(np.abs(got - dense_evolve(z, op, -1.7))) < 1e-10


def test_evolve_batched_per_sample_dt(rng):
    op = random_op(rng)
    z = rng.normal(size=(3, 6, 2, 2))
    dts = np.array([-2.0, 0.5, 1.25])
    got = evolve(Tensor(z, dtype=np.float64), op, dts).data
    for n in range(3):
        np.testing.assert_allclose(got[n], evolve(Tensor(z[n], dtype=np.float64), op, dts[n]).data,
                                   rtol=1e-15, atol=0)


def test_evolve_shape_mismatch(rng):
    op = random_op(rng, nb=3)
    with pytest.raises(ShapeError):
        evolve(np.zeros((4, 2, 2)), op, 1.0)
    with pytest.raises(ShapeError):
        evolve(np.zeros((2, 6, 2, 2)), op, np.array([1.0, 2.0, 3.0]))


def test_evolve_gradients(rng):
    op = random_op(rng, nb=2, h=1, w=2)
    z = rng.normal(size=(2, 4, 1, 2))
    wts = rng.normal(size=z.shape)
    dts = np.array([-0.7, 1.1])

    def f(zz, a, b):
        o = KoopmanLevelOp(1, Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), trainable=False)
        return float(np.sum(evolve(Tensor(zz, dtype=np.float64), o, dts).data * wts))

    zt = Tensor(z, requires_grad=True, dtype=np.float64)
    tape = nc.Tape()
    with tape:
        loss = nc.sum_(nc.mul(evolve(zt, op, dts), Tensor(wts, dtype=np.float64)))
    nc.backward(loss, tape)
    arrays = [z.copy(), op.alpha.data.copy(), op.beta.data.copy()]
    for i, g in enumerate([zt.grad, op.alpha.grad, op.beta.grad]):
        assert rel_err(g, fd_grad(f, [a.copy() for a in arrays], i)) < 1e-6


def test_evolve_pyramid_advances_time(rng):
    ops = [random_op(rng, nb=1, h=2, w=2, level=1), random_op(rng, nb=2, h=1, w=1, level=2)]
    pyr = LatentPyramid([Tensor(rng.normal(size=(2, 2, 2)), dtype=np.float64),
                         Tensor(rng.normal(size=(4, 1, 1)), dtype=np.float64)], 3.0)
    out = evolve_pyramid(pyr, ops, -2.5)
    assert float(out.time_tag) == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        evolve_pyramid(pyr, ops[:1], 1.0)


small = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


@given(s=small, t=small, seed=st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_semigroup(s, t, seed):
    rng = np.random.default_rng(seed)
    op = random_op(rng)
    z = Tensor(rng.normal(size=(6, 2, 2)), dtype=np.float64)
    one = evolve(z, op, s + t).data
    two = evolve(evolve(z, op, s), op, t).data
    assert np.max(np.abs(one - two)) <= 1e-10 * max(1.0, np.max(np.abs(one)))


@given(dt=small, seed=st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_inverse(dt, seed):
    rng = np.random.default_rng(seed)
    op = random_op(rng)
    z = rng.normal(size=(6, 2, 2))
    back = evolve(evolve(Tensor(z, dtype=np.float64), op, dt), op, -dt).data
    assert rel_err(back, z) < 1e-9


@given(a=st.floats(-3, 3), b=st.floats(-5, 5), dt=small)
@settings(max_examples=100, deadline=None)
def test_norm_law(a, b, dt):
    z = np.array([0.6, -0.8]).reshape(2, 1, 1)
    op = KoopmanLevelOp(1, Tensor(np.full((1, 1, 1), a), dtype=np.float64),
                        Tensor(np.full((1, 1, 1), b), dtype=np.float64))
    out = evolve(Tensor(z, dtype=np.float64), op, dt).data
    assert np.linalg.norm(out) == pytest.approx(math.exp(a * dt), rel=1e-12)
    rot = KoopmanLevelOp(1, Tensor(np.zeros((1, 1, 1)), dtype=np.float64),
                         Tensor(np.full((1, 1, 1), b), dtype=np.float64))
    assert abs(np.linalg.norm(evolve(Tensor(z, dtype=np.float64), rot, dt).data) - 1.0) < 1e-12


# --- eigenvalues ---------------------------------------------------------------------------

def test_eigenvalues_identity():
    op = KoopmanLevelOp.zeros(1, 2, 1, 1, dtype=np.float64)
    np.testing.assert_array_equal(koopman_eigenvalues(op, 2.0).values, 1.0)


def test_eigenvalues_formula():
    op = KoopmanLevelOp(1, Tensor(np.full((1, 1, 1), 0.3), dtype=np.float64),
                        Tensor(np.full((1, 1, 1), 2.0), dtype=np.float64))
    ev = koopman_eigenvalues(op, 0.5)
    assert ev.magnitude[0, 0, 0] == math.exp(0.3 * 0.5)
    assert ev.phase[0, 0, 0] == 1.0
    v = ev.values[0, 0, 0]
    np.testing.assert_allclose(v, [np.exp(0.15) * np.exp(1j), np.exp(0.15) * np.exp(-1j)], rtol=1e-15)


def test_eigenvalues_match_dense_solver(rng):
    op = random_op(rng)
    dt = -1.3
    ev = koopman_eigenvalues(op, dt).values
    for k in range(3):
        for i in range(2):
            for j in range(2):
                dense = block_exp(op.alpha.data[k, i, j], op.beta.data[k, i, j], dt)
                got = np.sort_complex(ev[k, i, j])
                want = np.sort_complex(np.linalg.eigvals(dense))
                assert np.max(np.abs(got - want)) < 1e-9


def test_eigenvalue_magnitude_same_rounding(rng):
    op = random_op(rng)
    assert koopman_eigenvalues(op, 0.7).magnitude.tobytes() == np.exp(op.alpha.data * 0.7).tobytes()


# --- spectral masks ---------------------------------------------------------------------------

def test_full_band_identity(rng):
    op = random_op(rng)
    z = rng.normal(size=(6, 2, 2))
    np.testing.assert_array_equal(spectral_mask(Tensor(z, dtype=np.float64), op, SpectralBand(1, 0, 3)).data, z)


def test_empty_band_zero(rng):
    op = random_op(rng)
    z = rng.normal(size=(6, 2, 2))
    assert not np.any(spectral_mask(z, op, SpectralBand(1, 0, 0)).data)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_complementary_bands_sum(rng, k):
    op = random_op(rng)
    z = Tensor(rng.normal(size=(6, 2, 2)), dtype=np.float64)
    a = spectral_mask(z, op, SpectralBand(1, 0, k)).data
    b = spectral_mask(z, op, SpectralBand(1, k, 3)).data
    np.testing.assert_array_equal(a + b, z.data)


def test_hand_sorted_rank():
    op = KoopmanLevelOp(1, Tensor(np.array([0.1, 0.9, -0.5]).reshape(3, 1, 1), dtype=np.float64),
                        Tensor(np.zeros((3, 1, 1)), dtype=np.float64))
    z = np.arange(1.0, 7.0).reshape(6, 1, 1)
    out = spectral_mask(Tensor(z, dtype=np.float64), op, SpectralBand(1, 1, 2)).data.ravel()
    np.testing.assert_array_equal(out, [1, 2, 0, 0, 0, 0])


def test_mask_idempotent_linear_commutes(rng):
    op = random_op(rng)
    band = SpectralBand(1, 1, 3)
    z1, z2 = rng.normal(size=(6, 2, 2)), rng.normal(size=(6, 2, 2))
    m = lambda z: spectral_mask(Tensor(z, dtype=np.float64), op, band).data  # noqa: E731
    np.testing.assert_array_equal(m(m(z1)), m(z1))
    assert np.max(np.abs(m(2 * z1 - 3 * z2) - (2 * m(z1) - 3 * m(z2)))) < 1e-12
    ev = lambda z: evolve(Tensor(z, dtype=np.float64), op, -1.4).data  # noqa: E731
    assert np.max(np.abs(m(ev(z1)) - ev(m(z1)))) < 1e-10


def test_invalid_band_rejected(rng):
    op = random_op(rng)
    with pytest.raises(ValueError):
        band_mask(op, SpectralBand(1, 2, 4))
    with pytest.raises(ValueError):
        band_mask(op, SpectralBand(2, 0, 1))


def test_thirds_partition():
    for n in range(0, 20):
        parts = thirds(n)
        assert parts[0][0] == 0 and parts[-1][1] == n
        assert all(parts[i][1] == parts[i + 1][0] for i in range(2))


# --- clamp -----------------------------------------------------------------------------------

def test_clamp_enforces_guard(rng):
    op = random_op(rng, scale=100.0)
    op.clamp_(3.0 - 0.02)
    assert np.max(np.abs(op.alpha.data)) * (3.0 - 0.02) <= 50.0 + 1e-9


# --- block diagonalization ---------------------------------------------------------------------

def test_identity_matrix():
    bd = block_diagonalize(np.eye(4))
    # four real eigenvalues, each duplicated into its own 2x2 block
    np.testing.assert_allclose(bd.K, np.eye(bd.K.shape[0]), atol=1e-15)
    for t in (0.0, 0.5, 2.0):
        np.testing.assert_allclose(bd.propagator(t), np.eye(4), atol=1e-12)


def test_rotation():
    th = 0.7
    K = np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]])
    bd = block_diagonalize(K)
    a, b = bd.blocks[0]
    assert a == pytest.approx(math.cos(th) - 1, abs=1e-12)
    assert abs(b) == pytest.approx(math.sin(th), abs=1e-12)
    for t in (0.0, 0.25, 1.0, 3.0):
        assert np.max(np.abs(bd.propagator(t) - expm(-t * (K - np.eye(2))))) < 1e-10


def test_random_complex_spectrum(rng):
    K = rng.normal(size=(8, 8))
    bd = block_diagonalize(K)
    for t in (0.0, 0.25, 1.0, 3.0):
        ref = expm(-t * (K - np.eye(8)))
        assert np.linalg.norm(bd.propagator(t) - ref) / np.linalg.norm(ref) < 1e-8


def test_block_layout(rng):
    K = rng.normal(size=(6, 6))
    bd = block_diagonalize(K)
    n = bd.K.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    for k in range(n // 2):
        mask[2 * k:2 * k + 2, 2 * k:2 * k + 2] = True
    assert not np.any(bd.K[~mask])
    for k, (a, b) in enumerate(bd.blocks):
        blk = bd.K[2 * k:2 * k + 2, 2 * k:2 * k + 2] - np.eye(2)
        np.testing.assert_allclose(blk, [[a, b], [-b, a]])


def test_defective_rejected():
    with pytest.raises(ConditioningError):
        block_diagonalize(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_odd_side_rejected():
    with pytest.raises(ShapeError):
        block_diagonalize(np.eye(3))


# --- export ------------------------------------------------------------------------------------

def test_spectra_csv(tmp_path, rng):
    op = random_op(rng, nb=2, h=1, w=2)
    p = tmp_path / "s.csv"
    write_spectra_csv(p, [op], 2.98)
    lines = p.read_text().splitlines()
    assert lines[0] == "level,i,j,block,alpha,beta,magnitude,phase"
    assert len(lines) == 1 + 4
    row = lines[1].split(",")
    assert float(row[6]) == float(np.exp(np.float64(row[4]) * 2.98))
