import numpy as np
import pytest

from usrecon.core import DimensionError, RfFrame, SmvProblem, make_block_partition
from usrecon.irls import l0_bruteforce
from usrecon.sensing import (
    Measurements,
    identity_operator,
    inverse_dct_frame,
    make_gaussian_operator,
    read_measurements,
    reconstruct_frame,
    sense_frame,
    write_measurements,
)
from usrecon.bench import gen_block_sparse, psnr


def dense_dct_matrix(M):
    n = np.arange(M)
    D = np.cos(np.pi * np.outer(n, 2 * n + 1) / (2 * M)) * np.sqrt(2.0 / M)
    D[0] /= np.sqrt(2.0)
    return D


def test_operator_shape_and_determinism():
    A = make_gaussian_operator(171, 512, 3)
    assert A.shape == (171, 512)
    B = make_gaussian_operator(171, 512, 3)
    assert A == B
    np.testing.assert_array_equal(A.matrix, B.matrix)
    assert A != make_gaussian_operator(171, 512, 4)


def test_operator_variance():
    A = make_gaussian_operator(256, 512, 0).matrix
    var = A.var()
    assert abs(var - 1 / 256) < 0.1 / 256
    assert abs(A.mean()) < 4 * np.sqrt(1 / 256 / A.size)


def test_operator_rejects_wide():
    with pytest.raises(DimensionError):
        make_gaussian_operator(10, 5, 0)


def test_sense_identity_is_dct():
    frame = RfFrame(np.random.default_rng(0).standard_normal((16, 3)))
    meas = sense_frame(frame, identity_operator(16))
    np.testing.assert_allclose(meas.Y, dense_dct_matrix(16) @ frame.samples, atol=1e-12)


def test_sense_zero_frame():
    meas = sense_frame(RfFrame(np.zeros((8, 2))), make_gaussian_operator(4, 8, 0))
    np.testing.assert_array_equal(meas.Y, np.zeros((4, 2)))


def test_sense_matches_two_step_oracle():
    frame = RfFrame(np.random.default_rng(11).standard_normal((8, 4)))
    A = make_gaussian_operator(6, 8, 7)
    expected = A.matrix @ (dense_dct_matrix(8) @ frame.samples)
    np.testing.assert_allclose(sense_frame(frame, A).Y, expected, atol=1e-10)


def test_sense_dimension_mismatch():
    with pytest.raises(DimensionError):
        sense_frame(RfFrame(np.zeros((8, 2))), make_gaussian_operator(4, 16, 0))


def test_sense_linear():
    rng = np.random.default_rng(5)
    F1, F2 = rng.standard_normal((2, 32, 3))
    A = make_gaussian_operator(12, 32, 1)
    lhs = sense_frame(RfFrame(2.0 * F1 - 0.5 * F2), A).Y
    rhs = 2.0 * sense_frame(RfFrame(F1), A).Y - 0.5 * sense_frame(RfFrame(F2), A).Y
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_sense_deterministic_end_to_end():
    frame = RfFrame(np.random.default_rng(9).standard_normal((64, 4)))
    a = sense_frame(frame, make_gaussian_operator(20, 64, 2)).Y
    b = sense_frame(frame, make_gaussian_operator(20, 64, 2)).Y
    assert a.tobytes() == b.tobytes()


def test_energy_ratio():
    M, N = 512, 256
    c = np.random.default_rng(0).standard_normal(M)
    ratios = [np.sum((make_gaussian_operator(N, M, s).matrix @ c) ** 2) / np.sum(c ** 2)
              for s in range(100)]
    assert 0.7 <= np.mean(ratios) <= 1.3


def test_noise_flag_is_seeded():
    frame = RfFrame(np.ones((8, 2)))
    A = make_gaussian_operator(4, 8, 0)
    a = sense_frame(frame, A, noise_std=0.1, noise_seed=3).Y
    b = sense_frame(frame, A, noise_std=0.1, noise_seed=3).Y
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, sense_frame(frame, A).Y)


def test_display_roundtrip_before_rescale():
    frame = RfFrame(np.random.default_rng(1).standard_normal((16, 3)))
    meas = sense_frame(frame, identity_operator(16), domain="dct-of-display")
    back = inverse_dct_frame(meas.Y)
    np.testing.assert_allclose(back.samples, frame.samples, atol=1e-10)
    img = reconstruct_frame(meas.Y, meas.domain).pixels
    lo, hi = frame.samples.min(), frame.samples.max()
    np.testing.assert_allclose(img, (frame.samples - lo) / (hi - lo), atol=1e-10)


@pytest.mark.parametrize("domain", ["dct-of-rf", "dct-of-display"])
def test_zero_coefficients_give_zero_image(domain):
    np.testing.assert_array_equal(reconstruct_frame(np.zeros((16, 2)), domain).pixels,
                                  np.zeros((16, 2)))


def test_l0_roundtrip_on_tiny_frame():
    # DCT coefficients 2-sparse per line, M=16, N=8 (=50%): exact under N >= 2k
    M, N = 16, 8
    coeffs = np.stack([gen_block_sparse(M, 1, 2, 0.0, s) for s in range(4)], axis=1)
    frame = inverse_dct_frame(coeffs)
    A = make_gaussian_operator(N, M, 0)
    meas = sense_frame(frame, A)
    est = np.stack([l0_bruteforce(SmvProblem(meas.Y[:, j], A), 2).estimate
                    for j in range(4)], axis=1)
    np.testing.assert_allclose(est, coeffs, atol=1e-8)
    ref = reconstruct_frame(coeffs, "dct-of-rf")
    out = reconstruct_frame(est, "dct-of-rf")
    assert np.max(np.abs(out.pixels - ref.pixels)) < 1e-6


def test_measurements_file_roundtrip(tmp_path):
    frame = RfFrame(np.random.default_rng(0).standard_normal((32, 3)))
    meas = sense_frame(frame, make_gaussian_operator(11, 32, 42), domain="dct-of-display")
    write_measurements(tmp_path / "m.csm", meas)
    back = read_measurements(tmp_path / "m.csm")
    assert back.operator_ref == (11, 32, 42, "gaussian-inv-n")
    assert back.domain == "dct-of-display"
    np.testing.assert_array_equal(back.Y, meas.Y)
    assert back.operator() == make_gaussian_operator(11, 32, 42)


def test_measurements_header_layout(tmp_path):
    meas = Measurements(np.arange(6.0).reshape(3, 2), (3, 8, 5, "gaussian-inv-n"))
    write_measurements(tmp_path / "m.csm", meas)
    raw = (tmp_path / "m.csm").read_bytes()
    assert raw[:4] == b"CSM1"
    fields = np.frombuffer(raw[4:28], dtype="<u4")
    np.testing.assert_array_equal(fields, [3, 8, 2, 5, 1, 1])
    np.testing.assert_array_equal(np.frombuffer(raw[28:], "<f8"), [0, 2, 4, 1, 3, 5])
