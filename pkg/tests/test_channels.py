import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from gudl.channels import (
    Dataset,
    DatasetFormatError,
    NearFieldParams,
    build_polar_dictionary,
    dft_matrix,
    farfield_steering,
    gen_farfield_channel,
    gen_nearfield_channel,
    gen_sparse,
    generate_dataset,
    load_dataset,
    nearfield_steering,
    save_dataset,
)
from gudl.core import ValidationError


def test_gen_sparse_zero():
    inst = gen_sparse(16, 0, rng=0)
    assert_array_equal(inst.h, 0)


def test_gen_sparse_k3_n512():
    inst = gen_sparse(512, 3, rng=7)
    assert np.count_nonzero(inst.h) == 6
    assert np.linalg.norm(inst.h) == pytest.approx(1.0, abs=1e-14)


def test_gen_sparse_dense_limit():
    h = gen_sparse(32, 16, "unit", rng=1).h
    assert np.count_nonzero(h) == 32
    assert np.sum(np.abs(h)) / np.linalg.norm(h) <= np.sqrt(32) + 1e-12


def test_gen_sparse_errors():
    with pytest.raises(ValidationError):
        gen_sparse(8, 5)
    with pytest.raises(ValidationError):
        gen_sparse(8, 1, "cauchy")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.data())
def test_gen_sparse_property(n_half, data):
    k = data.draw(st.integers(0, n_half))
    seed = data.draw(st.integers(0, 2**31))
    amp = data.draw(st.sampled_from(["gaussian", "unit", "laplace"]))
    h = gen_sparse(2 * n_half, k, amp, rng=seed).h
    assert np.count_nonzero(h) == 2 * k
    if k:
        assert np.linalg.norm(h) == pytest.approx(1.0)


def test_generation_deterministic():
    a = generate_dataset(5, 16, 2, seed=9).matrix()
    b = generate_dataset(5, 16, 2, seed=9).matrix()
    assert_array_equal(a, b)


def test_nearfield_single_element():
    p = NearFieldParams(N=1, R=1)
    assert_allclose(nearfield_steering(0.3, 5.0, p), [1.0])


def test_nearfield_first_entry_and_norm():
    p = NearFieldParams(N=16)
    b = nearfield_steering(1.1, 7.0, p)
    assert b[0] == pytest.approx(1 / 4)
    assert np.linalg.norm(b) == pytest.approx(1.0, abs=1e-14)


def test_nearfield_planar_limit():
    p = NearFieldParams(N=16, r_max=1e7)
    theta = 0.7
    near = nearfield_steering(theta, 1e6, p)
    far = farfield_steering(np.cos(theta), p)
    assert np.max(np.abs(np.angle(near / far))) < 1e-3


def test_polar_dictionary_shape_and_norms():
    D = build_polar_dictionary(NearFieldParams(N=4, R=2))
    assert D.shape == (4, 8)
    assert_allclose(np.linalg.norm(D, axis=0), 1, atol=1e-12)


def test_polar_dictionary_farfield_columns():
    p = NearFieldParams(N=8, R=1, r_min=1e6, r_max=1e7)
    D = build_polar_dictionary(p)
    for j, c in enumerate(p.cosine_grid()):
        assert np.max(np.abs(np.angle(D[:, j] / farfield_steering(c, p)))) < 1e-3


def test_polar_dictionary_coherence():
    D = build_polar_dictionary(NearFieldParams(N=16, R=4))
    G = np.abs(D.conj().T @ D)
    off = G[~np.eye(G.shape[0], dtype=bool)]
    assert off.max() < 1


def test_nearfield_channel_single_path():
    p = NearFieldParams(N=8, L=1, R=2)
    h, s = gen_nearfield_channel(p, rng=3, gains=np.array([1.0]))
    j = int(np.flatnonzero(s)[0])
    D = build_polar_dictionary(p)
    assert_allclose(h, D[:, j], atol=1e-12)


def test_nearfield_channel_synthesis():
    p = NearFieldParams(N=16, L=3, R=4)
    h, s = gen_nearfield_channel(p, rng=11)
    assert np.count_nonzero(s) == 3
    assert_allclose(build_polar_dictionary(p) @ s, h, atol=1e-10)
    with pytest.raises(ValidationError):
        gen_nearfield_channel(p, rng=1, on_grid=False)


def test_farfield_channel():
    h, s = gen_farfield_channel(16, 1, rng=2)
    assert_allclose(np.abs(h), 1 / 4, atol=1e-12)
    h, s = gen_farfield_channel(256, 3, rng=2)
    assert np.count_nonzero(s) == 3
    assert_allclose(dft_matrix(256).conj().T @ h, s, atol=1e-12)
    assert np.linalg.norm(h) == pytest.approx(np.linalg.norm(s))
    with pytest.raises(ValidationError):
        gen_farfield_channel(4, 5)


def test_distance_grid_reciprocal_rule():
    p = NearFieldParams(N=8, R=3, r_min=1e-3, r_max=1e3)
    r = p.distance_grid()
    assert_allclose(r * np.arange(1, 4), r[0])


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(100, 512, 3, seed=0)
    path = tmp_path / "d.gchd"
    save_dataset(path, ds)
    back = load_dataset(path, 512)
    assert_array_equal(back.matrix(), ds.matrix())
    assert [s.k for s in back.samples] == [3] * 100
    save_dataset(tmp_path / "again.gchd", back)
    assert (tmp_path / "again.gchd").read_bytes() == path.read_bytes()


def test_empty_dataset_roundtrip(tmp_path):
    path = tmp_path / "e.gchd"
    save_dataset(path, Dataset([], 4))
    assert len(load_dataset(path)) == 0


def test_dataset_corruption(tmp_path):
    path = tmp_path / "d.gchd"
    save_dataset(path, generate_dataset(3, 8, 1, seed=0))
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.gchd"
    bad.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(DatasetFormatError):
        load_dataset(bad)
    bad.write_bytes(bytes(data[:-3]))
    with pytest.raises(DatasetFormatError):
        load_dataset(bad)
    with pytest.raises(DatasetFormatError):
        load_dataset(path, expected_n2=16)
