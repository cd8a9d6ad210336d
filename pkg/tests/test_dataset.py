import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from inckoop.dataset import (DegenerateDataWarning, Normalizer, Provenance, Segment,
                             collect_initial_dataset, dataset_from_bytes, dataset_from_segments,
                             dataset_to_bytes, fit_normalizer, load_dataset, load_repo,
                             make_reference_repo, merge_datasets, repo_from_bytes, repo_to_bytes,
                             save_dataset, save_repo)
from inckoop.errors import BadDims, FormatError, ShapeMismatch
from inckoop.plants import expert_rollout, pendulum_spec

SPEC = pendulum_spec()


def random_dataset(rng, count, l=4, n=2, m=1, tag=Provenance.INITIAL, it=0):
    segs = [Segment(rng.standard_normal((l + 1, n)), rng.standard_normal((l, m)), tag, it)
            for _ in range(count)]
    return dataset_from_segments(segs, n, m, l)


class TestNormalizer:
    def test_two_point_column(self):
        nm = fit_normalizer(np.array([[0.0], [2.0]]))
        assert nm.mean[0] == 1.0 and nm.std[0] == 1.0

    def test_constant_column_floored_with_warning(self):
        with pytest.warns(DegenerateDataWarning):
            nm = fit_normalizer(np.array([[0.0, 1.0], [0.0, 3.0]]))
        assert nm.mean[0] == 0.0 and nm.std[0] == 1e-8

    def test_standardized_data(self, rng):
        X = rng.standard_normal((1000, 3))
        X = (X - X.mean(0)) / X.std(0)
        nm = fit_normalizer(X)
        assert np.allclose(nm.mean, 0, atol=1e-9) and np.allclose(nm.std, 1, atol=1e-9)

    def test_needs_two_rows(self):
        with pytest.raises(BadDims):
            fit_normalizer(np.zeros((1, 2)))

    @given(arrays(float, (5, 3), elements=st.floats(-1e6, 1e6)),
           arrays(float, (7, 3), elements=st.floats(-1e3, 1e3)))
    def test_invert_apply_roundtrip(self, fit_rows, x):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateDataWarning)
            nm = fit_normalizer(fit_rows)
        back = nm.invert(nm.apply(x))
        assert np.allclose(back, x, rtol=1e-12, atol=1e-12 * (1 + np.abs(nm.mean)).max())

    def test_std_floor_enforced(self):
        assert Normalizer([0.0], [0.0]).std[0] == 1e-8


class TestCollect:
    def test_smallest_dataset(self):
        d = collect_initial_dataset(SPEC, None, 1, 2, 1, seed=0)
        assert len(d) == 1
        assert d.segments[0].states.shape == (2, 2)
        assert d.segments[0].controls.shape == (1, 1)

    def test_segment_start_range(self):
        # each segment must be a contiguous window of its source rollout
        d = collect_initial_dataset(SPEC, None, 20, 100, 16, seed=3)
        for i, seg in enumerate(d.segments):
            r = np.random.default_rng([3, i])
            tr = expert_rollout(SPEC, r, 100)
            start = int(r.integers(0, 100 - 16 + 1))
            assert 0 <= start <= 84
            assert np.array_equal(seg.states, tr.states[start:start + 17])
            assert np.array_equal(seg.controls, tr.controls[start:start + 16])

    def test_deterministic_bytes(self):
        a = collect_initial_dataset(SPEC, None, 5, 30, 8, seed=7)
        b = collect_initial_dataset(SPEC, None, 5, 30, 8, seed=7)
        assert dataset_to_bytes(a) == dataset_to_bytes(b)

    def test_normalizer_fitted_on_states(self):
        d = collect_initial_dataset(SPEC, None, 5, 30, 8, seed=1)
        X = d.all_states()
        assert np.array_equal(d.normalizer.mean, X.mean(0))

    def test_preconditions(self):
        with pytest.raises(BadDims):
            collect_initial_dataset(SPEC, None, 1, 8, 8, seed=0)


class TestMerge:
    def test_sizes(self, rng):
        a, b = random_dataset(rng, 3), random_dataset(rng, 2)
        assert len(merge_datasets(a, b)) == 5

    def test_merge_empty(self, rng):
        a = random_dataset(rng, 3)
        empty = dataset_from_segments([], 2, 1, 4, Normalizer.identity(2))
        out = merge_datasets(a, empty)
        assert all(x is y for x, y in zip(out.segments, a.segments))
        assert out.normalizer == fit_normalizer(a.all_states())

    def test_provenance_distinguishes_iterations(self, rng):
        a = random_dataset(rng, 2)
        b1 = random_dataset(rng, 2, tag=Provenance.INCREMENTAL, it=1)
        b2 = random_dataset(rng, 2, tag=Provenance.INCREMENTAL, it=2)
        out = merge_datasets(merge_datasets(a, b1), b2)
        assert [(s.tag, s.iteration) for s in out.segments] == \
            [(Provenance.INITIAL, 0)] * 2 + [(Provenance.INCREMENTAL, 1)] * 2 + \
            [(Provenance.INCREMENTAL, 2)] * 2

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            merge_datasets(random_dataset(rng, 2, l=4), random_dataset(rng, 2, l=5))

    @given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 4), st.integers(0, 999))
    def test_associative_and_additive(self, na, nb, nc, seed):
        r = np.random.default_rng(seed)
        a, b, c = random_dataset(r, na + 1), random_dataset(r, nb + 1), random_dataset(r, nc)
        left = merge_datasets(merge_datasets(a, b), c)
        right = merge_datasets(a, merge_datasets(b, c))
        assert len(left) == len(a) + len(b) + len(c)
        assert left == right


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        d = collect_initial_dataset(SPEC, None, 6, 40, 16, seed=2)
        d.segments[3] = Segment(d.segments[3].states, d.segments[3].controls,
                                Provenance.INCREMENTAL, 7)
        p = tmp_path / "d.ikds"
        save_dataset(d, p)
        back = load_dataset(p)
        assert back == d
        assert dataset_to_bytes(back) == p.read_bytes()

    def test_truncated(self, tmp_path):
        buf = dataset_to_bytes(collect_initial_dataset(SPEC, None, 2, 10, 4, seed=0))
        with pytest.raises(FormatError):
            dataset_from_bytes(buf[:-9])

    def test_wrong_magic(self):
        buf = dataset_to_bytes(collect_initial_dataset(SPEC, None, 2, 10, 4, seed=0))
        with pytest.raises(FormatError, match="IKDS"):
            dataset_from_bytes(b"XXXX" + buf[4:])

    def test_bad_version(self):
        buf = bytearray(dataset_to_bytes(collect_initial_dataset(SPEC, None, 2, 10, 4, seed=0)))
        buf[4:8] = struct.pack("<I", 99)
        with pytest.raises(FormatError, match="version"):
            dataset_from_bytes(bytes(buf))

    def test_corrupted_payload(self):
        buf = bytearray(dataset_to_bytes(collect_initial_dataset(SPEC, None, 2, 10, 4, seed=0)))
        buf[60] ^= 0x01
        with pytest.raises(FormatError, match="checksum"):
            dataset_from_bytes(bytes(buf))

    def test_length_checked_at_load(self, tmp_path):
        p = tmp_path / "d.ikds"
        save_dataset(collect_initial_dataset(SPEC, None, 2, 10, 4, seed=0), p)
        with pytest.raises(ShapeMismatch):
            load_dataset(p, expected_length=16)

    def test_segment_construction_checks(self):
        with pytest.raises(ShapeMismatch):
            Segment(np.zeros((3, 2)), np.zeros((3, 1)))


class TestReferenceRepo:
    def test_zero_noise_equals_clean(self):
        repo = make_reference_repo(SPEC, 4, 30, 0.0, seed=5)
        assert np.allclose(repo.plant_units(), repo.clean, atol=1e-12)
        assert np.array_equal(repo.references, repo.normalizer.apply(repo.clean))

    def test_noise_bound(self):
        repo = make_reference_repo(SPEC, 10, 50, 0.05, seed=5)
        diff = repo.references - repo.normalizer.apply(repo.clean)
        assert np.max(np.abs(diff)) <= 0.05
        assert np.max(np.abs(diff)) > 0.04

    def test_deterministic(self):
        a = make_reference_repo(SPEC, 3, 20, 0.05, seed=9)
        b = make_reference_repo(SPEC, 3, 20, 0.05, seed=9)
        assert repo_to_bytes(a) == repo_to_bytes(b)

    def test_file_roundtrip(self, tmp_path):
        a = make_reference_repo(SPEC, 3, 20, 0.05, seed=9)
        save_repo(a, tmp_path / "r.ikrr")
        assert load_repo(tmp_path / "r.ikrr") == a
        buf = bytearray(repo_to_bytes(a))
        buf[-10] ^= 0xFF
        with pytest.raises(FormatError):
            repo_from_bytes(bytes(buf))

    def test_preconditions(self):
        with pytest.raises(BadDims):
            make_reference_repo(SPEC, 0, 20, 0.05, seed=0)
        with pytest.raises(BadDims):
            make_reference_repo(SPEC, 1, 20, -0.1, seed=0)
