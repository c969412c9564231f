import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from epifit.contact_matrix import (ContactMatrix, SurveyRecords, aggregate_contact_matrix,
                                   estimate_contact_matrix, matrix_power, row_normalize)

C2 = np.array([[0.8, 0.2], [0.3, 0.7]])


def survey(means, participants):
    """Records reproducing the given sample means with the given roster sizes."""
    labels = list(participants)
    rows_p, rows_c, counts = [], [], []
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            rows_p.append(a)
            rows_c.append(b)
            counts.append(means[i][j] * participants[a])
    return SurveyRecords(tuple(rows_p), tuple(rows_c), np.array(counts), participants)


class TestEstimate:
    def test_equal_populations_average(self):
        rec = survey([[0, 2], [4, 0]], {"A": 1, "B": 1})
        C = estimate_contact_matrix(rec, {"A": 50.0, "B": 50.0})
        assert C.values[0, 1] == pytest.approx(3.0)
        assert C.values[1, 0] == pytest.approx(3.0)

    def test_unequal_populations(self):
        rec = survey([[0, 3], [2, 0]], {"A": 10, "B": 10})
        C = estimate_contact_matrix(rec, {"A": 100.0, "B": 300.0})
        assert C.values[0, 1] == pytest.approx(4.5)
        assert C.values[1, 0] == pytest.approx(1.5)
        assert C.values[0, 1] * 100 == pytest.approx(C.values[1, 0] * 300)

    def test_single_group_is_sample_mean(self):
        rec = SurveyRecords(("A", "A", "A"), ("A", "A", "A"), np.array([3, 5, 4]), {"A": 4})
        C = estimate_contact_matrix(rec, {"A": 1000.0})
        assert C.values[0, 0] == pytest.approx(12 / 4)

    def test_group_without_participants(self):
        rec = SurveyRecords(("A",), ("B",), np.array([1]), {"A": 2})
        with pytest.raises(ValueError, match="'B'"):
            estimate_contact_matrix(rec, {"A": 1.0, "B": 1.0})

    def test_mismatched_labels(self):
        rec = survey([[1, 1], [1, 1]], {"A": 1, "B": 1})
        with pytest.raises(ValueError):
            estimate_contact_matrix(rec, {"A": 1.0, "C": 1.0})
        rec = SurveyRecords(("A",), ("Z",), np.array([1]), {"A": 1, "B": 1})
        with pytest.raises(ValueError, match="undeclared"):
            estimate_contact_matrix(rec, {"A": 1.0, "B": 1.0})

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            SurveyRecords(("A",), ("A",), np.array([-1]), {"A": 1})

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6).flatmap(lambda G: st.tuples(
        arrays(float, (G, G), elements=st.floats(0, 20)),
        arrays(float, (G,), elements=st.floats(1, 1e6)),
        arrays(int, (G,), elements=st.integers(1, 50)))))
    def test_reciprocity(self, args):
        means, pop, n_part = args
        labels = [f"g{i}" for i in range(len(pop))]
        rec = survey(means, dict(zip(labels, n_part.tolist())))
        C = estimate_contact_matrix(rec, dict(zip(labels, pop)))
        flow = C.values * pop[:, None]
        if flow.max() > 0:
            assert np.max(np.abs(flow - flow.T)) / flow.max() < 1e-10


class TestAggregate:
    def test_identity_grouping(self):
        C = ContactMatrix(np.arange(1, 10.0).reshape(3, 3), ("a", "b", "c"), np.array([1.0, 2, 3]))
        A = aggregate_contact_matrix(C, {"a": "a", "b": "b", "c": "c"})
        np.testing.assert_allclose(A.values, C.values, rtol=1e-15)
        np.testing.assert_allclose(A.population, C.population)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        fine = rng.uniform(0, 5, size=(4, 4))
        pop = rng.uniform(10, 100, size=4)
        labels = ("f1", "f2", "f3", "f4")
        grouping = {"f1": "X", "f2": "Y", "f3": "X", "f4": "Y"}
        A = aggregate_contact_matrix(ContactMatrix(fine, labels, pop), grouping)
        expected = np.zeros((2, 2))
        coarse = ["X", "Y"]
        for a, A_lab in enumerate(coarse):
            rows = [i for i, lab in enumerate(labels) if grouping[lab] == A_lab]
            for b, B_lab in enumerate(coarse):
                cols = [j for j, lab in enumerate(labels) if grouping[lab] == B_lab]
                num = 0.0
                for i in rows:
                    num += pop[i] * sum(fine[i, j] for j in cols)
                expected[a, b] = num / sum(pop[i] for i in rows)
        np.testing.assert_allclose(A.values, expected, rtol=1e-13)
        assert A.labels == ("X", "Y")
        np.testing.assert_allclose(A.population, [pop[0] + pop[2], pop[1] + pop[3]])

    def test_reciprocity_preserved(self):
        rng = np.random.default_rng(5)
        labels = [f"g{i}" for i in range(6)]
        pop = rng.uniform(100, 1000, 6)
        rec = survey(rng.uniform(0, 5, (6, 6)), {lab: 10 for lab in labels})
        fine = estimate_contact_matrix(rec, dict(zip(labels, pop)))
        grouping = dict(zip(labels, ["A", "A", "B", "C", "C", "C"]))
        A = aggregate_contact_matrix(fine, grouping)
        flow = A.values * A.population[:, None]
        np.testing.assert_allclose(flow, flow.T, rtol=1e-12)

    def test_zero_population(self):
        C = ContactMatrix(np.ones((2, 2)), ("a", "b"), np.array([0.0, 1.0]))
        with pytest.raises(ValueError, match="zero total population"):
            aggregate_contact_matrix(C, {"a": "A", "b": "B"})

    def test_incomplete_grouping(self):
        C = ContactMatrix(np.ones((2, 2)), ("a", "b"), np.array([1.0, 1.0]))
        with pytest.raises(ValueError, match="does not cover"):
            aggregate_contact_matrix(C, {"a": "A"})


class TestRowNormalize:
    def test_simple_row(self):
        C = row_normalize(ContactMatrix(np.array([[2.0, 2.0], [1.0, 3.0]]), ("a", "b")))
        np.testing.assert_allclose(C.values[0], [0.5, 0.5])
        assert C.row_normalized

    def test_idempotent(self):
        C = row_normalize(ContactMatrix(C2, ("a", "b")))
        np.testing.assert_allclose(row_normalize(C).values, C.values, rtol=1e-15)

    def test_aggregated_six_groups(self):
        rng = np.random.default_rng(11)
        labels = [f"{5 * i}-{5 * i + 4}" for i in range(15)]
        pop = rng.uniform(1e5, 3e5, 15)
        fine = ContactMatrix(rng.uniform(0, 4, (15, 15)) + np.eye(15) * 5, tuple(labels), pop)
        coarse = ["0-4", "5-14", "5-14", "15-24", "15-24"] + ["25-44"] * 4 + ["45-64"] * 4 + ["65+"] * 2
        A = row_normalize(aggregate_contact_matrix(fine, dict(zip(labels, coarse))))
        assert A.size == 6
        np.testing.assert_allclose(A.values.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_zero_row(self):
        with pytest.raises(ValueError, match="'b'"):
            row_normalize(ContactMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]), ("a", "b")))


def stochastic(draw_matrix):
    M = np.asarray(draw_matrix, dtype=float)
    G = M.shape[0]
    M = M + np.eye(G) * (M.sum(axis=1) + 0.1)  # diagonal dominance keeps eigenvalues off the negative axis
    return M / M.sum(axis=1, keepdims=True)


stochastic_matrices = st.integers(2, 6).flatmap(
    lambda G: arrays(float, (G, G), elements=st.floats(0, 1))).map(stochastic)


class TestMatrixPower:
    def test_kappa_one(self):
        np.testing.assert_allclose(matrix_power(C2, 1.0), C2, rtol=0, atol=1e-12)

    def test_kappa_zero_identity(self):
        out = matrix_power(C2, 0.0)
        assert np.array_equal(out, np.eye(2))

    def test_kappa_two_matches_product(self):
        np.testing.assert_allclose(matrix_power(C2, 2.0), C2 @ C2, atol=1e-12)
        np.testing.assert_allclose(matrix_power(C2, 2.0), [[0.70, 0.30], [0.45, 0.55]], atol=1e-12)

    def test_kappa_fifty_stationary(self):
        # power iteration oracle for the stationary distribution
        pi = np.array([1.0, 0.0])
        for _ in range(500):
            pi = pi @ C2
        np.testing.assert_allclose(pi, [0.6, 0.4], atol=1e-12)
        out = matrix_power(C2, 50.0)
        np.testing.assert_allclose(out, np.vstack([pi, pi]), atol=1e-6)

    def test_contact_matrix_roundtrip_type(self):
        C = row_normalize(ContactMatrix(C2, ("a", "b")))
        out = matrix_power(C, 0.5)
        assert isinstance(out, ContactMatrix) and out.labels == ("a", "b")

    def test_negative_kappa(self):
        with pytest.raises(ValueError):
            matrix_power(C2, -0.1)

    def test_requires_row_normalized(self):
        with pytest.raises(ValueError, match="row-normalized"):
            matrix_power(C2 * 2, 0.5)

    def test_defective_matrix(self):
        J = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError, match="defective"):
            matrix_power(J, 0.5)

    def test_complex_residue(self):
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(ValueError, match="imaginary"):
            matrix_power(swap, 0.5)

    def test_repeated_eigenvalues_with_full_basis(self):
        np.testing.assert_allclose(matrix_power(np.eye(3), 0.3), np.eye(3), atol=1e-12)

    def test_truncation_logged(self, caplog):
        # eigenvalues 1, 0.9, 0.1: small kappa pushes an off-diagonal entry below zero
        C = np.array([[0.9, 0.1, 0.0], [0.05, 0.9, 0.05], [0.0, 0.5, 0.5]])
        raw = matrix_power(C, 0.05, truncate=False)
        assert raw.min() < 0
        with caplog.at_level(logging.INFO, logger="epifit.contact_matrix"):
            out = matrix_power(C, 0.05)
        assert out.min() == 0.0
        assert "truncated" in caplog.text
        # no renormalization after truncation
        np.testing.assert_allclose(out[raw >= 0], raw[raw >= 0])

    @settings(max_examples=40, deadline=None)
    @given(stochastic_matrices, st.floats(0, 3))
    def test_row_sums_before_truncation(self, C, kappa):
        out = matrix_power(C, kappa, truncate=False)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(stochastic_matrices, st.floats(0.1, 2), st.floats(0.1, 2))
    def test_semigroup(self, C, a, b):
        first = matrix_power(C, a, truncate=False)
        if first.min() < 0:
            return
        second = matrix_power(first, b, truncate=False)
        if second.min() < 0:
            return
        np.testing.assert_allclose(second, matrix_power(C, a * b, truncate=False), atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(stochastic_matrices, st.sampled_from([1, 2, 3]))
    def test_integer_powers(self, C, k):
        np.testing.assert_allclose(matrix_power(C, float(k), truncate=False),
                                   np.linalg.matrix_power(C, k), atol=1e-9)

    def test_diagonal_monotone_on_unit_interval(self):
        kappas = np.linspace(0, 1, 101)
        diag = np.array([np.diag(matrix_power(C2, k)) for k in kappas])
        assert np.all(np.diff(diag, axis=0) <= 1e-15)
