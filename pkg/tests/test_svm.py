"""Tests für svm – Kerne, SMO-Training gegen Referenzlösung, Modelldatei."""

import itertools
import json

import numpy as np
import pytest

from src.dumps import DumpFormatError
from src.svm import (
    FULL_GRAM_LIMIT,
    GramCache,
    KernelError,
    KernelSpec,
    SvmConvergenceError,
    SvmModel,
    TrainingError,
    TrainingSet,
    classify,
    decision_values,
    dual_objective,
    kernel_eval,
    kernel_matrix,
    load_model,
    predict,
    save_model,
    train,
)

LINEAR = KernelSpec(kind='linear')


# --- Fixtures: Daten ---

def separable_points(seed: int, n_per_class: int = 10):
    """Zwei Klassen in der Ebene, getrennt durch x = 0 mit Rand >= 0.5."""
    rng = np.random.default_rng(seed)
    pos = np.column_stack([rng.uniform(0.5, 3.0, n_per_class), rng.uniform(-2.0, 2.0, n_per_class)])
    neg = np.column_stack([rng.uniform(-3.0, -0.5, n_per_class), rng.uniform(-2.0, 2.0, n_per_class)])
    x = np.vstack([pos, neg])
    y = np.array([1] * n_per_class + [-1] * n_per_class)
    order = rng.permutation(len(y))
    return x[order], y[order]


def hard_margin_reference(x, y) -> float:
    """
    Minimum von 1/2 |w|^2 über alle Kandidaten mit 2 oder 3 aktiven Punkten.

    Für jede Teilmenge S wird die Minimum-Norm-Lösung mit y_i (w x_i + b) = 1
    auf S bestimmt; zulässig ist sie, wenn alle Punkte den Rand einhalten.
    """
    best = np.inf
    n = len(y)
    for size in (2, 3):
        for subset in itertools.combinations(range(n), size):
            s = list(subset)
            if len(set(y[s])) < 2:
                continue
            k = x[s] @ x[s].T
            system = np.zeros((size + 1, size + 1))
            system[:size, :size] = (y[s][:, None] * y[s][None, :]) * k
            system[:size, size] = y[s]
            system[size, :size] = y[s]
            rhs = np.concatenate([np.ones(size), [0.0]])
            try:
                solution = np.linalg.solve(system, rhs)
            except np.linalg.LinAlgError:
                continue
            alpha, b = solution[:size], solution[size]
            w = (alpha * y[s]) @ x[s]
            if np.all(y * (x @ w + b) >= 1.0 - 1e-9):
                best = min(best, 0.5 * float(w @ w))
    return best


def cluster_data(seed: int, n: int = 40, m: int = 5):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0.6, 0.5, size=(n // 2, m)), rng.normal(-0.6, 0.5, size=(n // 2, m))])
    y = np.array([1] * (n // 2) + [-1] * (n // 2))
    return x, y


# --- Kerne ---

class TestKernels:

    def test_gaussian_kernel_identity(self):
        d = np.random.default_rng(0).normal(size=29)
        assert kernel_eval(KernelSpec(), d, d) == 1.0

    @pytest.mark.parametrize('kind', ['linear', 'sigmoid', 'polynomial', 'rbf_gaussian',
                                      'rbf_exponential', 'rbf_conventional'])
    def test_symmetry(self, kind):
        rng = np.random.default_rng(1)
        d, e = rng.normal(size=7), rng.normal(size=7)
        spec = KernelSpec(kind=kind)
        assert kernel_eval(spec, d, e) == pytest.approx(kernel_eval(spec, e, d), abs=1e-12)

    def test_matrix_matches_single_evaluations(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        spec = KernelSpec(kind='rbf_exponential', sigma=1.3)
        matrix = kernel_matrix(spec, a, b)
        for i, j in itertools.product(range(4), range(3)):
            assert matrix[i, j] == pytest.approx(kernel_eval(spec, a[i], b[j]), abs=1e-12)

    def test_linear_is_dot_product(self):
        assert kernel_eval(LINEAR, [1.0, 2.0, 3.0], [4.0, -5.0, 6.0]) == pytest.approx(12.0)

    def test_unknown_kind(self):
        with pytest.raises(KernelError, match='Unbekannter Kernel'):
            KernelSpec(kind='rbf_magic')

    def test_bad_sigma(self):
        with pytest.raises(KernelError):
            KernelSpec(kind='rbf_gaussian', sigma=0.0)

    def test_unequal_lengths(self):
        with pytest.raises(KernelError):
            kernel_eval(LINEAR, [1.0, 2.0], [1.0, 2.0, 3.0])

    def test_non_finite_input(self):
        with pytest.raises(KernelError):
            kernel_eval(LINEAR, [1.0, np.nan], [1.0, 2.0])

    def test_row_cache_matches_full_matrix(self):
        x, _ = cluster_data(3, n=12)
        full = GramCache(KernelSpec(), x)
        rows = GramCache(KernelSpec(), x, full_limit=0)
        assert rows.full is None
        for i in range(len(x)):
            assert rows.row(i) == pytest.approx(full.row(i), abs=1e-12)
        assert rows.diagonal == pytest.approx(full.diagonal, abs=1e-12)


# --- Training ---

class TestTraining:

    @pytest.mark.parametrize('seed', range(25))
    def test_matches_hard_margin_reference(self, seed):
        x, y = separable_points(seed)
        model = train(TrainingSet(x, y), LINEAR, box_c=1000.0, tol=1e-9)
        reference = hard_margin_reference(x, y)
        assert dual_objective(model) == pytest.approx(reference, rel=1e-6, abs=1e-9)

    @pytest.mark.parametrize('seed', range(25))
    def test_kkt_conditions(self, seed):
        x, y = separable_points(seed)
        model = train(TrainingSet(x, y), LINEAR, box_c=1000.0, tol=1e-9)
        margins = y * decision_values(model, x)
        on_margin = margins[np.isin(np.arange(len(x)), _support_indices(model, x))]
        assert np.all(margins >= 1.0 - 1e-3)
        assert on_margin == pytest.approx(np.ones(len(on_margin)), abs=1e-3)

    def test_separates_clusters_with_gaussian_kernel(self):
        x, y = cluster_data(5)
        model = train(TrainingSet(x, y))
        assert np.mean(classify(decision_values(model, x)) == y) >= 0.9
        assert np.all(model.multipliers > 0)
        assert np.all(model.multipliers <= model.box_c + 1e-12)

    def test_relabeling_negates_scores(self):
        x, y = cluster_data(6)
        test_points = np.random.default_rng(7).normal(size=(10, x.shape[1]))
        model = train(TrainingSet(x, y))
        flipped = train(TrainingSet(x, -y))
        assert decision_values(flipped, test_points) == \
            pytest.approx(-decision_values(model, test_points), abs=1e-12)

    def test_row_cache_training_reaches_same_optimum(self):
        x, y = cluster_data(8, n=30)
        full = train(TrainingSet(x, y), tol=1e-6)
        cached = train(TrainingSet(x, y), tol=1e-6, full_gram_limit=0)
        assert dual_objective(cached) == pytest.approx(dual_objective(full), rel=1e-4)

    def test_single_class_rejected(self):
        x, _ = cluster_data(9)
        with pytest.raises(TrainingError, match='eine Klasse'):
            train(TrainingSet(x, np.ones(len(x), dtype=int)))

    def test_bad_labels_rejected(self):
        x, y = cluster_data(9)
        y = y.copy()
        y[0] = 0
        with pytest.raises(TrainingError):
            train(TrainingSet(x, y))

    def test_non_positive_box_c(self):
        x, y = cluster_data(9)
        with pytest.raises(TrainingError):
            train(TrainingSet(x, y), box_c=0.0)

    def test_iteration_limit(self):
        x, y = cluster_data(10)
        with pytest.raises(SvmConvergenceError) as excinfo:
            train(TrainingSet(x, y), max_iter=0)
        assert excinfo.value.worst_violation > 0
        assert excinfo.value.iterations == 0


def _support_indices(model: SvmModel, x: np.ndarray):
    return [i for i, row in enumerate(x) if any(np.array_equal(row, sv) for sv in model.support_vectors)]


# --- Vorhersage und Modelldatei ---

class TestPrediction:

    def test_zero_score_is_positive(self):
        model = SvmModel(support_vectors=np.zeros((1, 2)), multipliers=np.array([1.0]),
                         labels=np.array([1]), bias=0.0, kernel=LINEAR, box_c=1.0)
        assert predict(model, [3.0, -1.0]) == (0.0, 1)

    def test_non_finite_descriptor(self):
        model = SvmModel(support_vectors=np.zeros((1, 2)), multipliers=np.array([1.0]),
                         labels=np.array([1]), bias=0.0, kernel=LINEAR, box_c=1.0)
        with pytest.raises(KernelError):
            predict(model, [np.inf, 0.0])

    def test_saved_model_predicts_identically(self, tmp_path):
        x, y = cluster_data(11)
        model = train(TrainingSet(x, y), color_scaling=np.arange(1.0, 10.0))
        path = tmp_path / 'model.json'
        save_model(model, path)
        loaded = load_model(path)
        assert np.array_equal(decision_values(loaded, x), decision_values(model, x))
        assert loaded.kernel == model.kernel
        assert np.array_equal(loaded.color_scaling, model.color_scaling)

    def test_wrong_model_format(self, tmp_path):
        path = tmp_path / 'model.json'
        path.write_text(json.dumps({'format': 'something-else', 'version': 1}), encoding='utf-8')
        with pytest.raises(DumpFormatError):
            load_model(path)

    def test_missing_model_file(self, tmp_path):
        with pytest.raises(DumpFormatError):
            load_model(tmp_path / 'missing.json')


# --- Analytische Lösungen und Invarianzen ---

def xor_clusters(seed: int, per_corner: int = 10):
    rng = np.random.default_rng(seed)
    corners = [((1.0, 1.0), 1), ((-1.0, -1.0), 1), ((1.0, -1.0), -1), ((-1.0, 1.0), -1)]
    x = np.vstack([np.asarray(c) + rng.normal(0.0, 0.1, size=(per_corner, 2)) for c, _ in corners])
    y = np.repeat([label for _, label in corners], per_corner)
    return x, y


class TestAnalyticSolutions:

    def test_two_points_in_descriptor_space(self):
        e1 = np.zeros(29)
        e1[0] = 1.0
        model = train(TrainingSet(np.vstack([e1, -e1]), np.array([1, -1])), LINEAR)
        assert model.multipliers == pytest.approx([0.5, 0.5], abs=1e-12)
        assert model.bias == pytest.approx(0.0, abs=1e-12)
        score, label = predict(model, np.zeros(29))
        assert score == pytest.approx(0.0, abs=1e-12)
        assert label == 1
        assert predict(model, e1)[0] == pytest.approx(1.0, abs=1e-12)

    def test_translation_leaves_decision_unchanged(self):
        x, y = separable_points(3)
        shift = np.array([5.0, -3.0])
        grid = np.random.default_rng(13).uniform(-3.0, 3.0, size=(50, 2))
        model = train(TrainingSet(x, y), LINEAR, box_c=1000.0, tol=1e-9)
        moved = train(TrainingSet(x + shift, y), LINEAR, box_c=1000.0, tol=1e-9)
        assert decision_values(moved, grid + shift) == pytest.approx(decision_values(model, grid), abs=1e-6)

    def test_duplicated_training_set_gives_same_hard_margin(self):
        x, y = separable_points(5)
        grid = np.random.default_rng(17).uniform(-3.0, 3.0, size=(50, 2))
        model = train(TrainingSet(x, y), LINEAR, box_c=1000.0, tol=1e-9)
        doubled = train(TrainingSet(np.vstack([x, x]), np.concatenate([y, y])), LINEAR, box_c=1000.0, tol=1e-9)
        plain = decision_values(model, grid)
        twice = decision_values(doubled, grid)
        assert twice == pytest.approx(plain, abs=1e-5)
        clear = np.abs(plain) > 1e-3
        assert np.array_equal(classify(twice[clear]), classify(plain[clear]))

    def test_xor_separated_by_radial_kernel(self):
        x, y = xor_clusters(21)
        model = train(TrainingSet(x, y), KernelSpec(kind='rbf_conventional'), box_c=10.0)
        assert np.array_equal(classify(decision_values(model, x)), y)

    def test_xor_not_separated_by_linear_kernel(self):
        x, y = xor_clusters(22)
        model = train(TrainingSet(x, y), LINEAR, box_c=10.0)
        assert np.mean(classify(decision_values(model, x)) == y) < 0.9

    def test_full_gram_limit_default(self):
        assert FULL_GRAM_LIMIT == 20_000
        x, _ = cluster_data(12, n=20)
        assert GramCache(KernelSpec(), x).full is not None
