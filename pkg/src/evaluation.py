"""
Auswertung: Konfusionszahlen, Sensitivität/Spezifität/Genauigkeit, ROC-Kurven,
zufällige Train/Test-Splits und Kernel-Vergleich über viele Splits.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from matplotlib.figure import Figure

from src.descriptors import finalize_matrix, fit_color_scaling
from src.svm import BOX_C, TOLERANCE, KernelSpec, SvmModel, TrainingSet, classify, decision_values, train

# Testgröße pro Klasse und Anzahl Splits
N_TEST = 2500
N_SPLITS = 80

ROC_PLOT_FORMAT = 'oblique-roc-plot v1'


class EvaluationError(ValueError):
    """Ungültige Eingabe für ROC oder Split-Protokoll."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, truths, predicted) -> 'ConfusionCounts':
        truths = np.asarray(truths)
        predicted = np.asarray(predicted)
        return cls(
            tp=int(np.sum((truths == 1) & (predicted == 1))),
            tn=int(np.sum((truths == -1) & (predicted == -1))),
            fp=int(np.sum((truths == -1) & (predicted == 1))),
            fn=int(np.sum((truths == 1) & (predicted == -1))),
        )


class Metrics(NamedTuple):
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


def metrics(counts: ConfusionCounts) -> Metrics:
    """Sensitivität TP/(TP+FN), Spezifität TN/(TN+FP), Genauigkeit. None bei Nenner 0."""
    return Metrics(
        sensitivity=_ratio(counts.tp, counts.tp + counts.fn),
        specificity=_ratio(counts.tn, counts.tn + counts.fp),
        accuracy=_ratio(counts.tp + counts.tn, counts.total),
    )


# --- ROC ---

@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray  # absteigend, beginnt mit +inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> List[Tuple[float, float]]:
        return [(float(f), float(t)) for f, t in zip(self.fpr, self.tpr)]

    def point_at(self, threshold: float) -> Tuple[float, float]:
        """(fpr, tpr) der Entscheidung score >= threshold."""
        k = int(np.sum(self.thresholds >= threshold)) - 1
        return float(self.fpr[k]), float(self.tpr[k])


def roc(scores, truths) -> RocCurve:
    """
    ROC-Kurve über alle verschiedenen Scores (absteigend), Gleichstände
    zusammengefasst, AUC per Trapezregel.

    Args:
        scores: Scores (höher = eher positiv)
        truths: wahre Klassen -1/+1

    Raises:
        EvaluationError: nur eine Klasse, ungleiche Längen oder nicht-endliche Scores
    """
    scores = np.asarray(scores, dtype=float).ravel()
    truths = np.asarray(truths).ravel()
    if len(scores) != len(truths):
        raise EvaluationError(f"{len(scores)} Scores, aber {len(truths)} Labels")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("Scores enthalten nicht-endliche Werte")
    positives = int(np.sum(truths == 1))
    negatives = int(np.sum(truths == -1))
    if positives == 0 or negatives == 0:
        raise EvaluationError("ROC braucht beide Klassen")

    order = np.argsort(-scores, kind='mergesort')
    sorted_scores = scores[order]
    sorted_truths = truths[order]
    tp = np.cumsum(sorted_truths == 1)
    fp = np.cumsum(sorted_truths == -1)

    # letzter Index jeder Gruppe gleicher Scores
    last = np.flatnonzero(np.append(np.diff(sorted_scores) != 0, True))
    thresholds = np.concatenate([[np.inf], sorted_scores[last]])
    tpr = np.concatenate([[0.0], tp[last] / positives])
    fpr = np.concatenate([[0.0], fp[last] / negatives])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


# --- Split-Protokoll ---

@dataclass(frozen=True, eq=False)
class Split:
    index: int
    train_pos: np.ndarray
    test_pos: np.ndarray
    train_neg: np.ndarray
    test_neg: np.ndarray


def _size(items) -> int:
    return int(items) if isinstance(items, (int, np.integer)) else len(items)


def split_protocol(pos, neg, n_test: int = N_TEST, n_splits: int = N_SPLITS,
                   rng_seed: int = 0) -> List[Split]:
    """
    Zufällige Splits: pro Klasse n_test Elemente ohne Zurücklegen als Testmenge,
    der Rest trainiert. Deterministisch bei gleichem Seed.

    Args:
        pos, neg: Deskriptormengen (oder deren Größe)
        n_test: Testgröße pro Klasse
        n_splits: Anzahl Splits
        rng_seed: Seed

    Returns:
        Liste von Split mit sortierten Index-Arrays

    Raises:
        EvaluationError: eine Klasse hat nicht mehr als n_test Elemente
    """
    n_pos = _size(pos)
    n_neg = _size(neg)
    if n_test < 1 or n_splits < 1:
        raise EvaluationError("n_test und n_splits müssen >= 1 sein")
    for name, n in (('positive', n_pos), ('negative', n_neg)):
        if n <= n_test:
            raise EvaluationError(f"Klasse {name} hat {n} Elemente, braucht mehr als n_test={n_test}")

    rng = np.random.default_rng(rng_seed)
    splits = []
    for k in range(n_splits):
        perm_pos = rng.permutation(n_pos)
        perm_neg = rng.permutation(n_neg)
        splits.append(Split(
            index=k,
            train_pos=np.sort(perm_pos[n_test:]),
            test_pos=np.sort(perm_pos[:n_test]),
            train_neg=np.sort(perm_neg[n_test:]),
            test_neg=np.sort(perm_neg[:n_test]),
        ))
    return splits


# --- Kernel-Auswertung über Splits ---

@dataclass(frozen=True, eq=False)
class SplitResult:
    index: int
    counts: ConfusionCounts
    metrics: Metrics
    roc: RocCurve
    scores: np.ndarray
    truths: np.ndarray
    support_vectors: int


@dataclass
class KernelEvaluation:
    name: str
    spec: KernelSpec
    results: List[SplitResult] = field(default_factory=list)

    def summary(self) -> Dict[str, Tuple[float, float]]:
        """Mittelwert und Standardabweichung je Kennzahl über die Splits."""
        columns = {
            'sensitivity': [r.metrics.sensitivity for r in self.results],
            'specificity': [r.metrics.specificity for r in self.results],
            'accuracy': [r.metrics.accuracy for r in self.results],
            'auc': [r.roc.auc for r in self.results],
        }
        summary = {}
        for name, values in columns.items():
            values = [v for v in values if v is not None]
            summary[name] = (float(np.mean(values)), float(np.std(values))) if values else (float('nan'), float('nan'))
        return summary

    def pooled_roc(self) -> RocCurve:
        return roc(np.concatenate([r.scores for r in self.results]),
                   np.concatenate([r.truths for r in self.results]))


def train_on_raw(raw: np.ndarray, truths: np.ndarray, spec: KernelSpec = KernelSpec(),
                 box_c: float = BOX_C, tol: float = TOLERANCE, finalize: bool = True,
                 verbose: bool = False) -> SvmModel:
    """
    Trainiert auf Roh-Deskriptoren: Farbskalierung schätzen, normieren, SMO.

    Die Farbskalierung wird im Modell abgelegt und bei der Vorhersage wiederverwendet.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    scaling = fit_color_scaling(raw) if finalize else None
    x = finalize_matrix(raw, scaling) if finalize else raw
    return train(TrainingSet(x, truths), spec, box_c=box_c, tol=tol, color_scaling=scaling, verbose=verbose)


def score_raw(model: SvmModel, raw: np.ndarray, finalize: bool = True) -> np.ndarray:
    """Scores für Roh-Deskriptoren mit der Farbskalierung des Modells."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    return decision_values(model, finalize_matrix(raw, model.color_scaling) if finalize else raw)


def _run_split(args) -> SplitResult:
    pos, neg, split, spec, box_c, tol, finalize = args
    train_raw = np.concatenate([pos[split.train_pos], neg[split.train_neg]])
    test_raw = np.concatenate([pos[split.test_pos], neg[split.test_neg]])
    train_truth = np.concatenate([np.ones(len(split.train_pos), dtype=int), -np.ones(len(split.train_neg), dtype=int)])
    test_truth = np.concatenate([np.ones(len(split.test_pos), dtype=int), -np.ones(len(split.test_neg), dtype=int)])

    model = train_on_raw(train_raw, train_truth, spec, box_c, tol, finalize)
    scores = score_raw(model, test_raw, finalize)
    counts = ConfusionCounts.from_predictions(test_truth, classify(scores))
    return SplitResult(
        index=split.index,
        counts=counts,
        metrics=metrics(counts),
        roc=roc(scores, test_truth),
        scores=scores,
        truths=test_truth,
        support_vectors=len(model.multipliers),
    )


def evaluate_splits(pos: np.ndarray, neg: np.ndarray, spec: KernelSpec, name: Optional[str] = None,
                    n_test: int = N_TEST, n_splits: int = N_SPLITS, rng_seed: int = 0,
                    box_c: float = BOX_C, tol: float = TOLERANCE, finalize: bool = True,
                    workers: int = 1, verbose: bool = False) -> KernelEvaluation:
    """
    Trainiert und testet einen Kernel auf allen Splits.

    Args:
        pos, neg: Roh-Deskriptoren (n, 29) der beiden Klassen
        spec: Kernel
        name: Anzeigename (Default: Kernel-Art)
        finalize: Farbskalierung aus den Trainingsdaten schätzen und normieren
        workers: Prozesse für parallele Splits

    Returns:
        KernelEvaluation, Ergebnisse nach Split-Index geordnet
    """
    pos = np.asarray(pos, dtype=float)
    neg = np.asarray(neg, dtype=float)
    splits = split_protocol(pos, neg, n_test, n_splits, rng_seed)
    jobs = [(pos, neg, split, spec, box_c, tol, finalize) for split in splits]

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_split, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_split(job))
            if verbose:
                r = results[-1]
                print(f"   Split {r.index + 1}/{len(jobs)}: AUC {r.roc.auc:.4f}, "
                      f"Genauigkeit {r.metrics.accuracy:.4f}")

    results.sort(key=lambda r: r.index)
    return KernelEvaluation(name=name or spec.kind, spec=spec, results=results)


def compare_kernels(pos: np.ndarray, neg: np.ndarray, specs: Dict[str, KernelSpec],
                    **kwargs) -> Dict[str, KernelEvaluation]:
    """evaluate_splits für mehrere Kernel mit identischen Splits."""
    return {name: evaluate_splits(pos, neg, spec, name=name, **kwargs) for name, spec in specs.items()}


def summary_lines(evaluations: Sequence[KernelEvaluation]) -> List[str]:
    lines = [f"{'kernel':18s} {'sensitivity':>17s} {'specificity':>17s} {'accuracy':>17s} {'auc':>17s}"]
    for evaluation in evaluations:
        s = evaluation.summary()
        cells = [f"{s[k][0]:.4f} ± {s[k][1]:.4f}" for k in ('sensitivity', 'specificity', 'accuracy', 'auc')]
        lines.append(f"{evaluation.name:18s} " + " ".join(f"{c:>17s}" for c in cells))
    return lines


def plot_roc_curves(curves: Dict[str, RocCurve], path: Path, title: str = 'ROC') -> None:
    """Zeichnet eine Kurve pro Kernel in eine Abbildung (PNG)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = Figure(figsize=(6, 6))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot([0, 1], [0, 1], color='0.7', linestyle='--', linewidth=1)
    for name, curve in curves.items():
        ax.plot(curve.fpr, curve.tpr, linewidth=1.5, label=f"{name} (AUC {curve.auc:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel('false positive rate')
    ax.set_ylabel('true positive rate')
    ax.set_title(title)
    ax.legend(loc='lower right')
    fig.savefig(path, format='png', dpi=100, metadata={'format': ROC_PLOT_FORMAT})
