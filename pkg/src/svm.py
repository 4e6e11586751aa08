"""
Soft-Margin-SVM mit Kernen, SMO-Löser, Bias-Bestimmung und Vorhersage.

Gelöst wird das duale Problem

    max  sum(l) - 1/2 sum_ij l_i l_j c_i c_j k(d_i, d_j)
    u.d.N.  0 <= l_i <= box_c,  sum(l_i c_i) = 0

mit paarweisen Updates (SMO), Arbeitspaar nach maximaler KKT-Verletzung.
"""

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.dumps import DumpFormatError

KERNEL_KINDS = ('linear', 'sigmoid', 'polynomial', 'rbf_gaussian', 'rbf_exponential', 'rbf_conventional')

# Breite des Gauß-RBF-Kerns
RBF_SIGMA = 0.8

# Obere Schranke der Multiplikatoren (Soft Margin)
BOX_C = 1.0

# Abbruch, wenn die maximale KKT-Verletzung darunter liegt
TOLERANCE = 1e-3

# Multiplikatoren darüber gelten als Stützvektoren
SUPPORT_EPS = 1e-8

# Bis zu dieser Trainingsgröße wird die volle Gram-Matrix gehalten
FULL_GRAM_LIMIT = 20_000

# Speicherbudget für den Zeilen-Cache oberhalb von FULL_GRAM_LIMIT
ROW_CACHE_BYTES = 512 * 1024 * 1024

MODEL_FORMAT = 'oblique-svm-model'
MODEL_FORMAT_VERSION = 1


class KernelError(ValueError):
    """Ungültige Kernel-Parameter oder nicht-endliche Eingabe."""


class TrainingError(ValueError):
    """Trainingsdaten verletzen die Vorbedingungen."""


class SvmConvergenceError(RuntimeError):
    """SMO hat innerhalb der erlaubten Iterationen nicht konvergiert."""

    def __init__(self, worst_violation: float, iterations: int):
        self.worst_violation = worst_violation
        self.iterations = iterations
        super().__init__(
            f"SMO nicht konvergiert nach {iterations} Iterationen "
            f"(maximale KKT-Verletzung {worst_violation:.3g})"
        )


@dataclass(frozen=True)
class KernelSpec:
    kind: str = 'rbf_gaussian'
    sigma: float = RBF_SIGMA
    degree: int = 2
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise KernelError(f"Unbekannter Kernel: {self.kind} (erlaubt: {', '.join(KERNEL_KINDS)})")
        if self.kind.startswith('rbf') and not (math.isfinite(self.sigma) and self.sigma > 0):
            raise KernelError(f"sigma muss > 0 sein, ist {self.sigma}")
        if self.kind == 'polynomial' and (int(self.degree) != self.degree or self.degree < 1):
            raise KernelError(f"degree muss eine ganze Zahl >= 1 sein, ist {self.degree}")

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'sigma': self.sigma, 'degree': self.degree,
                'scale': self.scale, 'offset': self.offset}


@dataclass
class TrainingSet:
    descriptors: np.ndarray  # (N, m)
    labels: np.ndarray       # (N,), Werte -1/+1

    def __post_init__(self):
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int).ravel()

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        if len(self.descriptors) != len(self.labels):
            raise TrainingError(
                f"{len(self.descriptors)} Deskriptoren, aber {len(self.labels)} Labels"
            )
        if not set(np.unique(self.labels)) <= {-1, 1}:
            raise TrainingError("Labels müssen -1 oder +1 sein")
        if not (np.any(self.labels == 1) and np.any(self.labels == -1)):
            raise TrainingError("Trainingsdaten enthalten nur eine Klasse")
        if not np.all(np.isfinite(self.descriptors)):
            raise TrainingError("Trainingsdaten enthalten nicht-endliche Werte")


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    multipliers: np.ndarray
    labels: np.ndarray
    bias: float
    kernel: KernelSpec
    box_c: float
    color_scaling: Optional[np.ndarray] = None
    iterations: int = 0
    # Gewichte l_i * c_i, für die Vorhersage vorberechnet
    coefficients: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.coefficients = self.multipliers * self.labels


# --- Kerne ---

def _sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Kernel-Werte für alle Paare aus a (n, m) und b (k, m).

    rbf_gaussian ist der Mittelwert skalarer Gauß-Glocken pro Dimension:
    k(d, e) = 1/m * sum_k exp(-(d_k - e_k)^2 / (2 sigma^2)).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise KernelError(f"Dimensionen passen nicht: {a.shape[1]} vs {b.shape[1]}")

    if spec.kind == 'linear':
        return a @ b.T
    if spec.kind == 'sigmoid':
        return np.tanh(spec.scale * (a @ b.T) + spec.offset)
    if spec.kind == 'polynomial':
        return (a @ b.T) ** int(spec.degree)

    two_s2 = 2.0 * spec.sigma * spec.sigma
    if spec.kind == 'rbf_gaussian':
        total = np.zeros((len(a), len(b)))
        for k in range(a.shape[1]):
            diff = a[:, k][:, None] - b[:, k][None, :]
            total += np.exp(-(diff * diff) / two_s2)
        return total / a.shape[1]
    if spec.kind == 'rbf_exponential':
        return np.exp(-np.sqrt(_sq_distances(a, b)) / two_s2)
    return np.exp(-_sq_distances(a, b) / two_s2)


def kernel_eval(spec: KernelSpec, d, e) -> float:
    """
    Kernel-Wert für ein Vektorpaar.

    Raises:
        KernelError: ungleiche Länge oder nicht-endliche Werte
    """
    d = np.asarray(d, dtype=float)
    e = np.asarray(e, dtype=float)
    if d.shape != e.shape:
        raise KernelError(f"Vektoren haben ungleiche Länge: {d.shape} vs {e.shape}")
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
        raise KernelError("Kernel-Eingabe enthält nicht-endliche Werte")
    return float(kernel_matrix(spec, d[None, :], e[None, :])[0, 0])


class GramCache:
    """
    Zeilenzugriff auf die Gram-Matrix der Trainingsdaten.

    Bis FULL_GRAM_LIMIT Vektoren wird die volle (symmetrisierte) Matrix
    berechnet, darüber ein LRU-Cache einzelner Zeilen.
    """

    def __init__(self, spec: KernelSpec, x: np.ndarray, full_limit: int = FULL_GRAM_LIMIT):
        self.spec = spec
        self.x = x
        n = len(x)
        self.full: Optional[np.ndarray] = None
        self.rows: OrderedDict = OrderedDict()
        if n <= full_limit:
            gram = kernel_matrix(spec, x, x)
            self.full = 0.5 * (gram + gram.T)
            self.diagonal = np.diag(self.full).copy()
        else:
            self.capacity = max(2, ROW_CACHE_BYTES // (8 * n))
            self.diagonal = np.array([kernel_matrix(spec, x[i:i + 1], x[i:i + 1])[0, 0] for i in range(n)])

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        if i in self.rows:
            self.rows.move_to_end(i)
            return self.rows[i]
        values = kernel_matrix(self.spec, self.x[i:i + 1], self.x)[0]
        self.rows[i] = values
        if len(self.rows) > self.capacity:
            self.rows.popitem(last=False)
        return values


# --- Training ---

def _working_pair(alpha: np.ndarray, y: np.ndarray, gradient: np.ndarray, box_c: float):
    """Paar mit maximaler KKT-Verletzung; Gleichstand -> kleinster Index."""
    up = ((alpha < box_c) & (y == 1)) | ((alpha > 0) & (y == -1))
    low = ((alpha < box_c) & (y == -1)) | ((alpha > 0) & (y == 1))
    idx_up = np.flatnonzero(up)
    idx_low = np.flatnonzero(low)
    if len(idx_up) == 0 or len(idx_low) == 0:
        return None, None, 0.0, 0.0
    i = int(idx_up[np.argmax(gradient[idx_up])])
    j = int(idx_low[np.argmin(gradient[idx_low])])
    return i, j, float(gradient[i]), float(gradient[j])


def bias_from_support(alpha: np.ndarray, gradient: np.ndarray, box_c: float,
                      upper: float, lower: float) -> float:
    """
    Bias aus den freien Stützvektoren (0 < l < box_c).

    b = Mittelwert von c_k - sum_j l_j c_j k(d_k, d_j) über die freien Vektoren;
    gradient enthält genau diese Differenzen. Ohne freie Vektoren: Mitte
    zwischen den Extremen der Entscheidungswerte (upper, lower).
    """
    free = (alpha > SUPPORT_EPS) & (alpha < box_c - SUPPORT_EPS)
    if np.any(free):
        return float(np.mean(gradient[free]))
    return 0.5 * (upper + lower)


def train(data: TrainingSet, spec: KernelSpec = KernelSpec(), box_c: float = BOX_C,
          tol: float = TOLERANCE, max_iter: Optional[int] = None,
          color_scaling: Optional[np.ndarray] = None, verbose: bool = False,
          full_gram_limit: int = FULL_GRAM_LIMIT) -> SvmModel:
    """
    Trainiert eine SVM mit SMO.

    Args:
        data: Deskriptoren und Labels (-1/+1)
        spec: Kernel
        box_c: obere Schranke der Multiplikatoren
        tol: erlaubte KKT-Verletzung
        max_iter: maximale Anzahl Paar-Updates (Default: max(100000, 100 N))
        color_scaling: Farbskalierung, wird im Modell abgelegt
        verbose: Fortschritt ausgeben
        full_gram_limit: bis zu dieser Größe volle Gram-Matrix, darüber Zeilen-Cache

    Returns:
        SvmModel mit allen Vektoren, deren Multiplikator > 1e-8 ist

    Raises:
        TrainingError: ungültige Daten oder Parameter
        SvmConvergenceError: keine Konvergenz innerhalb max_iter
    """
    data.validate()
    if not (math.isfinite(box_c) and box_c > 0):
        raise TrainingError(f"box_c muss > 0 sein, ist {box_c}")
    if not tol > 0:
        raise TrainingError(f"tol muss > 0 sein, ist {tol}")

    x = data.descriptors
    y = data.labels
    n = len(y)
    if max_iter is None:
        max_iter = max(100_000, 100 * n)

    gram = GramCache(spec, x, full_limit=full_gram_limit)
    alpha = np.zeros(n)
    # gradient_k = c_k - sum_j l_j c_j k(d_k, d_j)
    gradient = y.astype(float).copy()

    upper = lower = 0.0
    iterations = 0
    while True:
        i, j, upper, lower = _working_pair(alpha, y, gradient, box_c)
        if i is None or upper - lower <= tol:
            break
        if iterations >= max_iter:
            raise SvmConvergenceError(upper - lower, iterations)

        row_i = gram.row(i)
        row_j = gram.row(j)
        eta = max(gram.diagonal[i] + gram.diagonal[j] - 2.0 * row_i[j], 1e-12)
        step = (upper - lower) / eta
        step = min(step, box_c - alpha[i] if y[i] == 1 else alpha[i])
        step = min(step, alpha[j] if y[j] == 1 else box_c - alpha[j])

        alpha[i] = min(max(alpha[i] + y[i] * step, 0.0), box_c)
        alpha[j] = min(max(alpha[j] - y[j] * step, 0.0), box_c)
        gradient -= step * (row_i - row_j)
        iterations += 1

        if verbose and iterations % 10_000 == 0:
            print(f"   SMO: {iterations} Iterationen, KKT-Lücke {upper - lower:.3g}")

    bias = bias_from_support(alpha, gradient, box_c, upper, lower)
    keep = alpha > SUPPORT_EPS
    if verbose:
        print(f"   SMO: konvergiert nach {iterations} Iterationen, {int(keep.sum())} Stützvektoren")

    return SvmModel(
        support_vectors=x[keep].copy(),
        multipliers=alpha[keep].copy(),
        labels=y[keep].copy(),
        bias=bias,
        kernel=spec,
        box_c=float(box_c),
        color_scaling=None if color_scaling is None else np.asarray(color_scaling, dtype=float),
        iterations=iterations,
    )


def dual_objective(model: SvmModel) -> float:
    """Wert der dualen Zielfunktion für die gespeicherten Multiplikatoren."""
    k = kernel_matrix(model.kernel, model.support_vectors, model.support_vectors)
    c = model.coefficients
    return float(model.multipliers.sum() - 0.5 * c @ k @ c)


# --- Vorhersage ---

def decision_values(model: SvmModel, descriptors, chunk: int = 2048) -> np.ndarray:
    """Scores sum_i l_i c_i k(d, d_i) + b für viele Deskriptoren."""
    descriptors = np.atleast_2d(np.asarray(descriptors, dtype=float))
    if not np.all(np.isfinite(descriptors)):
        raise KernelError("Deskriptor enthält nicht-endliche Werte")
    scores = np.empty(len(descriptors))
    for start in range(0, len(descriptors), chunk):
        block = descriptors[start:start + chunk]
        scores[start:start + chunk] = kernel_matrix(model.kernel, block, model.support_vectors) @ model.coefficients
    return scores + model.bias


def predict(model: SvmModel, d) -> Tuple[float, int]:
    """
    Score und Klasse eines Deskriptors. Score 0 wird +1 zugeordnet.

    Raises:
        KernelError: nicht-endliche Eingabe
    """
    score = float(decision_values(model, np.asarray(d, dtype=float)[None, :])[0])
    return score, 1 if score >= 0 else -1


def classify(scores: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(scores) >= 0, 1, -1)


# --- Modelldatei ---

def model_to_dict(model: SvmModel) -> dict:
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_FORMAT_VERSION,
        'kernel': model.kernel.to_dict(),
        'box_c': model.box_c,
        'bias': model.bias,
        'iterations': model.iterations,
        'color_scaling': None if model.color_scaling is None else [float(v) for v in model.color_scaling],
        'support_vectors': [
            {'multiplier': float(a), 'label': int(c), 'values': [float(v) for v in sv]}
            for a, c, sv in zip(model.multipliers, model.labels, model.support_vectors)
        ],
    }


def model_from_dict(data: dict) -> SvmModel:
    """
    Raises:
        DumpFormatError: falsches Format, falsche Version oder fehlende Felder
    """
    if data.get('format') != MODEL_FORMAT:
        raise DumpFormatError(f"Kein SVM-Modell (format={data.get('format')!r})")
    if data.get('version') != MODEL_FORMAT_VERSION:
        raise DumpFormatError(f"Nicht unterstützte Modellversion: {data.get('version')}")
    try:
        vectors = data['support_vectors']
        scaling = data.get('color_scaling')
        return SvmModel(
            support_vectors=np.array([sv['values'] for sv in vectors], dtype=float).reshape(len(vectors), -1),
            multipliers=np.array([sv['multiplier'] for sv in vectors], dtype=float),
            labels=np.array([sv['label'] for sv in vectors], dtype=int),
            bias=float(data['bias']),
            kernel=KernelSpec(**data['kernel']),
            box_c=float(data['box_c']),
            color_scaling=None if scaling is None else np.array(scaling, dtype=float),
            iterations=int(data.get('iterations', 0)),
        )
    except (KeyError, TypeError) as e:
        raise DumpFormatError(f"Modelldatei unvollständig: {e}") from e


def save_model(model: SvmModel, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model_to_dict(model), f, indent=2, ensure_ascii=False)


def load_model(path: Path) -> SvmModel:
    path = Path(path)
    if not path.exists():
        raise DumpFormatError(f"Modelldatei nicht gefunden: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DumpFormatError(f"Modelldatei {path} ist kein gültiges JSON: {e}") from e
    return model_from_dict(data)
