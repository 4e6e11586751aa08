"""
Textformate der Pipeline-Artefakte (CSV mit Versions-Kopfzeile).

Jede Datei beginnt mit einer Zeile "# <format> v<version>", gefolgt von der
CSV-Spaltenzeile. Fließkommazahlen werden mit repr() geschrieben, damit das
Einlesen die Werte bitgenau wiederherstellt.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.descriptors import DESCRIPTOR_LAYOUT, DESCRIPTOR_LENGTH
from src.projection import ProjectedSample
from src.scene_model import GeoPoint

DUMP_VERSION = 1

SAMPLE_FORMAT = 'oblique-samples'
DESCRIPTOR_FORMAT = 'oblique-descriptors'
SCORE_FORMAT = 'oblique-scores'
ROC_FORMAT = 'oblique-roc'
VERDICT_FORMAT = 'oblique-verdicts'

SAMPLE_COLUMNS = ['segment_id', 'index', 'lat', 'lon', 'alt', 'u', 'v',
                  'primary_u', 'primary_v', 'normal_u', 'normal_v',
                  'visible', 'label', 'source']
DESCRIPTOR_COLUMNS = ['segment_id', 'index', 'u', 'v'] + DESCRIPTOR_LAYOUT + ['label']
SCORE_COLUMNS = ['score', 'truth']
ROC_COLUMNS = ['threshold', 'fpr', 'tpr']
VERDICT_COLUMNS = ['segment_id', 'verdict', 'positive', 'total', 'mean_score']

LABEL_TRUTH = {'consistent': 1, 'inconsistent': -1}


class DumpFormatError(ValueError):
    """Artefakt-Datei fehlt, ist leer oder hat ein falsches Format."""


@dataclass
class DescriptorTable:
    """Roh-Deskriptoren mit Herkunft und Label, eine Zeile pro Abtastpunkt."""
    segment_ids: List[str]
    indices: List[int]
    px: np.ndarray       # (n, 2)
    values: np.ndarray   # (n, 29), unskaliert
    labels: List[str]

    def __len__(self) -> int:
        return len(self.labels)

    def truths(self) -> np.ndarray:
        """Labels als +1/-1. Nicht gelabelte Zeilen sind ein Fehler."""
        try:
            return np.array([LABEL_TRUTH[label] for label in self.labels], dtype=int)
        except KeyError as e:
            raise DumpFormatError(f"Zeile ohne Trainings-Label: {e}") from e

    def select(self, rows) -> 'DescriptorTable':
        rows = list(rows)
        return DescriptorTable(
            segment_ids=[self.segment_ids[i] for i in rows],
            indices=[self.indices[i] for i in rows],
            px=self.px[rows].reshape(-1, 2),
            values=self.values[rows].reshape(-1, DESCRIPTOR_LENGTH),
            labels=[self.labels[i] for i in rows],
        )


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_rows(path: Path, fmt: str, columns: List[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(f"# {fmt} v{DUMP_VERSION}\n")
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        writer.writerows(rows)


def _read_rows(path: Path, fmt: str, columns: List[str]) -> List[Dict[str, str]]:
    """
    Liest eine Artefakt-Datei und prüft Kopfzeile und Spalten.

    Raises:
        DumpFormatError: Datei fehlt, falsches Format, falsche Version oder Spalten
    """
    path = Path(path)
    if not path.exists():
        raise DumpFormatError(f"Datei nicht gefunden: {path}")
    with open(path, 'r', encoding='utf-8', newline='') as f:
        header = f.readline().strip()
        expected = f"# {fmt} v{DUMP_VERSION}"
        if not header:
            raise DumpFormatError(f"Datei ist leer: {path}")
        if header != expected:
            raise DumpFormatError(f"{path}: Kopfzeile '{header}', erwartet '{expected}'")
        reader = csv.DictReader(f)
        if reader.fieldnames != columns:
            raise DumpFormatError(f"{path}: unerwartete Spalten {reader.fieldnames}")
        return list(reader)


# --- Abtastpunkte ---

def write_samples(samples: Sequence[ProjectedSample], path: Path) -> None:
    rows = []
    for s in samples:
        rows.append([s.segment_id, s.index, _fmt(s.world.lat), _fmt(s.world.lon), _fmt(s.world.alt),
                     _fmt(s.px[0]), _fmt(s.px[1]),
                     _fmt(s.primary_dir[0]), _fmt(s.primary_dir[1]),
                     _fmt(s.normal_dir[0]), _fmt(s.normal_dir[1]),
                     int(s.visible), s.label, s.source])
    _write_rows(path, SAMPLE_FORMAT, SAMPLE_COLUMNS, rows)


def read_samples(path: Path) -> List[ProjectedSample]:
    samples = []
    for row in _read_rows(path, SAMPLE_FORMAT, SAMPLE_COLUMNS):
        try:
            samples.append(ProjectedSample(
                segment_id=row['segment_id'],
                index=int(row['index']),
                world=GeoPoint(float(row['lat']), float(row['lon']), float(row['alt'])),
                px=(float(row['u']), float(row['v'])),
                primary_dir=(float(row['primary_u']), float(row['primary_v'])),
                normal_dir=(float(row['normal_u']), float(row['normal_v'])),
                visible=row['visible'] == '1',
                label=row['label'],
                source=row['source'],
            ))
        except (TypeError, ValueError) as e:
            raise DumpFormatError(f"{path}: ungültige Zeile {row}: {e}") from e
    return samples


# --- Deskriptoren ---

def descriptor_table(samples: Sequence[ProjectedSample], values: np.ndarray) -> DescriptorTable:
    """Baut die Tabelle aus Abtastpunkten und den zugehörigen Roh-Deskriptoren."""
    return DescriptorTable(
        segment_ids=[s.segment_id for s in samples],
        indices=[s.index for s in samples],
        px=np.array([s.px for s in samples], dtype=float).reshape(-1, 2),
        values=np.asarray(values, dtype=float).reshape(-1, DESCRIPTOR_LENGTH),
        labels=[s.label for s in samples],
    )


def write_descriptors(table: DescriptorTable, path: Path) -> None:
    rows = []
    for i in range(len(table)):
        rows.append([table.segment_ids[i], table.indices[i], _fmt(table.px[i, 0]), _fmt(table.px[i, 1])]
                    + [_fmt(x) for x in table.values[i]] + [table.labels[i]])
    _write_rows(path, DESCRIPTOR_FORMAT, DESCRIPTOR_COLUMNS, rows)


def read_descriptors(path: Path) -> DescriptorTable:
    rows = _read_rows(path, DESCRIPTOR_FORMAT, DESCRIPTOR_COLUMNS)
    try:
        return DescriptorTable(
            segment_ids=[row['segment_id'] for row in rows],
            indices=[int(row['index']) for row in rows],
            px=np.array([[float(row['u']), float(row['v'])] for row in rows]).reshape(-1, 2),
            values=np.array([[float(row[name]) for name in DESCRIPTOR_LAYOUT] for row in rows]
                            ).reshape(-1, DESCRIPTOR_LENGTH),
            labels=[row['label'] for row in rows],
        )
    except (TypeError, ValueError) as e:
        raise DumpFormatError(f"{path}: ungültiger Zahlenwert: {e}") from e


def merge_tables(tables: Sequence[DescriptorTable]) -> DescriptorTable:
    return DescriptorTable(
        segment_ids=[s for t in tables for s in t.segment_ids],
        indices=[i for t in tables for i in t.indices],
        px=np.concatenate([t.px for t in tables]).reshape(-1, 2) if tables else np.zeros((0, 2)),
        values=(np.concatenate([t.values for t in tables]).reshape(-1, DESCRIPTOR_LENGTH)
                if tables else np.zeros((0, DESCRIPTOR_LENGTH))),
        labels=[label for t in tables for label in t.labels],
    )


# --- Scores, ROC, Urteile ---

def write_scores(scores, truths, path: Path) -> None:
    rows = [[_fmt(s), int(t)] for s, t in zip(scores, truths)]
    _write_rows(path, SCORE_FORMAT, SCORE_COLUMNS, rows)


def read_scores(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """
    Liest eine Score-Datei.

    Raises:
        DumpFormatError: Datei fehlt, falsches Format oder keine Zeilen
    """
    rows = _read_rows(path, SCORE_FORMAT, SCORE_COLUMNS)
    if not rows:
        raise DumpFormatError(f"Keine Scores in {path}")
    try:
        scores = np.array([float(row['score']) for row in rows])
        truths = np.array([int(row['truth']) for row in rows])
    except (TypeError, ValueError) as e:
        raise DumpFormatError(f"{path}: ungültiger Zahlenwert: {e}") from e
    if not set(np.unique(truths)) <= {-1, 1}:
        raise DumpFormatError(f"{path}: truth muss -1 oder +1 sein")
    return scores, truths


def write_roc(thresholds, fpr, tpr, path: Path) -> None:
    rows = [[_fmt(t), _fmt(f), _fmt(p)] for t, f, p in zip(thresholds, fpr, tpr)]
    _write_rows(path, ROC_FORMAT, ROC_COLUMNS, rows)


def read_roc(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = _read_rows(path, ROC_FORMAT, ROC_COLUMNS)
    return (np.array([float(r['threshold']) for r in rows]),
            np.array([float(r['fpr']) for r in rows]),
            np.array([float(r['tpr']) for r in rows]))


def write_verdicts(verdicts, path: Path) -> None:
    """verdicts: Objekte mit segment_id, consistent, positive, total, mean_score."""
    rows = []
    for v in verdicts:
        mean: Optional[float] = v.mean_score
        rows.append([v.segment_id, 'consistent' if v.consistent else 'inconsistent',
                     v.positive, v.total, '' if mean is None else _fmt(mean)])
    _write_rows(path, VERDICT_FORMAT, VERDICT_COLUMNS, rows)


def read_verdicts(path: Path) -> List[Dict[str, str]]:
    return _read_rows(path, VERDICT_FORMAT, VERDICT_COLUMNS)
