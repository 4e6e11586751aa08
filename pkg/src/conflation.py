"""
Segment-Urteile und Korrektur inkonsistenter Straßen.

validate_segments bewertet jede Straße über den Anteil positiv klassifizierter
Abtastpunkte. Für inkonsistente Straßen sucht conflate_segment entlang von
Suchlinien quer zur Straße nach der ersten positiven Stelle auf beiden Seiten,
glättet die Treffer zu Polylinien und projiziert sie auf das DEM zurück.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.descriptors import DescriptorParams, extract_raw_descriptors, finalize_matrix
from src.projection import (
    ProjectedSample,
    in_image,
    intersect_dem_rays,
    pixel_rays,
    polyline_distance,
    scene_pose,
)
from src.scene_model import GeoPoint, RoadSegment, Scene, with_roads
from src.svm import SvmModel, decision_values

HALF_LENGTH_PX = 100.0
STEP_PX = 4.0
SMOOTH_WINDOW = 5
MIN_DETECTIONS = 3

# Seiten mit Treffern auf weniger als diesem Anteil der Suchlinien gelten als Störung
MIN_COVERAGE = 0.5

# Beide Seiten fanden dieselbe Straße, wenn ihre Linien im Median näher liegen
MERGE_DISTANCE_PX = 16.0

CONSISTENCY_THRESHOLD = 0.5

Point = Tuple[float, float]


class ConflationError(ValueError):
    """Ungültige Suchparameter oder zu wenige Abtastpunkte für eine Korrektur."""


@dataclass(frozen=True)
class ConflationParams:
    """
    Such- und Korrekturparameter.

    refine_to_run_center: Treffer einer Seite ist die Mitte des ersten
    zusammenhängenden positiven Laufs statt seiner ersten Stelle.
    """
    half_length_px: float = HALF_LENGTH_PX
    step_px: float = STEP_PX
    window: int = SMOOTH_WINDOW
    min_detections: int = MIN_DETECTIONS
    min_coverage: float = MIN_COVERAGE
    refine_to_run_center: bool = True
    merge_distance_px: float = MERGE_DISTANCE_PX
    descriptor: DescriptorParams = DescriptorParams()

    def validate(self) -> None:
        if not (math.isfinite(self.half_length_px) and self.half_length_px > 0):
            raise ConflationError(f"half_length_px muss > 0 sein, ist {self.half_length_px}")
        if not (math.isfinite(self.step_px) and self.step_px > 0):
            raise ConflationError(f"step_px muss > 0 sein, ist {self.step_px}")
        if self.window < 2:
            raise ConflationError(f"window muss >= 2 sein, ist {self.window}")
        if self.min_detections < 1 or not 0.0 <= self.min_coverage <= 1.0:
            raise ConflationError("min_detections >= 1 und min_coverage in [0, 1] erwartet")


@dataclass(frozen=True)
class SearchLine:
    origin_px: Point
    direction: Point
    half_length_px: float = HALF_LENGTH_PX
    step_px: float = STEP_PX
    # Abtastpunkt, dessen Richtungsrahmen die Suchpunkte erben
    sample: Optional[ProjectedSample] = None

    def __post_init__(self):
        if not self.half_length_px > 0 or not self.step_px > 0:
            raise ConflationError("Suchlinie braucht half_length_px > 0 und step_px > 0")

    def distances(self) -> np.ndarray:
        count = int(math.floor(self.half_length_px / self.step_px + 1e-9))
        return self.step_px * np.arange(1, count + 1)

    def points(self, sign: int) -> np.ndarray:
        """Suchpunkte auf einer Seite (sign +1 entlang direction, -1 dagegen)."""
        d = self.distances()
        return np.asarray(self.origin_px) + sign * d[:, None] * np.asarray(self.direction)


@dataclass(frozen=True, eq=False)
class ConflationResult:
    segment_id: str
    lines: Tuple[SearchLine, ...]
    # Je Seite (+, -) ein Treffer pro Suchlinie oder None. Mit refine_to_run_center
    # (Standard) ist das die Mitte des ersten positiven Laufs, sonst die erste positive Stelle.
    detections: Tuple[Tuple[Optional[Point], ...], Tuple[Optional[Point], ...]]
    corrected_polylines: Tuple[np.ndarray, ...] = ()
    corrected_geo: Tuple[Tuple[GeoPoint, ...], ...] = ()
    # Seite (+1/-1), aus der jede korrigierte Linie stammt
    corrected_sides: Tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class SegmentVerdict:
    segment_id: str
    consistent: bool
    positive: int
    total: int
    mean_score: float
    samples: Tuple[ProjectedSample, ...] = ()
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))


# --- Klassifikation ---

def candidate_sample(sample: Optional[ProjectedSample], px, direction: Point) -> ProjectedSample:
    """Abtastpunkt an px mit dem Richtungsrahmen des Ursprungs (oder quer zu direction)."""
    px = (float(px[0]), float(px[1]))
    if sample is not None:
        return replace(sample, px=px, label='unlabeled')
    primary = (float(direction[1]), -float(direction[0]))
    return ProjectedSample(segment_id='search', index=0, world=GeoPoint(0.0, 0.0, 0.0), px=px,
                           primary_dir=primary, normal_dir=(-primary[1], primary[0]), visible=True)


def score_samples(image: np.ndarray, model: SvmModel, samples: Sequence[ProjectedSample],
                  params: DescriptorParams = DescriptorParams(),
                  workers: int = 1) -> Tuple[np.ndarray, List[int]]:
    """
    Scores aller Abtastpunkte mit gültigem Ausschnitt.

    Returns:
        (Scores, Indizes der bewerteten Abtastpunkte)
    """
    raw, kept = extract_raw_descriptors(image, samples, params, workers=workers)
    if not kept:
        return np.zeros(0), []
    return decision_values(model, finalize_matrix(raw, model.color_scaling)), kept


def classify_samples(image: np.ndarray, model: SvmModel, samples: Sequence[ProjectedSample],
                     params: DescriptorParams = DescriptorParams()) -> np.ndarray:
    """Positiv-Maske; Abtastpunkte ohne gültigen Ausschnitt gelten als negativ."""
    positive = np.zeros(len(samples), dtype=bool)
    if len(samples) == 0:
        return positive
    scores, kept = score_samples(image, model, samples, params)
    positive[kept] = scores >= 0
    return positive


# --- Segment-Urteile ---

def validate_segments(image: np.ndarray, model: SvmModel, samples: Sequence[ProjectedSample],
                      params: DescriptorParams = DescriptorParams(),
                      threshold: float = CONSISTENCY_THRESHOLD, workers: int = 1,
                      verbose: bool = False) -> List[SegmentVerdict]:
    """
    Urteil pro Straße aus den Scores ihrer Abtastpunkte.

    Verdeckte Abtastpunkte werden mitbewertet, damit Verdeckung über den
    Bildinhalt auffällt. Straßen ohne bewertbaren Abtastpunkt entfallen.

    Args:
        image: Bild
        model: trainiertes Modell
        samples: Abtastpunkte aller Straßen
        params: Deskriptor-Parameter
        threshold: Mindestanteil positiver Abtastpunkte für "konsistent"
        workers: Prozesse für die Deskriptor-Extraktion
        verbose: Fortschritt ausgeben

    Returns:
        Urteile in der Reihenfolge des ersten Auftretens der Straßen
    """
    samples = list(samples)
    scores, kept = score_samples(image, model, samples, params, workers)

    grouped: Dict[str, List[int]] = {}
    for row, index in enumerate(kept):
        grouped.setdefault(samples[index].segment_id, []).append(row)

    verdicts = []
    for segment_id, rows in grouped.items():
        segment_scores = scores[rows]
        positive = int(np.sum(segment_scores >= 0))
        verdicts.append(SegmentVerdict(
            segment_id=segment_id,
            consistent=positive / len(rows) >= threshold,
            positive=positive,
            total=len(rows),
            mean_score=float(np.mean(segment_scores)),
            samples=tuple(samples[kept[r]] for r in rows),
            scores=segment_scores,
        ))
    if verbose:
        bad = sum(1 for v in verdicts if not v.consistent)
        print(f"   Segments: {len(verdicts)} judged, {bad} inconsistent")
    return verdicts


# --- Suche ---

def search_first_positive(image: np.ndarray, model: SvmModel, line: SearchLine,
                          params: ConflationParams = ConflationParams(),
                          refine: bool = False) -> Tuple[Optional[Point], Optional[Point]]:
    """
    Erste positiv klassifizierte Stelle auf beiden Seiten einer Suchlinie.

    Args:
        image: Bild
        model: trainiertes Modell
        line: Suchlinie
        params: Such- und Deskriptor-Parameter
        refine: statt der ersten positiven Stelle die Mitte des positiven Laufs liefern

    Returns:
        (Treffer in +direction, Treffer in -direction), jeweils None ohne Treffer

    Raises:
        ConflationError: Ursprung liegt außerhalb des Bildes
    """
    height, width = image.shape[:2]
    u, v = line.origin_px
    if not (0 <= u <= width - 1 and 0 <= v <= height - 1):
        raise ConflationError(f"Ursprung der Suchlinie außerhalb des Bildes: ({u:.1f}, {v:.1f})")

    found: List[Optional[Point]] = []
    for sign in (1, -1):
        points = line.points(sign)
        candidates = [candidate_sample(line.sample, p, line.direction) for p in points]
        positive = classify_samples(image, model, candidates, params.descriptor)
        hits = np.flatnonzero(positive)
        if len(hits) == 0:
            found.append(None)
            continue
        pick = first = int(hits[0])
        if refine:
            last = first
            while last + 1 < len(positive) and positive[last + 1]:
                last += 1
            pick = (first + last) // 2
        found.append((float(points[pick, 0]), float(points[pick, 1])))
    return found[0], found[1]


def smooth_chain(points, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """
    Gleitende Ausgleichsgerade (total least squares) über window Punkte.

    Jeder Punkt wird auf die Gerade seines Fensters projiziert; an den Enden
    wird das Fenster nach innen verschoben. Kollineare Punkte bleiben fest.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < 3:
        return points.copy()
    w = min(window, n)
    half = w // 2
    smoothed = np.empty_like(points)
    for i in range(n):
        lo = min(max(i - half, 0), n - w)
        block = points[lo:lo + w]
        mean = block.mean(axis=0)
        _, _, vt = np.linalg.svd(block - mean)
        axis = vt[0]
        smoothed[i] = mean + np.dot(points[i] - mean, axis) * axis
    return smoothed


def back_project(scene: Scene, polyline: np.ndarray) -> Tuple[np.ndarray, Tuple[GeoPoint, ...]]:
    """
    Schneidet die Sehstrahlen der Bildpunkte mit dem DEM.

    Returns:
        (Bildpunkte mit Schnitt, zugehörige geodätische Punkte)
    """
    polyline = np.atleast_2d(np.asarray(polyline, dtype=float))
    pose = scene_pose(scene)
    dirs = pixel_rays(pose, polyline)
    t = intersect_dem_rays(scene, pose.center, dirs)
    hit = np.isfinite(t)
    enu = pose.center + t[hit, None] * dirs[hit]
    frame = scene.frame
    return polyline[hit], tuple(frame.enu_to_point(p) for p in enu)


def conflate_segment(scene: Scene, image: np.ndarray, model: SvmModel,
                     samples: Sequence[ProjectedSample],
                     params: ConflationParams = ConflationParams()) -> ConflationResult:
    """
    Korrigiert eine inkonsistente Straße anhand des Bildinhalts.

    Pro Abtastpunkt eine Suchlinie entlang normal_dir; Treffer je Seite werden
    zur Kette (mit refine_to_run_center die Laufmitten, sonst die ersten
    positiven Stellen), Ketten mit zu wenigen Treffern verworfen. Die Ketten werden
    geglättet, geglättete Punkte mit negativer Klassifikation durch den Treffer
    selbst ersetzt und auf das DEM zurückprojiziert. Liegen beide Ketten auf
    derselben Straße, bleibt die mit mehr Treffern (bei Gleichstand +).

    Raises:
        ConflationError: weniger als 3 Abtastpunkte oder ungültige Parameter
    """
    params.validate()
    samples = sorted(samples, key=lambda s: s.index)
    if len(samples) < 3:
        raise ConflationError(f"Mindestens 3 Abtastpunkte nötig, {len(samples)} vorhanden")
    segment_id = samples[0].segment_id
    pose = scene_pose(scene)

    lines = tuple(
        SearchLine(s.px, s.normal_dir, params.half_length_px, params.step_px, s)
        for s in samples if in_image(pose, np.array([s.px]))[0]
    )
    plus: List[Optional[Point]] = []
    minus: List[Optional[Point]] = []
    for line in lines:
        a, b = search_first_positive(image, model, line, params, refine=params.refine_to_run_center)
        plus.append(a)
        minus.append(b)

    chains = []
    for sign, found in ((1, plus), (-1, minus)):
        rows = [k for k, p in enumerate(found) if p is not None]
        if len(rows) < params.min_detections or len(rows) < params.min_coverage * len(lines):
            continue
        raw = np.array([found[k] for k in rows])
        smooth = smooth_chain(raw, params.window)
        candidates = [candidate_sample(lines[k].sample, p, lines[k].direction) for k, p in zip(rows, smooth)]
        keep = classify_samples(image, model, candidates, params.descriptor)
        chains.append((sign, len(rows), np.where(keep[:, None], smooth, raw)))

    if len(chains) == 2:
        (_, count_a, line_a), (_, count_b, line_b) = chains
        if float(np.median(polyline_distance(line_a, line_b))) < params.merge_distance_px:
            chains = [chains[0] if count_a >= count_b else chains[1]]

    polylines, geo, sides = [], [], []
    for sign, _, polyline in chains:
        kept_px, points = back_project(scene, polyline)
        if len(points) < 2:
            continue
        polylines.append(kept_px)
        geo.append(points)
        sides.append(sign)

    return ConflationResult(
        segment_id=segment_id,
        lines=lines,
        detections=(tuple(plus), tuple(minus)),
        corrected_polylines=tuple(polylines),
        corrected_geo=tuple(geo),
        corrected_sides=tuple(sides),
    )


# --- Parallel über Segmente ---

_WORKER_STATE: Optional[Tuple[Scene, np.ndarray, SvmModel, ConflationParams]] = None


def _init_worker(scene: Scene, image: np.ndarray, model: SvmModel, params: ConflationParams) -> None:
    global _WORKER_STATE
    _WORKER_STATE = (scene, image, model, params)


def _conflate_one(samples: List[ProjectedSample]) -> ConflationResult:
    scene, image, model, params = _WORKER_STATE
    return conflate_segment(scene, image, model, samples, params)


def conflate_segments(scene: Scene, image: np.ndarray, model: SvmModel,
                      samples_by_segment: Dict[str, Sequence[ProjectedSample]],
                      params: ConflationParams = ConflationParams(), workers: int = 1,
                      verbose: bool = False) -> List[ConflationResult]:
    """
    conflate_segment für mehrere Straßen, Ergebnis in Eingabereihenfolge.

    Straßen mit weniger als 3 Abtastpunkten werden übersprungen.
    """
    params.validate()
    jobs = []
    for segment_id, samples in samples_by_segment.items():
        if len(samples) < 3:
            if verbose:
                print(f"   ⚠️  {segment_id}: nur {len(samples)} Abtastpunkte, übersprungen")
            continue
        jobs.append(list(samples))

    if workers <= 1 or len(jobs) < 2:
        results = [conflate_segment(scene, image, model, samples, params) for samples in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), initializer=_init_worker,
                                 initargs=(scene, image, model, params)) as pool:
            results = list(pool.map(_conflate_one, jobs))

    if verbose:
        for result in results:
            print(f"   {result.segment_id}: {len(result.corrected_polylines)} korrigierte Linie(n)")
    return results


def apply_corrections(scene: Scene, results: Sequence[ConflationResult]) -> Scene:
    """
    Hängt korrigierte Straßen an das Straßennetz an.

    IDs: '<segment>.c<n>', source 'conflation', Höhen aus dem DEM.
    """
    segments = list(scene.roads.segments)
    widths = {s.id: s.width_m for s in segments}
    for result in results:
        for n, points in enumerate(result.corrected_geo):
            polyline = [points[0]]
            for p in points[1:]:
                if (p.lat, p.lon) != (polyline[-1].lat, polyline[-1].lon):
                    polyline.append(p)
            if len(polyline) < 2:
                continue
            kwargs = {}
            if result.segment_id in widths:
                kwargs['width_m'] = widths[result.segment_id]
            segments.append(RoadSegment(id=f"{result.segment_id}.c{n}", polyline=tuple(polyline),
                                        alt_source='dem', source='conflation', **kwargs))
    return with_roads(scene, segments)
