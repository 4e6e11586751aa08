"""
Tests für conflation – Segment-Urteile, Suchlinien, Glättung und Korrektur.

Der Klassifikator wird durch eine geometrische Attrappe ersetzt: positiv ist,
was in einem bekannten Bildzeilen-Band liegt. So prüfen die Tests die Suche
unabhängig vom trainierten Modell.
"""

import numpy as np
import pytest

from src.conflation import (
    ConflationError,
    ConflationParams,
    SearchLine,
    apply_corrections,
    back_project,
    conflate_segment,
    conflate_segments,
    search_first_positive,
    smooth_chain,
    validate_segments,
)
from src.projection import project_enu, sample_segments, scene_pose

IMAGE = np.zeros((480, 640, 3), dtype=np.uint8)


def band_classifier(*rows, half_width=2.5, max_u=None):
    """Attrappe für classify_samples: positiv in den Bändern |v - row| <= half_width."""
    def classify(image, model, samples, params=None):
        mask = np.zeros(len(samples), dtype=bool)
        for k, sample in enumerate(samples):
            u, v = sample.px
            if max_u is not None and u > max_u:
                continue
            mask[k] = any(abs(v - row) <= half_width for row in rows)
        return mask
    return classify


def east_west_samples(scene):
    return [s for s in sample_segments(scene) if s.segment_id == 'east-west']


# --- Segment-Urteile ---

class TestValidateSegments:

    def test_verdicts_per_segment(self, flat_scene, monkeypatch):
        samples = sample_segments(flat_scene)

        def fake_scores(image, model, samples, params=None, workers=1):
            kept = list(range(1, len(samples)))
            scores = np.array([0.5 if samples[i].segment_id == 'east-west' else -0.5 for i in kept])
            return scores, kept

        monkeypatch.setattr('src.conflation.score_samples', fake_scores)
        verdicts = validate_segments(IMAGE, None, samples)

        assert [v.segment_id for v in verdicts] == ['east-west', 'north-south']
        east_west, north_south = verdicts
        assert east_west.consistent and not north_south.consistent
        assert east_west.total == len(east_west_samples(flat_scene)) - 1
        assert east_west.positive == east_west.total
        assert east_west.mean_score == pytest.approx(0.5)
        assert north_south.positive == 0
        assert len(north_south.samples) == north_south.total

    def test_zero_score_counts_as_positive(self, flat_scene, monkeypatch):
        samples = east_west_samples(flat_scene)
        monkeypatch.setattr('src.conflation.score_samples',
                            lambda image, model, samples, params=None, workers=1:
                            (np.zeros(len(samples)), list(range(len(samples)))))
        (verdict,) = validate_segments(IMAGE, None, samples)
        assert verdict.consistent
        assert verdict.positive == verdict.total

    def test_segment_without_patches_is_skipped(self, flat_scene, monkeypatch):
        monkeypatch.setattr('src.conflation.score_samples',
                            lambda image, model, samples, params=None, workers=1: (np.zeros(0), []))
        assert validate_segments(IMAGE, None, sample_segments(flat_scene)) == []


# --- Suchlinien ---

class TestSearch:

    def test_search_line_points(self):
        line = SearchLine((10.0, 20.0), (0.0, 1.0), half_length_px=10.0, step_px=4.0)
        assert line.distances().tolist() == [4.0, 8.0]
        assert line.points(-1).tolist() == [[10.0, 16.0], [10.0, 12.0]]

    def test_invalid_search_line(self):
        with pytest.raises(ConflationError):
            SearchLine((10.0, 20.0), (0.0, 1.0), step_px=0.0)

    def test_first_positive_and_run_center(self, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0, half_width=10.0))
        line = SearchLine((320.0, 239.5), (0.0, 1.0))
        plus, minus = search_first_positive(IMAGE, None, line)
        assert plus is None
        assert minus == (320.0, 207.5)
        _, centered = search_first_positive(IMAGE, None, line, refine=True)
        assert centered == (320.0, 199.5)

    def test_origin_outside_image(self, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0))
        with pytest.raises(ConflationError, match='außerhalb'):
            search_first_positive(IMAGE, None, SearchLine((700.0, 100.0), (0.0, 1.0)))


# --- Glättung und Rückprojektion ---

class TestGeometry:

    def test_collinear_chain_stays_fixed(self):
        points = np.column_stack([np.linspace(0.0, 100.0, 9), 0.5 * np.linspace(0.0, 100.0, 9) + 3.0])
        assert smooth_chain(points) == pytest.approx(points, abs=1e-6)

    def test_smoothing_reduces_scatter(self):
        rng = np.random.default_rng(4)
        u = np.linspace(0.0, 200.0, 25)
        noisy = np.column_stack([u, 100.0 + rng.normal(0.0, 2.0, len(u))])
        smoothed = smooth_chain(noisy)
        assert np.std(smoothed[:, 1] - 100.0) < np.std(noisy[:, 1] - 100.0)

    def test_short_chain_is_copied(self):
        points = np.array([[0.0, 0.0], [1.0, 5.0]])
        result = smooth_chain(points)
        assert np.array_equal(result, points)
        assert result is not points

    def test_back_projection_reprojects(self, flat_scene):
        pixels = np.array([[319.5, 239.5], [100.0, 300.0], [500.0, 150.0]])
        kept, points = back_project(flat_scene, pixels)
        assert len(points) == 3
        assert all(p.alt == pytest.approx(100.0, abs=1e-6) for p in points)
        enu = np.array([flat_scene.frame.point_to_enu(p) for p in points])
        uv, _ = project_enu(scene_pose(flat_scene), enu)
        assert np.max(np.hypot(*(uv - kept).T)) < 0.5

    def test_sky_pixels_are_dropped(self, make_scene):
        kept, points = back_project(make_scene(pitch_deg=80.0), np.array([[320.0, 0.0]]))
        assert len(kept) == 0 and points == ()


# --- Korrektur ---

class TestConflateSegment:

    def test_finds_displaced_road(self, flat_scene, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0))
        samples = east_west_samples(flat_scene)
        result = conflate_segment(flat_scene, IMAGE, None, samples)

        assert result.segment_id == 'east-west'
        assert len(result.lines) == len(samples)
        assert all(p is None for p in result.detections[0])
        assert result.corrected_sides == (-1,)
        (polyline,) = result.corrected_polylines
        # zehn Suchschritte zu 4 px oberhalb der Vektorstraße
        expected_v = samples[0].px[1] - 40.0
        assert polyline[:, 1] == pytest.approx(np.full(len(polyline), expected_v), abs=1e-6)
        # weiter nördlich als die Vektorstraße bei n = 168
        north = [flat_scene.frame.point_to_enu(p)[1] for p in result.corrected_geo[0]]
        assert min(north) > 168.0

    def test_detections_hold_run_centers_by_default(self, flat_scene, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0, half_width=10.0))
        samples = east_west_samples(flat_scene)
        centered = conflate_segment(flat_scene, IMAGE, None, samples)
        first = conflate_segment(flat_scene, IMAGE, None, samples, ConflationParams(refine_to_run_center=False))

        for line, mid, start in zip(centered.lines, centered.detections[1], first.detections[1]):
            points = line.points(-1)
            inside = np.flatnonzero(np.abs(points[:, 1] - 200.0) <= 10.0)
            assert start == pytest.approx(tuple(points[inside[0]]))
            assert mid == pytest.approx(tuple(points[(inside[0] + inside[-1]) // 2]))

    def test_both_sides_kept_when_apart(self, flat_scene, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0, 280.0))
        result = conflate_segment(flat_scene, IMAGE, None, east_west_samples(flat_scene))
        assert result.corrected_sides == (1, -1)

    def test_same_road_on_both_sides_is_merged(self, flat_scene, monkeypatch):
        samples = east_west_samples(flat_scene)
        monkeypatch.setattr('src.conflation.classify_samples',
                            band_classifier(samples[0].px[1], half_width=5.0))
        result = conflate_segment(flat_scene, IMAGE, None, samples)
        assert result.corrected_sides == (1,)

    def test_sparse_side_is_discarded(self, flat_scene, monkeypatch):
        samples = east_west_samples(flat_scene)
        monkeypatch.setattr('src.conflation.classify_samples',
                            band_classifier(200.0, max_u=samples[0].px[0] + 1.0))
        result = conflate_segment(flat_scene, IMAGE, None, samples)
        assert sum(p is not None for p in result.detections[1]) == 1
        assert result.corrected_polylines == ()

    def test_too_few_samples(self, flat_scene):
        with pytest.raises(ConflationError, match='Mindestens 3'):
            conflate_segment(flat_scene, IMAGE, None, east_west_samples(flat_scene)[:2])

    def test_invalid_params(self, flat_scene):
        with pytest.raises(ConflationError, match='window'):
            conflate_segment(flat_scene, IMAGE, None, east_west_samples(flat_scene),
                             ConflationParams(window=1))

    def test_conflate_segments_skips_short_segments(self, flat_scene, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0))
        results = conflate_segments(flat_scene, IMAGE, None, {
            'east-west': east_west_samples(flat_scene),
            'north-south': [s for s in sample_segments(flat_scene) if s.segment_id == 'north-south'][:2],
        })
        assert [r.segment_id for r in results] == ['east-west']

    def test_apply_corrections(self, flat_scene, monkeypatch):
        monkeypatch.setattr('src.conflation.classify_samples', band_classifier(200.0))
        result = conflate_segment(flat_scene, IMAGE, None, east_west_samples(flat_scene))
        corrected = apply_corrections(flat_scene, [result])

        ids = [s.id for s in corrected.roads.segments]
        assert ids == ['east-west', 'north-south', 'east-west.c0']
        added = corrected.roads.by_id('east-west.c0')
        assert added.source == 'conflation'
        assert added.alt_source == 'dem'
        assert added.width_m == flat_scene.roads.by_id('east-west').width_m
        assert len(added.polyline) >= 2
        assert len(flat_scene.roads.segments) == 2
