"""Tests für dumps und imaging – Artefakt-Dateien und Overlays."""

import numpy as np
import pytest

from src.descriptors import DESCRIPTOR_LAYOUT, DESCRIPTOR_LENGTH
from src.dumps import (
    DumpFormatError,
    descriptor_table,
    merge_tables,
    read_descriptors,
    read_roc,
    read_samples,
    read_scores,
    read_verdicts,
    write_descriptors,
    write_roc,
    write_samples,
    write_scores,
    write_verdicts,
)
from src.imaging import (
    draw_label_overlay,
    draw_sample_overlay,
    image_format,
    load_image,
    save_image,
)
from src.projection import sample_segments, with_label


class _Verdict:
    def __init__(self, segment_id, consistent, positive, total, mean_score):
        self.segment_id = segment_id
        self.consistent = consistent
        self.positive = positive
        self.total = total
        self.mean_score = mean_score


# --- Kopfzeilen und Fehler ---

class TestHeaders:

    def test_scores_file_layout(self, tmp_path):
        path = tmp_path / 'scores.csv'
        write_scores([0.25, -1.5], [1, -1], path)
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == '# oblique-scores v1'
        assert lines[1] == 'score,truth'
        assert lines[2] == '0.25,1'

    def test_empty_scores_file_names_file(self, tmp_path):
        path = tmp_path / 'leer.csv'
        path.write_text('', encoding='utf-8')
        with pytest.raises(DumpFormatError, match='leer.csv'):
            read_scores(path)

    def test_scores_without_rows(self, tmp_path):
        path = tmp_path / 'scores.csv'
        write_scores([], [], path)
        with pytest.raises(DumpFormatError, match='Keine Scores'):
            read_scores(path)

    def test_wrong_format(self, tmp_path):
        path = tmp_path / 'roc.csv'
        write_roc([np.inf, 0.5], [0.0, 1.0], [0.0, 1.0], path)
        with pytest.raises(DumpFormatError, match='Kopfzeile'):
            read_scores(path)

    def test_bad_truth(self, tmp_path):
        path = tmp_path / 'scores.csv'
        write_scores([0.1, 0.2], [1, 0], path)
        with pytest.raises(DumpFormatError, match='truth'):
            read_scores(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DumpFormatError, match='nicht gefunden'):
            read_descriptors(tmp_path / 'fehlt.csv')


# --- Inhalte ---

class TestContents:

    def test_samples_keep_every_field(self, flat_scene, tmp_path):
        samples = with_label(sample_segments(flat_scene)[:5], 'consistent')
        path = tmp_path / 'samples.csv'
        write_samples(samples, path)
        assert read_samples(path) == samples

    def test_descriptor_columns(self, flat_scene, tmp_path):
        samples = with_label(sample_segments(flat_scene)[:3], 'inconsistent')
        values = np.arange(3 * DESCRIPTOR_LENGTH, dtype=float).reshape(3, DESCRIPTOR_LENGTH) / 7.0
        path = tmp_path / 'descriptors.csv'
        write_descriptors(descriptor_table(samples, values), path)

        header = path.read_text(encoding='utf-8').splitlines()[1].split(',')
        assert header[4:-1] == DESCRIPTOR_LAYOUT
        table = read_descriptors(path)
        assert np.array_equal(table.values, values)
        assert table.truths().tolist() == [-1, -1, -1]

    def test_unlabeled_rows_have_no_truth(self, flat_scene):
        samples = sample_segments(flat_scene)[:2]
        table = descriptor_table(samples, np.zeros((2, DESCRIPTOR_LENGTH)))
        with pytest.raises(DumpFormatError, match='Label'):
            table.truths()

    def test_merge_and_select(self, flat_scene):
        samples = sample_segments(flat_scene)
        first = descriptor_table(with_label(samples[:2], 'consistent'), np.zeros((2, DESCRIPTOR_LENGTH)))
        second = descriptor_table(with_label(samples[2:5], 'inconsistent'), np.ones((3, DESCRIPTOR_LENGTH)))
        merged = merge_tables([first, second])
        assert len(merged) == 5
        assert merged.truths().tolist() == [1, 1, -1, -1, -1]
        picked = merged.select([4, 0])
        assert picked.labels == ['inconsistent', 'consistent']
        assert np.array_equal(picked.values[0], np.ones(DESCRIPTOR_LENGTH))

    def test_roc_and_verdicts(self, tmp_path):
        write_roc([np.inf, 0.5, -0.5], [0.0, 0.5, 1.0], [0.0, 1.0, 1.0], tmp_path / 'roc.csv')
        thresholds, fpr, tpr = read_roc(tmp_path / 'roc.csv')
        assert thresholds[0] == np.inf
        assert tpr.tolist() == [0.0, 1.0, 1.0]

        write_verdicts([_Verdict('road-0', True, 7, 9, 0.4), _Verdict('road-1', False, 0, 0, None)],
                       tmp_path / 'verdicts.csv')
        rows = read_verdicts(tmp_path / 'verdicts.csv')
        assert rows[0]['verdict'] == 'consistent'
        assert rows[1] == {'segment_id': 'road-1', 'verdict': 'inconsistent',
                           'positive': '0', 'total': '0', 'mean_score': ''}


# --- Bilder ---

class TestImages:

    def test_png_is_tagged(self, tmp_path):
        image = np.zeros((20, 30, 3), dtype=np.uint8)
        image[5, 7] = (10, 20, 30)
        path = tmp_path / 'image.png'
        save_image(image, path, kind='render')
        assert image_format(path) == 'oblique-image v1'
        assert np.array_equal(load_image(path), image)

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / 'image.png'
        path.write_text('kein Bild', encoding='utf-8')
        with pytest.raises(DumpFormatError):
            load_image(path)

    def test_sample_overlay_colors(self, flat_scene):
        image = np.zeros((480, 640, 3), dtype=np.uint8)
        samples = sample_segments(flat_scene)
        overlay = draw_sample_overlay(image, samples)
        u, v = (int(round(c)) for c in samples[3].px)
        assert tuple(overlay[v, u]) == (0, 0, 255)
        assert overlay.shape == image.shape

    def test_label_overlay_draws_roads(self, flat_scene):
        image = np.zeros((480, 640, 3), dtype=np.uint8)
        overlay = draw_label_overlay(flat_scene, image)
        assert np.any(np.all(overlay == (0, 0, 255), axis=-1))
        assert not np.any(np.all(overlay == (255, 0, 0), axis=-1))
