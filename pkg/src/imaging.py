"""
Raster-Ein-/Ausgabe (PNG) und Overlays für Abtastpunkte, Urteile und Korrekturen.
"""

from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from src.dumps import DumpFormatError
from src.projection import (
    ProjectedSample,
    densify_segment,
    in_image,
    occlusion_mask,
    project_enu,
    scene_pose,
)
from src.scene_model import Scene

IMAGE_FORMAT = 'oblique-image'
IMAGE_FORMAT_VERSION = 1

BLUE = (0, 0, 255)
RED = (255, 0, 0)
GREEN = (0, 200, 0)
YELLOW = (255, 220, 0)
CYAN = (0, 230, 230)

# Strichlänge für verdeckte Abschnitte (Pixel)
DASH_PX = 8.0


def save_image(image: np.ndarray, path: Path, kind: str = 'render') -> None:
    """
    Speichert ein RGB-Bild als PNG mit Format-Text-Chunk.

    Args:
        image: (H, W, 3) uint8
        path: Zieldatei
        kind: Art des Bildes (render, samples, verdicts, conflation, ...)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngInfo()
    info.add_text('format', f"{IMAGE_FORMAT} v{IMAGE_FORMAT_VERSION}")
    info.add_text('kind', kind)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format='PNG', pnginfo=info)


def load_image(path: Path) -> np.ndarray:
    """
    Lädt ein Bild als (H, W, 3) uint8.

    Raises:
        DumpFormatError: Datei fehlt oder ist kein lesbares Bild
    """
    path = Path(path)
    if not path.exists():
        raise DumpFormatError(f"Bild nicht gefunden: {path}")
    try:
        with Image.open(path) as img:
            return np.array(img.convert('RGB'), dtype=np.uint8)
    except OSError as e:
        raise DumpFormatError(f"Bild nicht lesbar: {path}: {e}") from e


def image_format(path: Path) -> Optional[str]:
    """Wert des PNG-Text-Chunks 'format' oder None."""
    with Image.open(path) as img:
        return img.info.get('format')


def to_canvas(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).copy()


def draw_polyline(draw: ImageDraw.ImageDraw, points: Sequence[Tuple[float, float]],
                  color, width: int = 2, dashed: bool = False) -> None:
    points = [(float(u), float(v)) for u, v in points]
    if len(points) < 2:
        return
    if not dashed:
        draw.line(points, fill=color, width=width)
        return

    # Strichmuster läuft über Stützpunkte hinweg weiter
    travelled = 0.0
    for (u0, v0), (u1, v1) in zip(points[:-1], points[1:]):
        length = float(np.hypot(u1 - u0, v1 - v0))
        if length == 0.0:
            continue
        s = 0.0
        while s < length:
            phase = (travelled + s) % (2 * DASH_PX)
            run = min(length - s, (DASH_PX - phase) if phase < DASH_PX else (2 * DASH_PX - phase))
            if phase < DASH_PX:
                a = (u0 + (u1 - u0) * s / length, v0 + (v1 - v0) * s / length)
                b = (u0 + (u1 - u0) * (s + run) / length, v0 + (v1 - v0) * (s + run) / length)
                draw.line([a, b], fill=color, width=width)
            s += run
        travelled += length


def draw_circle(draw: ImageDraw.ImageDraw, center: Tuple[float, float], radius: float,
                color, fill: bool = True, width: int = 2) -> None:
    u, v = center
    box = [u - radius, v - radius, u + radius, v + radius]
    if fill:
        draw.ellipse(box, fill=color)
    else:
        draw.ellipse(box, outline=color, width=width)


def draw_sample_overlay(image: np.ndarray, samples: Iterable[ProjectedSample],
                        radius: float = 2.5) -> np.ndarray:
    """Sichtbare Abtastpunkte blau, verdeckte rot."""
    canvas = to_canvas(image)
    draw = ImageDraw.Draw(canvas)
    for s in samples:
        draw_circle(draw, s.px, radius, BLUE if s.visible else RED)
    return np.array(canvas)


def draw_label_overlay(scene: Scene, image: np.ndarray, width: int = 2) -> np.ndarray:
    """
    Projiziert alle Straßen als Linien: sichtbare Abschnitte durchgezogen,
    hinter Gebäuden oder Gelände verdeckte Abschnitte gestrichelt.
    """
    pose = scene_pose(scene)
    canvas = to_canvas(image)
    draw = ImageDraw.Draw(canvas)
    for segment in scene.roads.segments:
        dense = densify_segment(scene, segment)
        uv, depth = project_enu(pose, dense)
        front = depth > 0
        if not np.any(front):
            continue
        hidden = np.zeros(len(dense), dtype=bool)
        inside = front & in_image(pose, uv)
        if np.any(inside):
            hidden[inside] = occlusion_mask(scene, dense[inside])

        # In Stücke gleicher Sichtbarkeit zerlegen, Nachbarstücke berühren sich
        state = [bool(hidden[i]) if front[i] else None for i in range(len(dense))]
        i = 0
        while i < len(state):
            j = i
            while j + 1 < len(state) and state[j + 1] == state[i]:
                j += 1
            if state[i] is not None:
                end = j + 2 if j + 1 < len(state) and state[j + 1] is not None else j + 1
                draw_polyline(draw, uv[i:end], RED if state[i] else BLUE, width, dashed=state[i])
            i = j + 1
    return np.array(canvas)


def draw_verdict_overlay(image: np.ndarray, samples_by_segment: Dict[str, Sequence[ProjectedSample]],
                         consistent: Dict[str, bool], width: int = 3) -> np.ndarray:
    """Segmente als Linie durch ihre Abtastpunkte: konsistent blau, inkonsistent rot."""
    canvas = to_canvas(image)
    draw = ImageDraw.Draw(canvas)
    for segment_id, samples in samples_by_segment.items():
        if segment_id not in consistent:
            continue
        color = BLUE if consistent[segment_id] else RED
        points = [s.px for s in sorted(samples, key=lambda s: s.index)]
        if len(points) == 1:
            draw_circle(draw, points[0], width, color)
        else:
            draw_polyline(draw, points, color, width)
    return np.array(canvas)


def draw_conflation_overlay(image: np.ndarray, results, width: int = 2,
                            radius: float = 5.0) -> np.ndarray:
    """
    Suchlinien grün, Treffer gelb umkreist, korrigierte Straßen cyan.

    results: Objekte mit lines, detections und corrected_polylines (siehe conflation).
    """
    canvas = to_canvas(image)
    draw = ImageDraw.Draw(canvas)
    for result in results:
        for line in result.lines:
            a = line.points(-1)[-1] if len(line.distances()) else np.asarray(line.origin_px)
            b = line.points(1)[-1] if len(line.distances()) else np.asarray(line.origin_px)
            draw_polyline(draw, [a, b], GREEN, 1)
        for side in result.detections:
            for point in side:
                if point is not None:
                    draw_circle(draw, point, radius, YELLOW, fill=False)
        for polyline in result.corrected_polylines:
            draw_polyline(draw, polyline, CYAN, width + 1)
    return np.array(canvas)
