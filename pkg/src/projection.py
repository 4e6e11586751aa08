"""
Projektion von Straßenvektoren ins Schrägluftbild.

Berücksichtigt Gelände (Straßen liegen auf dem DEM) und Verdeckung durch
Gebäude-Prismen und das Gelände selbst. Liefert entlang jeder projizierten
Straße Abtastpunkte im festen Bildabstand, jeweils mit Haupt- und
Normalenrichtung im Bild (lokales Koordinatensystem der Deskriptoren).
"""

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.scene_model import (
    BuildingPrism,
    Camera,
    GeoPoint,
    LocalFrame,
    RoadSegment,
    Scene,
    camera_rotation,
    dem_cell_size_m,
    dem_height_enu,
)

# Abtastabstand entlang der projizierten Straße (Pixel)
SPACING_PX = 12.0

# Schrittweite der Verdichtung in Weltkoordinaten (Meter)
DENSIFY_M = 0.5

# Clipping-Ebene vor der Kamera (Meter)
NEAR_PLANE_M = 0.1

# Treffer näher als das am Zielpunkt zählen als sichtbar (Punkt auf der Fläche)
SURFACE_EPS_M = 1e-6


@dataclass(frozen=True)
class CameraPose:
    """Kamera im lokalen ENU-Rahmen der Szene."""
    rotation: np.ndarray
    center: np.ndarray
    focal_px: float
    principal: Tuple[float, float]
    image_size: Tuple[int, int]


@dataclass(frozen=True)
class ProjectedSample:
    segment_id: str
    index: int
    world: GeoPoint
    px: Tuple[float, float]
    primary_dir: Tuple[float, float]
    normal_dir: Tuple[float, float]
    visible: bool
    label: str = 'unlabeled'
    source: str = 'road'


def camera_pose(cam: Camera, frame: LocalFrame) -> CameraPose:
    return CameraPose(
        rotation=camera_rotation(cam),
        center=frame.point_to_enu(cam.position),
        focal_px=float(cam.focal_px),
        principal=(float(cam.principal[0]), float(cam.principal[1])),
        image_size=(int(cam.image_size[0]), int(cam.image_size[1])),
    )


def scene_pose(scene: Scene) -> CameraPose:
    return camera_pose(scene.camera, scene.frame)


def project_enu(pose: CameraPose, points) -> Tuple[np.ndarray, np.ndarray]:
    """
    Perspektivische Projektion vieler ENU-Punkte.

    Returns:
        (uv, depth): uv als (n, 2), Tiefe entlang der optischen Achse als (n,).
        Für depth <= 0 ist uv NaN.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cam = (points - pose.center) @ pose.rotation.T
    depth = cam[:, 2]
    uv = np.full((len(points), 2), np.nan)
    front = depth > 0
    uv[front, 0] = pose.principal[0] + pose.focal_px * cam[front, 0] / depth[front]
    uv[front, 1] = pose.principal[1] + pose.focal_px * cam[front, 1] / depth[front]
    return uv, depth


def project_point(cam: Camera, p: GeoPoint, frame: LocalFrame) -> Optional[Tuple[float, float]]:
    """
    Projiziert einen geodätischen Punkt ins Bild.

    Returns:
        (u, v) in Subpixel-Koordinaten oder None, wenn der Punkt hinter der Kamera liegt
    """
    uv, depth = project_enu(camera_pose(cam, frame), frame.point_to_enu(p))
    if depth[0] <= 0:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def pixel_ray(pose: CameraPose, u: float, v: float) -> Tuple[np.ndarray, np.ndarray]:
    """Sehstrahl eines Pixels: (Ursprung = Kamerazentrum, Einheitsrichtung in ENU)."""
    direction_cam = np.array([
        (u - pose.principal[0]) / pose.focal_px,
        (v - pose.principal[1]) / pose.focal_px,
        1.0,
    ])
    direction = pose.rotation.T @ direction_cam
    return pose.center.copy(), direction / np.linalg.norm(direction)


def pixel_rays(pose: CameraPose, uv) -> np.ndarray:
    """Einheitsrichtungen (n, 3) der Sehstrahlen vieler Pixel."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    direction_cam = np.stack([
        (uv[:, 0] - pose.principal[0]) / pose.focal_px,
        (uv[:, 1] - pose.principal[1]) / pose.focal_px,
        np.ones(len(uv)),
    ], axis=1)
    directions = direction_cam @ pose.rotation
    return directions / np.linalg.norm(directions, axis=1)[:, None]


def in_image(pose: CameraPose, uv: np.ndarray) -> np.ndarray:
    width, height = pose.image_size
    uv = np.atleast_2d(uv)
    with np.errstate(invalid='ignore'):
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1))


def point_segment_distances(points, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Abstände vieler Punkte (n, 2) zu den Strecken a[k]-b[k] (k, 2) als (n, k)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ab = b - a
    length2 = np.maximum((ab * ab).sum(axis=1), 1e-12)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip((rel * ab[None, :, :]).sum(axis=2) / length2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def polyline_distance(points, polyline) -> np.ndarray:
    """Abstand jedes Punkts zur nächsten Stelle einer Polylinie (mind. 2 Punkte)."""
    polyline = np.asarray(polyline, dtype=float)
    return point_segment_distances(points, polyline[:-1], polyline[1:]).min(axis=1)


# --- Gebäude-Geometrie ---

@dataclass(frozen=True)
class PrismGeometry:
    id: str
    polygon: np.ndarray  # (k, 2) East/North
    z_bottom: float
    z_top: float


def prism_geometry(building: BuildingPrism, frame: LocalFrame) -> PrismGeometry:
    footprint = np.array(building.footprint, dtype=float)
    enu = frame.to_enu(footprint[:, 0], footprint[:, 1], 0.0)
    return PrismGeometry(
        id=building.id,
        polygon=enu[:, :2],
        z_bottom=float(building.base_alt),
        z_top=float(building.base_alt + building.height),
    )


@lru_cache(maxsize=16)
def scene_prisms(scene: Scene) -> Tuple[PrismGeometry, ...]:
    return tuple(prism_geometry(b, scene.frame) for b in scene.buildings)


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd-Test für viele Punkte (n, 2) gegen ein Polygon (k, 2)."""
    x = points[:, 0]
    y = points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    k = len(polygon)
    for i in range(k):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % k]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide='ignore', invalid='ignore'):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < x_cross)
    return inside


def prism_hit_params(origin: np.ndarray, dirs: np.ndarray, prism: PrismGeometry) -> np.ndarray:
    """
    Kleinster Strahlparameter t > 0, bei dem origin + t * dirs das Prisma trifft.

    Geprüft werden Dach, Boden und alle Wände. Kein Treffer = inf.
    """
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    best = np.full(n, np.inf)

    with np.errstate(divide='ignore', invalid='ignore'):
        # Dach und Boden
        for z_plane in (prism.z_top, prism.z_bottom):
            t = (z_plane - origin[2]) / dirs[:, 2]
            ok = np.isfinite(t) & (t > 0)
            if np.any(ok):
                xy = origin[:2] + t[:, None] * dirs[:, :2]
                hit = ok.copy()
                hit[ok] = points_in_polygon(xy[ok], prism.polygon)
                best = np.where(hit & (t < best), t, best)

        # Wände
        k = len(prism.polygon)
        for i in range(k):
            a = prism.polygon[i]
            edge = prism.polygon[(i + 1) % k] - a
            denom = dirs[:, 0] * edge[1] - dirs[:, 1] * edge[0]
            rel = a - origin[:2]
            t = (rel[0] * edge[1] - rel[1] * edge[0]) / denom
            s = (rel[0] * dirs[:, 1] - rel[1] * dirs[:, 0]) / denom
            z = origin[2] + t * dirs[:, 2]
            hit = (np.abs(denom) > 1e-15) & (t > 0) & (s >= 0) & (s <= 1) \
                & (z >= prism.z_bottom) & (z <= prism.z_top)
            best = np.where(hit & (t < best), t, best)

    return best


# --- Verdeckung ---

def _dem_blocks(scene: Scene, center: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gelände-Selbstverdeckung per Ray-Marching in halben Zellschritten."""
    step = 0.5 * dem_cell_size_m(scene)
    max_height = float(np.max(scene.dem.heights))
    blocked = np.zeros(len(targets), dtype=bool)

    for i, target in enumerate(targets):
        d = target - center
        length = float(np.linalg.norm(d))
        if length <= step:
            continue
        t_high = 1.0 - step / length
        # Nur der Strahlabschnitt unterhalb des höchsten DEM-Punkts kann blockieren
        t_low = 0.0
        if d[2] < 0:
            t_low = max(0.0, (max_height - center[2]) / d[2])
        if t_low >= t_high:
            continue
        count = int(math.ceil((t_high - t_low) * length / step)) + 1
        t = np.linspace(t_high, t_low, count)
        ray = center + t[:, None] * d
        ground = dem_height_enu(scene, ray[:, 0], ray[:, 1])
        with np.errstate(invalid='ignore'):
            blocked[i] = bool(np.any(ray[:, 2] < ground - SURFACE_EPS_M))
    return blocked


def occlusion_mask(scene: Scene, targets) -> np.ndarray:
    """
    Verdeckung vieler ENU-Zielpunkte vom Kamerazentrum aus.

    Ein Treffer genau am Zielpunkt (innerhalb 1e-6 m) zählt als sichtbar.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    center = scene_pose(scene).center
    d = targets - center
    lengths = np.linalg.norm(d, axis=1)
    occluded = np.zeros(len(targets), dtype=bool)

    for prism in scene_prisms(scene):
        t = prism_hit_params(center, d, prism)
        occluded |= np.isfinite(t) & ((1.0 - t) * lengths > SURFACE_EPS_M)

    remaining = ~occluded
    if np.any(remaining):
        occluded[remaining] = _dem_blocks(scene, center, targets[remaining])
    return occluded


def is_occluded(scene: Scene, p: GeoPoint) -> bool:
    """True, wenn die Sichtlinie Kamera -> p ein Gebäude oder das Gelände schneidet."""
    return bool(occlusion_mask(scene, scene.frame.point_to_enu(p)[None, :])[0])


def intersect_dem_rays(scene: Scene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """
    Strahlparameter t des ersten Schnitts mit der DEM-Oberfläche für viele Strahlen.

    Ray-Marching in halben Zellschritten zwischen der Höhe des höchsten und des
    tiefsten DEM-Knotens, danach Bisektion bis auf 1e-9 m. Auf ebenem DEM wird
    direkt geschnitten.

    Args:
        scene: Szene mit DEM
        origin: gemeinsamer Ursprung (ENU)
        dirs: Richtungen (n, 3), nicht zwingend normiert

    Returns:
        Array (n,) mit t, inf wo kein Schnitt innerhalb des DEM liegt
    """
    origin = np.asarray(origin, dtype=float)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    t_hit = np.full(len(dirs), np.inf)
    heights = scene.dem.heights
    top = float(np.max(heights))
    bottom = float(np.min(heights))

    # Nur fallende Strahlen von oberhalb des tiefsten Punkts können treffen
    idx = np.flatnonzero(dirs[:, 2] < 0)
    if len(idx) == 0 or origin[2] < bottom:
        return t_hit
    d = dirs[idx]
    norms = np.linalg.norm(d, axis=1)

    def gaps(rows: np.ndarray, t: np.ndarray) -> np.ndarray:
        points = origin + t[:, None] * d[rows]
        return points[:, 2] - dem_height_enu(scene, points[:, 0], points[:, 1])

    if top == bottom:
        t = (top - origin[2]) / d[:, 2]
        points = origin + t[:, None] * d
        inside = np.isfinite(dem_height_enu(scene, points[:, 0], points[:, 1]))
        t_hit[idx[inside]] = t[inside]
        return t_hit

    t_start = np.maximum(0.0, (top - origin[2]) / d[:, 2])
    t_end = (bottom - 1.0 - origin[2]) / d[:, 2]
    step = 0.5 * dem_cell_size_m(scene) / norms
    lo = np.full(len(idx), np.nan)
    hi = np.full(len(idx), np.nan)

    all_rows = np.arange(len(idx))
    t_prev = t_start.copy()
    g_prev = gaps(all_rows, t_prev)
    active = all_rows[t_end > t_start]
    k = 0
    while len(active):
        k += 1
        t_next = np.minimum(t_start[active] + k * step[active], t_end[active])
        g_next = gaps(active, t_next)
        with np.errstate(invalid='ignore'):
            crossing = (g_prev[active] >= 0) & (g_next < 0)
        lo[active[crossing]] = t_prev[active[crossing]]
        hi[active[crossing]] = t_next[crossing]
        t_prev[active] = t_next
        g_prev[active] = g_next
        active = active[~(crossing | (t_next >= t_end[active]))]

    found = np.flatnonzero(np.isfinite(lo))
    a = lo[found]
    b = hi[found]
    for _ in range(200):
        if len(found) == 0 or np.all((b - a) * norms[found] < 1e-9):
            break
        mid = 0.5 * (a + b)
        with np.errstate(invalid='ignore'):
            above = gaps(found, mid) >= 0
        a = np.where(above, mid, a)
        b = np.where(above, b, mid)
    t_hit[idx[found]] = a
    return t_hit


def intersect_dem(scene: Scene, origin: np.ndarray, direction: np.ndarray) -> Optional[np.ndarray]:
    """Schnittpunkt eines Strahls mit der DEM-Oberfläche (ENU) oder None."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    t = float(intersect_dem_rays(scene, origin, direction[None, :])[0])
    if not math.isfinite(t):
        return None
    return origin + t * direction


# --- Abtastung ---

def densify_segment(scene: Scene, segment: RoadSegment, step_m: float = DENSIFY_M) -> np.ndarray:
    """
    Verdichtet eine Straßen-Polylinie in Weltkoordinaten.

    Straßen mit DEM-Höhen folgen zwischen den Stützpunkten dem Gelände,
    Straßen mit eigenen Höhen werden linear interpoliert.
    """
    frame = scene.frame
    vertices = np.array([frame.point_to_enu(p) for p in segment.polyline])
    pieces = []
    for a, b in zip(vertices[:-1], vertices[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b[:2] - a[:2]) / step_m)))
        t = np.arange(n) / n
        pieces.append(a + t[:, None] * (b - a))
    pieces.append(vertices[-1:])
    dense = np.concatenate(pieces)

    if segment.alt_source == 'dem':
        ground = dem_height_enu(scene, dense[:, 0], dense[:, 1])
        dense[:, 2] = np.where(np.isfinite(ground), ground, dense[:, 2])
    return dense


def _visible_runs(pose: CameraPose, dense: np.ndarray) -> List[np.ndarray]:
    """Zerlegt eine verdichtete Linie in Stücke vor der Kamera, geclippt bei NEAR_PLANE_M."""
    _, depth = project_enu(pose, dense)
    front = depth > NEAR_PLANE_M
    runs = []
    current: List[np.ndarray] = []
    for i in range(len(dense)):
        if front[i]:
            if not current and i > 0:
                current.append(_clip_point(dense[i - 1], dense[i], depth[i - 1], depth[i]))
            current.append(dense[i])
        elif current:
            current.append(_clip_point(dense[i - 1], dense[i], depth[i - 1], depth[i]))
            runs.append(np.array(current))
            current = []
    if current:
        runs.append(np.array(current))
    return [run for run in runs if len(run) >= 2]


def _clip_point(a, b, depth_a, depth_b) -> np.ndarray:
    t = (NEAR_PLANE_M - depth_a) / (depth_b - depth_a)
    return a + t * (b - a)


def _resample_run(pose: CameraPose, run: np.ndarray, spacing_px: float, phase_px: float):
    uv, _ = project_enu(pose, run)
    steps = np.linalg.norm(np.diff(uv, axis=0), axis=1)
    keep = np.concatenate([[True], steps > 1e-12])
    uv, run = uv[keep], run[keep]
    if len(uv) < 2:
        return []
    steps = np.linalg.norm(np.diff(uv, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(steps)])
    total = cumulative[-1]

    positions = list(np.arange(phase_px, total + 1e-6, spacing_px))
    # Endpunkt gehört dazu (letztes Intervall darf kürzer sein)
    if not positions or total - positions[-1] > 0.5:
        positions.append(total)

    result = []
    for s in positions:
        idx = int(np.clip(np.searchsorted(cumulative, s, side='right') - 1, 0, len(steps) - 1))
        frac = (s - cumulative[idx]) / steps[idx]
        point_uv = uv[idx] + frac * (uv[idx + 1] - uv[idx])
        point_world = run[idx] + frac * (run[idx + 1] - run[idx])
        tangent = (uv[idx + 1] - uv[idx]) / steps[idx]
        result.append((point_uv, point_world, tangent))
    return result


def sample_segment(scene: Scene, segment: RoadSegment, spacing_px: float = SPACING_PX,
                   phase_px: float = 0.0, densify_m: float = DENSIFY_M) -> List[ProjectedSample]:
    """Abtastpunkte einer einzelnen Straße (siehe sample_segments)."""
    pose = scene_pose(scene)
    frame = scene.frame
    raw = []
    for run in _visible_runs(pose, densify_segment(scene, segment, densify_m)):
        raw.extend(_resample_run(pose, run, spacing_px, phase_px))
    if not raw:
        return []

    uv = np.array([r[0] for r in raw])
    world = np.array([r[1] for r in raw])
    inside = in_image(pose, uv)
    hidden = np.zeros(len(raw), dtype=bool)
    if np.any(inside):
        hidden[inside] = occlusion_mask(scene, world[inside])

    lats, lons, alts = frame.to_geo(world)
    samples = []
    for i, (point_uv, _, tangent) in enumerate(raw):
        if not inside[i]:
            continue
        primary = (float(tangent[0]), float(tangent[1]))
        samples.append(ProjectedSample(
            segment_id=segment.id,
            index=i,
            world=GeoPoint(float(lats[i]), float(lons[i]), float(alts[i])),
            px=(float(point_uv[0]), float(point_uv[1])),
            primary_dir=primary,
            normal_dir=(-primary[1], primary[0]),
            visible=not bool(hidden[i]),
        ))
    return samples


def sample_segments(scene: Scene, spacing_px: float = SPACING_PX,
                    phase_px: float = 0.0) -> List[ProjectedSample]:
    """
    Tastet alle Straßen der Szene im Bildraum ab.

    Jede Polylinie wird verdichtet, projiziert und entlang der Bogenlänge im
    Bild alle spacing_px Pixel abgetastet (über Stützpunkte hinweg, Endpunkte
    inklusive). primary_dir ist die Bildtangente, normal_dir die um +90°
    gedrehte Tangente. Punkte außerhalb des Bildes entfallen, visible kommt
    aus der Verdeckungsprüfung.

    Args:
        scene: validierte Szene
        spacing_px: Abstand der Abtastpunkte im Bild
        phase_px: Startversatz der ersten Abtastung auf jeder Linie

    Returns:
        Liste von ProjectedSample, nach Straße und Position geordnet
    """
    samples = []
    for segment in scene.roads.segments:
        samples.extend(sample_segment(scene, segment, spacing_px, phase_px))
    return samples


def with_label(samples: Sequence[ProjectedSample], label: str, source: Optional[str] = None) -> List[ProjectedSample]:
    if source is None:
        return [replace(s, label=label) for s in samples]
    return [replace(s, label=label, source=source) for s in samples]
