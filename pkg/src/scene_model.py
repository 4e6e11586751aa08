"""
Szenenmodell für die Validierung von Straßenvektoren in Schrägluftbildern.

Dieses Modul definiert die Weltdaten, die alle anderen Module nur lesen:
- Geländemodell (DEM) als regelmäßiges Höhenraster
- Straßennetz als Polylinien (Höhen fehlen oft und kommen dann aus dem DEM)
- Gebäude als senkrecht extrudierte Grundrisse mit Flachdach
- Kamera (Position, Orientierung, Brennweite, Bildgröße)

Dazu kommen das versionierte Szenen-Dateiformat (JSON) und die lokale
East-North-Up-Ebene, in der alle Geometrie gerechnet wird.
"""

import json
import math
import numbers
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

SCENE_FORMAT = 'oblique-scene'
SCENE_FORMAT_VERSION = 1

# Kugel-Erde für die Umrechnung Grad -> Meter
EARTH_RADIUS_M = 6_371_000.0

DEFAULT_ROAD_WIDTH_M = 8.0

ALT_SOURCES = ('dem', 'vector')


class SceneParseError(ValueError):
    """Szenen-Datei ist kein gültiges Dokument (Syntax oder fehlende Felder)."""


class SceneValidationError(ValueError):
    """Eine Invariante des Szenenmodells ist verletzt."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DemBoundsError(ValueError):
    """Höhenabfrage außerhalb des DEM-Rasters."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    alt: float = 0.0


@dataclass(frozen=True, eq=False)
class DemGrid:
    """
    Höhenraster mit Ursprung in der Südwest-Ecke.

    Zeilen laufen nach Norden, Spalten nach Osten. heights[r, c] ist die Höhe
    am Knoten (origin.lat + r * cell_size[0], origin.lon + c * cell_size[1]).
    """
    origin: GeoPoint
    cell_size: Tuple[float, float]
    heights: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.heights.shape[0])

    @property
    def cols(self) -> int:
        return int(self.heights.shape[1])

    @property
    def max_lat(self) -> float:
        return self.origin.lat + (self.rows - 1) * self.cell_size[0]

    @property
    def max_lon(self) -> float:
        return self.origin.lon + (self.cols - 1) * self.cell_size[1]


@dataclass(frozen=True)
class RoadSegment:
    id: str
    polyline: Tuple[GeoPoint, ...]
    width_m: float = DEFAULT_ROAD_WIDTH_M
    # 'dem': Höhen beim Laden aus dem DEM gefüllt, 'vector': Höhen aus den Vektordaten
    alt_source: str = 'dem'
    source: str = 'input'


@dataclass(frozen=True)
class RoadNetwork:
    segments: Tuple[RoadSegment, ...]

    def by_id(self, segment_id: str) -> RoadSegment:
        for segment in self.segments:
            if segment.id == segment_id:
                return segment
        raise KeyError(segment_id)


@dataclass(frozen=True)
class BuildingPrism:
    id: str
    footprint: Tuple[Tuple[float, float], ...]  # (lat, lon), implizit geschlossen
    base_alt: float
    height: float


@dataclass(frozen=True)
class Camera:
    """
    Lochkamera.

    yaw_deg: Blickrichtung im Uhrzeigersinn ab Nord
    pitch_deg: Neigung der optischen Achse gegen die Lotrechte (Schrägwinkel)
    roll_deg: Drehung um die optische Achse
    """
    position: GeoPoint
    yaw_deg: float
    pitch_deg: float
    roll_deg: float
    focal_px: float
    principal: Tuple[float, float]
    image_size: Tuple[int, int]  # (width, height)


@dataclass(frozen=True)
class LocalFrame:
    """Lokale East-North-Up-Tangentialebene, verankert im DEM-Ursprung."""
    lat0: float
    lon0: float

    @property
    def m_per_deg_lat(self) -> float:
        return EARTH_RADIUS_M * math.pi / 180.0

    @property
    def m_per_deg_lon(self) -> float:
        return EARTH_RADIUS_M * math.pi / 180.0 * math.cos(math.radians(self.lat0))

    def to_enu(self, lats, lons, alts) -> np.ndarray:
        """Geodätische Koordinaten -> (..., 3) Array mit East/North/Up in Metern."""
        lats = np.asarray(lats, dtype=float)
        lons = np.asarray(lons, dtype=float)
        alts = np.asarray(alts, dtype=float)
        east = (lons - self.lon0) * self.m_per_deg_lon
        north = (lats - self.lat0) * self.m_per_deg_lat
        return np.stack(np.broadcast_arrays(east, north, alts), axis=-1)

    def to_geo(self, enu) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(..., 3) ENU-Array -> (lats, lons, alts)."""
        enu = np.asarray(enu, dtype=float)
        lats = self.lat0 + enu[..., 1] / self.m_per_deg_lat
        lons = self.lon0 + enu[..., 0] / self.m_per_deg_lon
        return lats, lons, enu[..., 2]

    def point_to_enu(self, p: GeoPoint) -> np.ndarray:
        return self.to_enu(p.lat, p.lon, p.alt)

    def enu_to_point(self, enu) -> GeoPoint:
        lat, lon, alt = self.to_geo(enu)
        return GeoPoint(float(lat), float(lon), float(alt))


@dataclass(frozen=True, eq=False)
class Scene:
    dem: DemGrid
    roads: RoadNetwork
    buildings: Tuple[BuildingPrism, ...]
    camera: Camera
    version: int = SCENE_FORMAT_VERSION

    @property
    def frame(self) -> LocalFrame:
        return LocalFrame(self.dem.origin.lat, self.dem.origin.lon)

    def building_by_id(self, building_id: str) -> BuildingPrism:
        for building in self.buildings:
            if building.id == building_id:
                return building
        raise KeyError(building_id)


# --- DEM ---

def dem_heights(dem: DemGrid, lats, lons, outside: Optional[float] = None) -> np.ndarray:
    """
    Bilineare Interpolation des DEM für viele Punkte.

    Args:
        dem: Höhenraster
        lats, lons: Arrays gleicher Form (Grad)
        outside: Wert für Punkte außerhalb des Rasters; None = DemBoundsError

    Returns:
        Array der Höhen in Metern
    """
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    r = (lats - dem.origin.lat) / dem.cell_size[0]
    c = (lons - dem.origin.lon) / dem.cell_size[1]

    tol = 1e-9
    inside = (r >= -tol) & (r <= dem.rows - 1 + tol) & (c >= -tol) & (c <= dem.cols - 1 + tol)
    if outside is None and not np.all(inside):
        raise DemBoundsError(
            f"Höhenabfrage außerhalb des DEM ({dem.origin.lat}..{dem.max_lat}, "
            f"{dem.origin.lon}..{dem.max_lon})"
        )

    r = np.clip(r, 0.0, dem.rows - 1)
    c = np.clip(c, 0.0, dem.cols - 1)
    r0 = np.minimum(np.floor(r).astype(int), dem.rows - 2)
    c0 = np.minimum(np.floor(c).astype(int), dem.cols - 2)
    fr = r - r0
    fc = c - c0

    h = dem.heights
    value = ((1.0 - fr) * (1.0 - fc) * h[r0, c0]
             + (1.0 - fr) * fc * h[r0, c0 + 1]
             + fr * (1.0 - fc) * h[r0 + 1, c0]
             + fr * fc * h[r0 + 1, c0 + 1])

    if outside is not None:
        value = np.where(inside, value, outside)
    return value


def dem_height_at(dem: DemGrid, lat: float, lon: float) -> float:
    """Bilinear interpolierte Geländehöhe an (lat, lon)."""
    return float(dem_heights(dem, np.array([lat]), np.array([lon]))[0])


def dem_height_enu(scene: Scene, east, north, outside: Optional[float] = np.nan) -> np.ndarray:
    """Geländehöhe an ENU-Positionen (für Strahlverfolgung, außerhalb = NaN)."""
    lats, lons, _ = scene.frame.to_geo(np.stack(np.broadcast_arrays(
        np.asarray(east, dtype=float), np.asarray(north, dtype=float), 0.0), axis=-1))
    return dem_heights(scene.dem, lats, lons, outside=outside)


def dem_cell_size_m(scene: Scene) -> float:
    """Kleinere Kantenlänge einer DEM-Zelle in Metern."""
    frame = scene.frame
    return min(scene.dem.cell_size[0] * frame.m_per_deg_lat,
               scene.dem.cell_size[1] * frame.m_per_deg_lon)


# --- Kamera ---

def camera_rotation(cam: Camera) -> np.ndarray:
    """
    Rotationsmatrix Welt (ENU) -> Kamera.

    Kamera-Achsen: x nach rechts, y nach unten im Bild, z entlang der optischen
    Achse. Zeilen der Matrix sind die Kamera-Achsen in Weltkoordinaten.
    """
    tilt = math.radians(cam.pitch_deg)
    yaw = math.radians(cam.yaw_deg)
    roll = math.radians(cam.roll_deg)

    # Blick nach Norden, um tilt aus der Lotrechten gekippt
    x_axis = np.array([1.0, 0.0, 0.0])
    y_axis = np.array([0.0, -math.cos(tilt), -math.sin(tilt)])
    z_axis = np.array([0.0, math.sin(tilt), -math.cos(tilt)])

    # Kurs im Uhrzeigersinn um die Welt-Z-Achse
    cy, sy = math.cos(yaw), math.sin(yaw)
    heading = np.array([[cy, sy, 0.0], [-sy, cy, 0.0], [0.0, 0.0, 1.0]])
    x_axis, y_axis, z_axis = heading @ x_axis, heading @ y_axis, heading @ z_axis

    # Rollen dreht die Bildkoordinaten um +roll
    cr, sr = math.cos(roll), math.sin(roll)
    x_rolled = cr * x_axis - sr * y_axis
    y_rolled = sr * x_axis + cr * y_axis

    return np.stack([x_rolled, y_rolled, z_axis])


def oblique_angle_deg(cam: Camera) -> float:
    """Winkel zwischen optischer Achse und der Lotrechten (Grad)."""
    z_axis = camera_rotation(cam)[2]
    return math.degrees(math.acos(max(-1.0, min(1.0, -z_axis[2]))))


# --- Validierung ---

def _is_finite(value) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


def polygon_is_simple(vertices: Sequence[Tuple[float, float]]) -> bool:
    """Prüft, ob sich Kanten eines geschlossenen Polygons kreuzen."""
    n = len(vertices)
    edges = [(vertices[i], vertices[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            # Nachbarkanten teilen einen Eckpunkt
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                return False
    return len(set(vertices)) == n


def validate_scene(scene: Scene) -> None:
    """
    Prüft alle Invarianten des Szenenmodells.

    Raises:
        SceneValidationError: mit dem Namen des verletzten Feldes
    """
    dem = scene.dem
    if dem.heights.ndim != 2 or dem.rows < 2 or dem.cols < 2:
        raise SceneValidationError('dem.heights', "Raster braucht mindestens 2 x 2 Knoten")
    if not np.all(np.isfinite(dem.heights)):
        raise SceneValidationError('dem.heights', "alle Höhen müssen endlich sein")
    if not all(_is_finite(v) and v > 0 for v in dem.cell_size):
        raise SceneValidationError('dem.cell_size', "Zellgröße muss > 0 sein")
    _validate_point(dem.origin, 'dem.origin')

    seen_ids = set()
    for i, segment in enumerate(scene.roads.segments):
        name = f"roads[{i}]"
        if segment.id in seen_ids:
            raise SceneValidationError(f"{name}.id", f"doppelte Straßen-ID '{segment.id}'")
        seen_ids.add(segment.id)
        if len(segment.polyline) < 2:
            raise SceneValidationError(f"{name}.polyline", "mindestens 2 Punkte nötig")
        for k, point in enumerate(segment.polyline):
            _validate_point(point, f"{name}.polyline[{k}]")
        for a, b in zip(segment.polyline, segment.polyline[1:]):
            if (a.lat, a.lon) == (b.lat, b.lon):
                raise SceneValidationError(f"{name}.polyline", "aufeinanderfolgende Punkte identisch")
        if not (_is_finite(segment.width_m) and segment.width_m > 0):
            raise SceneValidationError(f"{name}.width_m", "Breite muss > 0 sein")
        if segment.alt_source not in ALT_SOURCES:
            raise SceneValidationError(f"{name}.alt_source", f"unbekannt: {segment.alt_source}")

    seen_ids = set()
    for i, building in enumerate(scene.buildings):
        name = f"buildings[{i}]"
        if building.id in seen_ids:
            raise SceneValidationError(f"{name}.id", f"doppelte Gebäude-ID '{building.id}'")
        seen_ids.add(building.id)
        if len(building.footprint) < 3:
            raise SceneValidationError(f"{name}.footprint", "mindestens 3 Eckpunkte nötig")
        if not all(_is_finite(v) for vertex in building.footprint for v in vertex):
            raise SceneValidationError(f"{name}.footprint", "Koordinaten müssen endlich sein")
        if not polygon_is_simple(building.footprint):
            raise SceneValidationError(f"{name}.footprint", "Grundriss schneidet sich selbst")
        if not _is_finite(building.base_alt):
            raise SceneValidationError(f"{name}.base_alt", "Basis-Höhe muss endlich sein")
        if not (_is_finite(building.height) and building.height > 0):
            raise SceneValidationError(f"{name}.height", "Höhe muss > 0 sein")

    cam = scene.camera
    _validate_point(cam.position, 'camera.position')
    if not (_is_finite(cam.focal_px) and cam.focal_px > 0):
        raise SceneValidationError('camera.focal_px', "Brennweite muss > 0 sein")
    if not all(_is_finite(v) for v in (cam.yaw_deg, cam.pitch_deg, cam.roll_deg)):
        raise SceneValidationError('camera.orientation', "Winkel müssen endlich sein")
    if not 0.0 < oblique_angle_deg(cam) < 90.0:
        raise SceneValidationError('camera.pitch_deg', "Schrägwinkel muss in (0°, 90°) liegen")
    if not (len(cam.image_size) == 2 and all(int(v) > 0 for v in cam.image_size)):
        raise SceneValidationError('camera.image_size', "Bildgröße muss positiv sein")
    if not all(_is_finite(v) for v in cam.principal):
        raise SceneValidationError('camera.principal', "Hauptpunkt muss endlich sein")


def _validate_point(point: GeoPoint, name: str) -> None:
    if not (_is_finite(point.lat) and -90.0 <= point.lat <= 90.0):
        raise SceneValidationError(f"{name}.lat", f"Breite außerhalb [-90, 90]: {point.lat}")
    if not (_is_finite(point.lon) and -180.0 <= point.lon <= 180.0):
        raise SceneValidationError(f"{name}.lon", f"Länge außerhalb [-180, 180]: {point.lon}")
    if not _is_finite(point.alt):
        raise SceneValidationError(f"{name}.alt", "Höhe muss endlich sein")


# --- Dateiformat ---

def _require(data: Dict, key: str, context: str) -> Any:
    if not isinstance(data, dict) or key not in data:
        raise SceneParseError(f"Feld '{context}.{key}' fehlt")
    return data[key]


def _number(value: Any, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise SceneParseError(f"'{field}' muss eine Zahl sein, ist {value!r}")
    return float(value)


def _coordinates(raw: Any, field: str, sizes: Tuple[int, ...]) -> Tuple[float, ...]:
    """Ein Koordinatentupel aus dem Dokument; falsche Form oder Nicht-Zahlen -> SceneParseError."""
    if not isinstance(raw, (list, tuple)) or len(raw) not in sizes:
        shapes = ' oder '.join(str(n) for n in sizes)
        raise SceneParseError(f"'{field}' muss eine Liste mit {shapes} Zahlen sein, ist {raw!r}")
    return tuple(_number(v, f"{field}[{k}]") for k, v in enumerate(raw))


def _parse_road(raw: Dict, index: int, dem: DemGrid) -> RoadSegment:
    context = f"roads[{index}]"
    raw_points = _require(raw, 'points', context)
    if not isinstance(raw_points, list):
        raise SceneParseError(f"'{context}.points' muss eine Liste sein")

    points = [_coordinates(p, f"{context}.points[{k}]", (2, 3)) for k, p in enumerate(raw_points)]
    with_alt = [len(p) == 3 for p in points]
    if any(with_alt) and not all(with_alt):
        raise SceneValidationError(f"{context}.polyline", "Höhen nur für einen Teil der Punkte angegeben")

    if points and all(with_alt):
        polyline = tuple(GeoPoint(*p) for p in points)
        alt_source = 'vector'
    else:
        # Straßen ohne Höhe liegen auf dem DEM
        lats = np.array([p[0] for p in points])
        lons = np.array([p[1] for p in points])
        try:
            alts = dem_heights(dem, lats, lons) if points else []
        except DemBoundsError:
            raise SceneValidationError(f"{context}.polyline", "Punkt ohne Höhe liegt außerhalb des DEM")
        polyline = tuple(GeoPoint(float(la), float(lo), float(al)) for la, lo, al in zip(lats, lons, alts))
        alt_source = 'dem'

    return RoadSegment(
        id=str(_require(raw, 'id', context)),
        polyline=polyline,
        width_m=float(raw.get('width_m', DEFAULT_ROAD_WIDTH_M)),
        alt_source=alt_source,
        source=str(raw.get('source', 'input')),
    )


def scene_from_dict(data: Dict) -> Scene:
    """
    Baut eine Szene aus dem geparsten Dokument und prüft alle Invarianten.

    Raises:
        SceneParseError: bei fehlenden Feldern oder falscher Version
        SceneValidationError: bei verletzten Invarianten
    """
    version = _require(data, 'version', 'scene')
    if version != SCENE_FORMAT_VERSION:
        raise SceneParseError(f"Nicht unterstützte Szenen-Version: {version}")

    raw_dem = _require(data, 'dem', 'scene')
    origin = _require(raw_dem, 'origin', 'dem')
    cell = _require(raw_dem, 'cell_size', 'dem')
    try:
        heights = np.array(_require(raw_dem, 'heights', 'dem'), dtype=float)
    except (TypeError, ValueError):
        raise SceneParseError("'dem.heights' ist kein rechteckiges Zahlenraster")
    rows = int(_require(raw_dem, 'rows', 'dem'))
    cols = int(_require(raw_dem, 'cols', 'dem'))
    if heights.shape != (rows, cols):
        raise SceneValidationError('dem.heights', f"Form {heights.shape} passt nicht zu rows/cols ({rows}, {cols})")
    dem = DemGrid(
        origin=GeoPoint(float(_require(origin, 'lat', 'dem.origin')), float(_require(origin, 'lon', 'dem.origin'))),
        cell_size=(float(_require(cell, 'lat', 'dem.cell_size')), float(_require(cell, 'lon', 'dem.cell_size'))),
        heights=heights,
    )
    # DEM zuerst prüfen, bevor Straßenhöhen daraus gefüllt werden
    if not np.all(np.isfinite(heights)):
        raise SceneValidationError('dem.heights', "alle Höhen müssen endlich sein")
    if not all(_is_finite(v) and v > 0 for v in dem.cell_size):
        raise SceneValidationError('dem.cell_size', "Zellgröße muss > 0 sein")
    if rows < 2 or cols < 2:
        raise SceneValidationError('dem.heights', "Raster braucht mindestens 2 x 2 Knoten")

    roads = RoadNetwork(tuple(
        _parse_road(raw, i, dem) for i, raw in enumerate(_require(data, 'roads', 'scene'))
    ))

    buildings = []
    for i, raw in enumerate(_require(data, 'buildings', 'scene')):
        context = f"buildings[{i}]"
        raw_footprint = _require(raw, 'footprint', context)
        if not isinstance(raw_footprint, list):
            raise SceneParseError(f"'{context}.footprint' muss eine Liste sein")
        footprint = [_coordinates(v, f"{context}.footprint[{k}]", (2,)) for k, v in enumerate(raw_footprint)]
        if len(footprint) > 1 and footprint[0] == footprint[-1]:
            footprint = footprint[:-1]
        buildings.append(BuildingPrism(
            id=str(_require(raw, 'id', context)),
            footprint=tuple(footprint),
            base_alt=_number(_require(raw, 'base_alt', context), f"{context}.base_alt"),
            height=_number(_require(raw, 'height', context), f"{context}.height"),
        ))

    raw_cam = _require(data, 'camera', 'scene')
    position = _require(raw_cam, 'position', 'camera')
    principal = _require(raw_cam, 'principal', 'camera')
    image_size = _require(raw_cam, 'image_size', 'camera')
    camera = Camera(
        position=GeoPoint(float(_require(position, 'lat', 'camera.position')),
                          float(_require(position, 'lon', 'camera.position')),
                          float(_require(position, 'alt', 'camera.position'))),
        yaw_deg=float(_require(raw_cam, 'yaw_deg', 'camera')),
        pitch_deg=float(_require(raw_cam, 'pitch_deg', 'camera')),
        roll_deg=float(raw_cam.get('roll_deg', 0.0)),
        focal_px=float(_require(raw_cam, 'focal_px', 'camera')),
        principal=(float(principal[0]), float(principal[1])),
        image_size=(int(image_size[0]), int(image_size[1])),
    )

    scene = Scene(dem=dem, roads=roads, buildings=tuple(buildings), camera=camera, version=version)
    validate_scene(scene)
    return scene


def scene_to_dict(scene: Scene) -> Dict:
    """Serialisiert eine Szene in die Dokumentstruktur des Dateiformats."""
    roads = []
    for segment in scene.roads.segments:
        if segment.alt_source == 'dem':
            points = [[p.lat, p.lon] for p in segment.polyline]
        else:
            points = [[p.lat, p.lon, p.alt] for p in segment.polyline]
        roads.append({
            'id': segment.id,
            'width_m': segment.width_m,
            'source': segment.source,
            'points': points,
        })

    cam = scene.camera
    return {
        'format': SCENE_FORMAT,
        'version': scene.version,
        'dem': {
            'origin': {'lat': scene.dem.origin.lat, 'lon': scene.dem.origin.lon},
            'cell_size': {'lat': scene.dem.cell_size[0], 'lon': scene.dem.cell_size[1]},
            'rows': scene.dem.rows,
            'cols': scene.dem.cols,
            'heights': scene.dem.heights.tolist(),
        },
        'roads': roads,
        'buildings': [
            {
                'id': b.id,
                'footprint': [list(v) for v in b.footprint],
                'base_alt': b.base_alt,
                'height': b.height,
            }
            for b in scene.buildings
        ],
        'camera': {
            'position': {'lat': cam.position.lat, 'lon': cam.position.lon, 'alt': cam.position.alt},
            'yaw_deg': cam.yaw_deg,
            'pitch_deg': cam.pitch_deg,
            'roll_deg': cam.roll_deg,
            'focal_px': cam.focal_px,
            'principal': list(cam.principal),
            'image_size': [int(v) for v in cam.image_size],
        },
    }


def load_scene(path: Path) -> Scene:
    """
    Lädt und validiert eine Szenen-Datei.

    Args:
        path: Pfad zur JSON-Szenen-Datei

    Returns:
        Vollständig validierte Szene (Straßenhöhen aus dem DEM gefüllt)

    Raises:
        SceneParseError: Datei fehlt, ist kein JSON oder unvollständig
        SceneValidationError: Invariante verletzt (Feldname in .field)
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise SceneParseError(f"Szene nicht lesbar: {path} ({e})")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneParseError(f"Ungültiges JSON in {path}: {str(e)}")
    return scene_from_dict(data)


def save_scene(scene: Scene, path: Path) -> None:
    """Speichert eine Szene als JSON (volle Gleitkommapräzision)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(scene_to_dict(scene), f, indent=2, ensure_ascii=False)


def with_roads(scene: Scene, segments: List[RoadSegment]) -> Scene:
    """Kopie der Szene mit ersetztem Straßennetz."""
    return replace(scene, roads=RoadNetwork(tuple(segments)))
