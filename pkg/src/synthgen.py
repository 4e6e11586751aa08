"""
Synthetische Schrägluftbild-Szenen mit exakt bekannter Wahrheit.

Ablauf:
1. build_scene: Gelände, Straßen, Gebäude und Kamera aus einem Rezept würfeln
2. render_scene: Bild per Strahlverfolgung (DEM + Gebäude-Prismen) rendern
3. inject: Daten gezielt verfälschen (Vektorversatz, fehlendes Gebäude,
   DEM-Fehler, Kurs der Kamera), das Bild bleibt die Wahrheit
4. label_samples: positive und negative Trainingspunkte aus Wahrheit und Fälschung

Die Texturen sind bewusst einfach (Farbflächen, Rauschen, Fassadenstreifen).
"""

import json
import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from src.descriptors import DescriptorParams, patch_fits
from src.projection import (
    SPACING_PX,
    CameraPose,
    ProjectedSample,
    densify_segment,
    intersect_dem_rays,
    pixel_rays,
    point_segment_distances,
    points_in_polygon,
    polyline_distance,
    prism_hit_params,
    project_enu,
    sample_segments,
    scene_pose,
    scene_prisms,
)
from src.scene_model import (
    DEFAULT_ROAD_WIDTH_M,
    BuildingPrism,
    Camera,
    DemGrid,
    GeoPoint,
    LocalFrame,
    RoadNetwork,
    RoadSegment,
    Scene,
    camera_rotation,
    dem_heights,
    dem_height_enu,
    validate_scene,
    with_roads,
)

RECIPE_FORMAT = 'oblique-recipe'
RECIPE_FORMAT_VERSION = 1

TERRAIN_KINDS = ('flat', 'hill', 'ridge')
ROAD_SHAPES = ('straight', 'arc', 's_curve')
INJECTION_KINDS = ('vector_offset_px', 'delete_building', 'dem_bias_m', 'camera_yaw_deg')

# Südwest-Ecke des DEM
ORIGIN = (48.1, 11.5)
BASE_HEIGHT_M = 500.0
DEM_CELL_M = 4.0

# Auflösung der Straßenmaske am Boden
MASK_RES_M = 0.25

# Auflösung der Bodentextur
TEXTURE_RES_M = 1.0

# Mindestabstand zwischen Straßenachsen
ROAD_SEPARATION_M = 30.0

# Zeilen pro Render-Block
CHUNK_ROWS = 64

# Oberflächenklassen der Strahlverfolgung
SKY, GROUND, ROAD, WALL, ROOF = 0, 1, 2, 3, 4

SKY_COLOR = np.array([0.70, 0.80, 0.92])
GROUND_TINT = np.array([0.85, 1.0, 0.65])
BUSH_COLOR = np.array([0.18, 0.32, 0.14])
FACADE_COLOR = np.array([0.82, 0.74, 0.58])
WINDOW_COLOR = np.array([0.22, 0.26, 0.34])
ROOF_COLOR = np.array([0.58, 0.30, 0.24])

# Sonne aus Südost, 45° hoch
SUN = np.array([math.sin(math.radians(135)) * math.cos(math.radians(45)),
                math.cos(math.radians(135)) * math.cos(math.radians(45)),
                math.sin(math.radians(45))])
AMBIENT = 0.55

# Abstand negativer Versatzpunkte zum Straßenrand (Pixel)
OFFSET_MARGIN_PX = 2.0

# Anzahl Phasen für zusätzliche Abtastpunkte entlang der Straßen
MAX_PHASES = 12


class RecipeError(ValueError):
    """Rezept ungültig oder Rezeptdatei fehlerhaft."""


class RenderError(ValueError):
    """Szene nicht darstellbar (z.B. Kamera sieht keinen Boden)."""


class InjectionError(ValueError):
    """Fehler-Injektion mit unbekannter Art oder unbekanntem Ziel."""


@dataclass(frozen=True)
class SceneRecipe:
    rng_seed: int = 0
    terrain: str = 'flat'
    relief_m: float = 30.0
    road_count: int = 3
    road_shapes: Tuple[str, ...] = ROAD_SHAPES
    road_width_m: float = DEFAULT_ROAD_WIDTH_M
    building_count: int = 4
    building_size_m: Tuple[float, float] = (12.0, 28.0)
    building_height_m: Tuple[float, float] = (10.0, 30.0)
    occluders: int = 1
    oblique_deg: float = 40.0
    yaw_deg: float = 0.0
    camera_alt_m: float = 250.0
    image_size: Tuple[int, int] = (1024, 768)
    hfov_deg: float = 50.0
    road_albedo: float = 0.25
    ground_albedo: float = 0.65
    clutter: float = 0.15
    noise_sigma: float = 0.02

    def validate(self) -> None:
        """
        Raises:
            RecipeError: mit dem Namen des ungültigen Feldes
        """
        if self.terrain not in TERRAIN_KINDS:
            raise RecipeError(f"terrain: unbekannt '{self.terrain}' (erlaubt: {', '.join(TERRAIN_KINDS)})")
        if not self.road_shapes or any(s not in ROAD_SHAPES for s in self.road_shapes):
            raise RecipeError(f"road_shapes: erlaubt sind {', '.join(ROAD_SHAPES)}")
        if not 30.0 <= self.oblique_deg <= 45.0:
            raise RecipeError(f"oblique_deg: {self.oblique_deg} liegt nicht in [30, 45]")
        for name in ('road_count', 'building_count', 'occluders'):
            if getattr(self, name) < 0:
                raise RecipeError(f"{name}: darf nicht negativ sein")
        for name in ('road_width_m', 'camera_alt_m', 'hfov_deg'):
            if not getattr(self, name) > 0:
                raise RecipeError(f"{name}: muss > 0 sein")
        for name in ('building_size_m', 'building_height_m'):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise RecipeError(f"{name}: Bereich ({low}, {high}) ungültig")
        if len(self.image_size) != 2 or min(self.image_size) < 64:
            raise RecipeError("image_size: mindestens 64 x 64 Pixel")
        if self.relief_m < 0 or self.clutter < 0 or self.noise_sigma < 0:
            raise RecipeError("relief_m, clutter und noise_sigma dürfen nicht negativ sein")


@dataclass(frozen=True)
class ErrorInjection:
    kind: str
    magnitude: float = 0.0
    # Straßen- bzw. Gebäude-IDs; leer = alle Straßen (nur vector_offset_px)
    targets: Tuple[str, ...] = ()


# --- Rezeptdatei ---

def recipe_to_dict(recipe: SceneRecipe) -> Dict:
    data = {'format': RECIPE_FORMAT, 'version': RECIPE_FORMAT_VERSION}
    for key, value in asdict(recipe).items():
        data[key] = list(value) if isinstance(value, tuple) else value
    return data


def recipe_from_dict(data: Dict) -> SceneRecipe:
    if data.get('version', RECIPE_FORMAT_VERSION) != RECIPE_FORMAT_VERSION:
        raise RecipeError(f"Nicht unterstützte Rezept-Version: {data.get('version')}")
    fields = {k: v for k, v in data.items() if k not in ('format', 'version')}
    unknown = set(fields) - set(SceneRecipe.__dataclass_fields__)
    if unknown:
        raise RecipeError(f"Unbekannte Rezept-Felder: {', '.join(sorted(unknown))}")
    for key in ('road_shapes', 'building_size_m', 'building_height_m', 'image_size'):
        if key in fields:
            fields[key] = tuple(fields[key])
    recipe = SceneRecipe(**fields)
    recipe.validate()
    return recipe


def load_recipe(path: Path) -> SceneRecipe:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except OSError as e:
        raise RecipeError(f"Rezept nicht lesbar: {path} ({e})")
    except json.JSONDecodeError as e:
        raise RecipeError(f"Ungültiges JSON in {path}: {e}")
    return recipe_from_dict(data)


def save_recipe(recipe: SceneRecipe, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(recipe_to_dict(recipe), f, indent=2, ensure_ascii=False)


# --- Szene bauen ---

def _rectangle(center: np.ndarray, size: Tuple[float, float], angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    half_a, half_b = size[0] / 2.0, size[1] / 2.0
    corners = np.array([[-half_a, -half_b], [half_a, -half_b], [half_a, half_b], [-half_a, half_b]])
    return center + corners @ np.array([[c, s], [-s, c]])


def _footprint_clear(footprint: np.ndarray, roads: List[np.ndarray], clearance: float) -> bool:
    """Grundriss hält zu allen Straßenachsen mindestens clearance Abstand."""
    edges_a = footprint
    edges_b = np.roll(footprint, -1, axis=0)
    for road in roads:
        if np.min(point_segment_distances(road, edges_a, edges_b)) < clearance:
            return False
        # Straße komplett innerhalb des Grundrisses
        if points_in_polygon(road[:1], footprint)[0]:
            return False
    return True


class _Stage:
    """Kamera und Grundebene im Bühnen-System (Kamera-Nadir bei (0, 0))."""

    def __init__(self, recipe: SceneRecipe):
        width, height = recipe.image_size
        self.width = width
        self.height = height
        self.focal = (width / 2.0) / math.tan(math.radians(recipe.hfov_deg) / 2.0)
        self.principal = ((width - 1) / 2.0, (height - 1) / 2.0)
        self.cam_height = BASE_HEIGHT_M + recipe.camera_alt_m
        rotation = camera_rotation(Camera(
            position=GeoPoint(0.0, 0.0, self.cam_height), yaw_deg=recipe.yaw_deg,
            pitch_deg=recipe.oblique_deg, roll_deg=0.0, focal_px=self.focal,
            principal=self.principal, image_size=(width, height),
        ))
        self.pose = CameraPose(rotation=rotation, center=np.array([0.0, 0.0, self.cam_height]),
                               focal_px=self.focal, principal=self.principal, image_size=(width, height))

    def ground(self, uv) -> np.ndarray:
        """Rückprojektion von Pixeln auf die Grundebene BASE_HEIGHT_M: (n, 2)."""
        dirs = pixel_rays(self.pose, uv)
        if np.any(dirs[:, 2] >= 0):
            raise RenderError("Bildpunkt über dem Horizont, Kamera zu flach")
        t = (BASE_HEIGHT_M - self.cam_height) / dirs[:, 2]
        return (self.pose.center + t[:, None] * dirs)[:, :2]

    def random_ground(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        u = rng.uniform(0.1 * self.width, 0.9 * self.width, count)
        v = rng.uniform(0.15 * self.height, 0.9 * self.height, count)
        return self.ground(np.stack([u, v], axis=1))


def _terrain_heights(recipe: SceneRecipe, rng: np.random.Generator, east: np.ndarray,
                     north: np.ndarray, target: np.ndarray) -> np.ndarray:
    if recipe.terrain == 'flat':
        return np.full(east.shape, BASE_HEIGHT_M)
    center = target + rng.uniform(-40.0, 40.0, 2)
    if recipe.terrain == 'hill':
        sigma = rng.uniform(60.0, 100.0)
        r2 = (east - center[0]) ** 2 + (north - center[1]) ** 2
        return BASE_HEIGHT_M + recipe.relief_m * np.exp(-r2 / (2.0 * sigma * sigma))
    angle = rng.uniform(0.0, math.pi)
    sigma = rng.uniform(35.0, 60.0)
    d = -(east - center[0]) * math.sin(angle) + (north - center[1]) * math.cos(angle)
    return BASE_HEIGHT_M + recipe.relief_m * np.exp(-d * d / (2.0 * sigma * sigma))


def _road_centerline(shape: str, rng: np.random.Generator, stage: _Stage) -> np.ndarray:
    """Achse einer Straße im Bühnen-System, Stützpunkte alle 10 m."""
    anchor = stage.random_ground(rng)[0]
    angle = rng.uniform(0.0, math.pi)
    axis = np.array([math.cos(angle), math.sin(angle)])
    normal = np.array([-axis[1], axis[0]])

    if shape == 'straight':
        s = np.arange(-400.0, 400.0 + 1e-9, 10.0)
        return anchor + s[:, None] * axis
    if shape == 'arc':
        radius = rng.uniform(120.0, 250.0)
        center = anchor + radius * normal
        span = 400.0 / radius
        phi = np.linspace(-span, span, int(2 * 400.0 / 10.0) + 1)
        start = math.atan2(anchor[1] - center[1], anchor[0] - center[0])
        return center + radius * np.stack([np.cos(start + phi), np.sin(start + phi)], axis=1)
    amplitude = rng.uniform(12.0, 25.0)
    wavelength = rng.uniform(150.0, 250.0)
    s = np.arange(-400.0, 400.0 + 1e-9, 10.0)
    lateral = amplitude * np.sin(2.0 * math.pi * s / wavelength)
    return anchor + s[:, None] * axis + lateral[:, None] * normal


def _clip_to_box(points: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Längstes zusammenhängendes Stück innerhalb des Rechtecks."""
    inside = np.all((points >= low) & (points <= high), axis=1)
    best, start = (0, 0), None
    for i, flag in enumerate(np.append(inside, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return points[best[0]:best[1]]


def build_scene(recipe: SceneRecipe) -> Scene:
    """
    Würfelt eine Szene aus dem Rezept (deterministisch pro Seed).

    Straßen und Gebäude werden über zufällige Bildpunkte auf die Grundebene
    gelegt, damit sie sicher im Bild liegen. Verdecker stehen zwischen Kamera
    und einem Straßenpunkt und sind hoch genug, ihn zu verdecken.

    Raises:
        RecipeError: ungültiges Rezept
        RenderError: Kamera sieht den Boden nicht vollständig
    """
    recipe.validate()
    rng = np.random.default_rng(recipe.rng_seed)
    stage = _Stage(recipe)

    corners = stage.ground([[0, 0], [stage.width - 1, 0], [0, stage.height - 1],
                            [stage.width - 1, stage.height - 1]])
    low = np.minimum(corners.min(axis=0), 0.0) - 60.0
    high = np.maximum(corners.max(axis=0), 0.0) + 60.0
    cols = int(math.ceil((high[0] - low[0]) / DEM_CELL_M)) + 1
    rows = int(math.ceil((high[1] - low[1]) / DEM_CELL_M)) + 1

    frame = LocalFrame(ORIGIN[0], ORIGIN[1])
    cell_size = (DEM_CELL_M / frame.m_per_deg_lat, DEM_CELL_M / frame.m_per_deg_lon)
    node_east = low[0] + DEM_CELL_M * np.arange(cols)
    node_north = low[1] + DEM_CELL_M * np.arange(rows)
    grid_e, grid_n = np.meshgrid(node_east, node_north)
    target = stage.ground([stage.principal])[0]
    dem = DemGrid(origin=GeoPoint(ORIGIN[0], ORIGIN[1], 0.0), cell_size=cell_size,
                  heights=_terrain_heights(recipe, rng, grid_e, grid_n, target))

    def to_geo(stage_xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        enu = np.column_stack([stage_xy[:, 0] - low[0], stage_xy[:, 1] - low[1], np.zeros(len(stage_xy))])
        lats, lons, _ = frame.to_geo(enu)
        return lats, lons

    # Straßen
    inner_low = low + 2 * DEM_CELL_M
    inner_high = high - 2 * DEM_CELL_M
    axes: List[np.ndarray] = []
    for k in range(recipe.road_count):
        shape = recipe.road_shapes[k % len(recipe.road_shapes)]
        for _ in range(100):
            axis = _clip_to_box(_road_centerline(shape, rng, stage), inner_low, inner_high)
            if len(axis) < 7:
                continue
            if all(np.min(polyline_distance(axis, other)) >= ROAD_SEPARATION_M for other in axes):
                axes.append(axis)
                break

    roads = []
    for k, axis in enumerate(axes):
        lats, lons = to_geo(axis)
        alts = dem_heights(dem, lats, lons)
        roads.append(RoadSegment(
            id=f"road-{k}",
            polyline=tuple(GeoPoint(float(a), float(b), float(h)) for a, b, h in zip(lats, lons, alts)),
            width_m=recipe.road_width_m,
        ))

    # Gebäude
    half_width = recipe.road_width_m / 2.0
    footprints: List[Tuple[str, np.ndarray, float]] = []

    def fits(footprint: np.ndarray, clearance: float) -> bool:
        center = footprint.mean(axis=0)
        radius = np.max(np.linalg.norm(footprint - center, axis=1))
        for _, other, _ in footprints:
            other_center = other.mean(axis=0)
            if np.linalg.norm(center - other_center) < radius + np.max(
                    np.linalg.norm(other - other_center, axis=1)) + 2.0:
                return False
        if np.any(footprint < inner_low) or np.any(footprint > inner_high):
            return False
        return _footprint_clear(footprint, axes, clearance)

    for k in range(recipe.occluders):
        for _ in range(100):
            if not axes:
                break
            axis = axes[int(rng.integers(len(axes)))]
            point = axis[int(rng.integers(1, len(axis) - 1))]
            to_camera = -point / max(np.linalg.norm(point), 1e-9)
            size = rng.uniform(14.0, 20.0)
            near = half_width + 4.0
            center = point + (near + size / 2.0) * to_camera
            slope = recipe.camera_alt_m / max(np.linalg.norm(point), 1e-9)
            height = max(1.6 * near * slope + 4.0, recipe.building_height_m[0]) + rng.uniform(0.0, 5.0)
            footprint = _rectangle(center, (size, size), math.atan2(to_camera[1], to_camera[0]))
            if fits(footprint, half_width + 2.0):
                footprints.append((f"occluder-{k}", footprint, height))
                break

    for k in range(recipe.building_count):
        for _ in range(100):
            center = stage.random_ground(rng)[0]
            size = (rng.uniform(*recipe.building_size_m), rng.uniform(*recipe.building_size_m))
            footprint = _rectangle(center, size, rng.uniform(0.0, math.pi / 2.0))
            height = rng.uniform(*recipe.building_height_m)
            if fits(footprint, half_width + 3.0):
                footprints.append((f"bldg-{k}", footprint, height))
                break

    buildings = []
    for building_id, footprint, height in footprints:
        lats, lons = to_geo(footprint)
        ground = dem_heights(dem, lats, lons)
        buildings.append(BuildingPrism(
            id=building_id,
            footprint=tuple((float(a), float(b)) for a, b in zip(lats, lons)),
            base_alt=float(np.min(ground)) - 0.5,
            height=float(height),
        ))

    cam_lat, cam_lon = to_geo(np.zeros((1, 2)))
    camera = Camera(
        position=GeoPoint(float(cam_lat[0]), float(cam_lon[0]), stage.cam_height),
        yaw_deg=recipe.yaw_deg,
        pitch_deg=recipe.oblique_deg,
        roll_deg=0.0,
        focal_px=stage.focal,
        principal=stage.principal,
        image_size=(stage.width, stage.height),
    )
    scene = Scene(dem=dem, roads=RoadNetwork(tuple(roads)), buildings=tuple(buildings), camera=camera)
    validate_scene(scene)
    return scene


# --- Strahlverfolgung ---

@dataclass(frozen=True, eq=False)
class SurfaceHits:
    kind: np.ndarray      # (n,) SKY/GROUND/ROAD/WALL/ROOF
    points: np.ndarray    # (n, 3) ENU, NaN bei SKY
    building: np.ndarray  # (n,) Index in scene.buildings oder -1


def _dem_extent_m(scene: Scene) -> Tuple[float, float]:
    frame = scene.frame
    return ((scene.dem.cols - 1) * scene.dem.cell_size[1] * frame.m_per_deg_lon,
            (scene.dem.rows - 1) * scene.dem.cell_size[0] * frame.m_per_deg_lat)


@lru_cache(maxsize=8)
def road_mask(scene: Scene) -> np.ndarray:
    """Straßenflächen als Bodenraster (MASK_RES_M), Index [north, east] ab DEM-Ursprung."""
    extent_e, extent_n = _dem_extent_m(scene)
    width = int(math.ceil(extent_e / MASK_RES_M)) + 1
    height = int(math.ceil(extent_n / MASK_RES_M)) + 1
    canvas = Image.new('L', (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    frame = scene.frame
    for segment in scene.roads.segments:
        enu = np.array([frame.point_to_enu(p) for p in segment.polyline])
        points = [(float(e / MASK_RES_M), float(n / MASK_RES_M)) for e, n in enu[:, :2]]
        draw.line(points, fill=1, width=max(1, int(round(segment.width_m / MASK_RES_M))), joint='curve')
    return np.array(canvas, dtype=bool)


def _grid_lookup(grid: np.ndarray, res: float, east: np.ndarray, north: np.ndarray, default):
    ix = np.floor(east / res).astype(int)
    iy = np.floor(north / res).astype(int)
    inside = (ix >= 0) & (iy >= 0) & (ix < grid.shape[1]) & (iy < grid.shape[0])
    values = np.full(len(east), default, dtype=grid.dtype)
    values[inside] = grid[iy[inside], ix[inside]]
    return values


def trace_pixels(scene: Scene, uv) -> SurfaceHits:
    """
    Erste getroffene Oberfläche für jeden Pixel-Strahl.

    Gelände und Gebäude werden über ihre Strahlparameter verglichen, Straßen
    sind Bodentreffer innerhalb der Straßenmaske.
    """
    pose = scene_pose(scene)
    dirs = pixel_rays(pose, uv)
    t_best = intersect_dem_rays(scene, pose.center, dirs)
    building = np.full(len(dirs), -1)
    for b, prism in enumerate(scene_prisms(scene)):
        t = prism_hit_params(pose.center, dirs, prism)
        closer = t < t_best
        t_best[closer] = t[closer]
        building[closer] = b

    hit = np.isfinite(t_best)
    points = np.full((len(dirs), 3), np.nan)
    points[hit] = pose.center + t_best[hit, None] * dirs[hit]

    kind = np.full(len(dirs), SKY, dtype=np.int8)
    ground = hit & (building < 0)
    kind[ground] = GROUND
    if np.any(ground):
        on_road = _grid_lookup(road_mask(scene), MASK_RES_M, points[ground, 0], points[ground, 1], False)
        kind[np.flatnonzero(ground)[on_road]] = ROAD
    prisms = scene_prisms(scene)
    for b, prism in enumerate(prisms):
        rows = building == b
        if np.any(rows):
            roof = np.abs(points[rows, 2] - prism.z_top) < 1e-6
            kind[np.flatnonzero(rows)] = np.where(roof, ROOF, WALL)
    return SurfaceHits(kind=kind, points=points, building=building)


# --- Rendern ---

def _texture(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    """Tiefpass-gefiltertes Rauschen über dem DEM, Standardabweichung 1."""
    extent_e, extent_n = _dem_extent_m(scene)
    shape = (int(math.ceil(extent_n / TEXTURE_RES_M)) + 1, int(math.ceil(extent_e / TEXTURE_RES_M)) + 1)
    field = gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=2.5)
    return field / max(float(field.std()), 1e-12)


def _hillshade(scene: Scene, points: np.ndarray) -> np.ndarray:
    east, north = points[:, 0], points[:, 1]
    gx = (dem_height_enu(scene, east + 1.0, north) - dem_height_enu(scene, east - 1.0, north)) / 2.0
    gy = (dem_height_enu(scene, east, north + 1.0) - dem_height_enu(scene, east, north - 1.0)) / 2.0
    normals = np.stack([-gx, -gy, np.ones(len(points))], axis=1)
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    light = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, normals @ SUN)
    shade = light / (AMBIENT + (1.0 - AMBIENT) * SUN[2])
    return np.nan_to_num(shade, nan=1.0)


def _shade(scene: Scene, recipe: SceneRecipe, hits: SurfaceHits, texture: np.ndarray) -> np.ndarray:
    colors = np.tile(SKY_COLOR, (len(hits.kind), 1))

    ground = (hits.kind == GROUND) | (hits.kind == ROAD)
    if np.any(ground):
        p = hits.points[ground]
        tex = _grid_lookup(texture, TEXTURE_RES_M, p[:, 0], p[:, 1], 0.0)
        shade = _hillshade(scene, p)[:, None]
        soil = recipe.ground_albedo * GROUND_TINT * (1.0 + 0.5 * recipe.clutter * tex)[:, None]
        bush = np.clip((tex - 1.0) * 4.0 * recipe.clutter, 0.0, 1.0)[:, None]
        soil = (1.0 - bush) * soil + bush * BUSH_COLOR
        asphalt = np.repeat((recipe.road_albedo * (1.0 + 0.15 * recipe.clutter * tex))[:, None], 3, axis=1)
        on_road = (hits.kind[ground] == ROAD)[:, None]
        colors[ground] = np.where(on_road, asphalt, soil) * shade

    prisms = scene_prisms(scene)
    walls = hits.kind == WALL
    if np.any(walls):
        p = hits.points[walls]
        base = np.array([prisms[b].z_bottom for b in hits.building[walls]])
        window = (((p[:, 2] - base) % 3.0) < 1.1) & (((p[:, 0] + p[:, 1]) % 3.0) < 1.6)
        colors[walls] = np.where(window[:, None], WINDOW_COLOR, FACADE_COLOR)

    roofs = hits.kind == ROOF
    if np.any(roofs):
        colors[roofs] = ROOF_COLOR
    return colors


def render_scene(scene: Scene, recipe: SceneRecipe) -> np.ndarray:
    """
    Rendert eine Szene per Strahlverfolgung, Pixel für Pixel in fester Reihenfolge.

    Returns:
        (H, W, 3) uint8

    Raises:
        RenderError: weniger als 1% der Pixel treffen den Boden
    """
    width, height = scene.camera.image_size
    rng = np.random.default_rng([recipe.rng_seed, 1])
    texture = _texture(scene, rng)
    image = np.zeros((height, width, 3))
    ground_pixels = 0

    for v0 in range(0, height, CHUNK_ROWS):
        v1 = min(v0 + CHUNK_ROWS, height)
        uu, vv = np.meshgrid(np.arange(width, dtype=float), np.arange(v0, v1, dtype=float))
        hits = trace_pixels(scene, np.stack([uu.ravel(), vv.ravel()], axis=1))
        image[v0:v1] = _shade(scene, recipe, hits, texture).reshape(v1 - v0, width, 3)
        ground_pixels += int(np.sum((hits.kind == GROUND) | (hits.kind == ROAD)))

    if ground_pixels < 0.01 * width * height:
        raise RenderError(f"Kamera sieht kaum Boden ({ground_pixels} von {width * height} Pixeln)")

    image += rng.normal(0.0, recipe.noise_sigma, image.shape)
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def render(recipe: SceneRecipe) -> Tuple[Scene, np.ndarray]:
    """Szene würfeln und rendern: (Wahrheits-Szene, Bild)."""
    scene = build_scene(recipe)
    return scene, render_scene(scene, recipe)


# --- Fehler-Injektion ---

def _offset_segment(scene: Scene, segment: RoadSegment, offset_px: float) -> RoadSegment:
    """Verschiebt eine Straße seitlich (links der Laufrichtung) um offset_px Bildpixel."""
    frame = scene.frame
    pose = scene_pose(scene)
    enu = np.array([frame.point_to_enu(p) for p in segment.polyline])
    en = enu[:, :2]

    edges = np.diff(en, axis=0)
    edges /= np.linalg.norm(edges, axis=1)[:, None]
    tangents = np.vstack([edges[:1], edges[:-1] + edges[1:], edges[-1:]])
    tangents /= np.maximum(np.linalg.norm(tangents, axis=1), 1e-12)[:, None]
    normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)

    beside = enu.copy()
    beside[:, :2] += normals
    uv_a, depth = project_enu(pose, enu)
    uv_b, _ = project_enu(pose, beside)
    px_per_m = np.linalg.norm(uv_b - uv_a, axis=1)
    fallback = pose.focal_px / np.maximum(depth, 1e-9)
    px_per_m = np.where(np.isfinite(px_per_m) & (px_per_m > 1e-9), px_per_m, fallback)

    shifted = enu.copy()
    shifted[:, :2] += normals * (offset_px / px_per_m)[:, None]
    lats, lons, alts = frame.to_geo(shifted)
    if segment.alt_source == 'dem':
        ground = dem_heights(scene.dem, lats, lons, outside=np.nan)
        alts = np.where(np.isfinite(ground), ground, alts)
    return replace(segment, polyline=tuple(
        GeoPoint(float(a), float(b), float(h)) for a, b, h in zip(lats, lons, alts)))


def inject(scene: Scene, err: ErrorInjection) -> Scene:
    """
    Verfälscht eine Kopie der Szene, das Original bleibt unverändert.

    - vector_offset_px: Straßen seitlich um magnitude Bildpixel verschieben
    - delete_building: Gebäude aus den Modelldaten entfernen
    - dem_bias_m: DEM (und DEM-gestützte Straßenhöhen) um magnitude Meter anheben
    - camera_yaw_deg: Kurs der Kamera um magnitude Grad drehen

    Raises:
        InjectionError: unbekannte Art, nicht-endliche Größe oder unbekanntes Ziel
    """
    if err.kind not in INJECTION_KINDS:
        raise InjectionError(f"Unbekannte Injektion: {err.kind} (erlaubt: {', '.join(INJECTION_KINDS)})")
    if not math.isfinite(err.magnitude):
        raise InjectionError(f"magnitude muss endlich sein, ist {err.magnitude}")

    if err.kind == 'vector_offset_px':
        known = {s.id for s in scene.roads.segments}
        unknown = [t for t in err.targets if t not in known]
        if unknown:
            raise InjectionError(f"Unbekannte Straßen-IDs: {', '.join(unknown)}")
        targets = set(err.targets) or known
        segments = [
            _offset_segment(scene, s, err.magnitude) if s.id in targets and err.magnitude != 0 else s
            for s in scene.roads.segments
        ]
        return with_roads(scene, segments)

    if err.kind == 'delete_building':
        known = {b.id for b in scene.buildings}
        unknown = [t for t in err.targets if t not in known]
        if not err.targets or unknown:
            raise InjectionError(f"Unbekannte Gebäude-IDs: {', '.join(unknown) or '(keine angegeben)'}")
        return replace(scene, buildings=tuple(b for b in scene.buildings if b.id not in err.targets))

    if err.kind == 'dem_bias_m':
        dem = replace(scene.dem, heights=scene.dem.heights + err.magnitude)
        segments = [
            replace(s, polyline=tuple(replace(p, alt=p.alt + err.magnitude) for p in s.polyline))
            if s.alt_source == 'dem' else s
            for s in scene.roads.segments
        ]
        return replace(scene, dem=dem, roads=RoadNetwork(tuple(segments)))

    return replace(scene, camera=replace(scene.camera, yaw_deg=scene.camera.yaw_deg + err.magnitude))


# --- Trainingspunkte ---

def _projected_roads(scene: Scene) -> List[Tuple[np.ndarray, np.ndarray, float]]:
    """Straßenachsen im Bild: (uv, Tiefe, Breite in m) je Straße, nur vor der Kamera."""
    pose = scene_pose(scene)
    result = []
    for segment in scene.roads.segments:
        uv, depth = project_enu(pose, densify_segment(scene, segment, step_m=2.0))
        front = depth > 0
        if np.sum(front) >= 2:
            result.append((uv[front], depth[front], segment.width_m))
    return result


def road_clearance_px(roads: List[Tuple[np.ndarray, np.ndarray, float]], px: np.ndarray,
                      focal_px: float) -> np.ndarray:
    """
    Bildabstand zur nächsten Straßenachse minus deren halber Bildbreite (obere Schranke).

    Positive Werte liegen sicher neben der Fahrbahn.
    """
    px = np.atleast_2d(px)
    clearance = np.full(len(px), np.inf)
    for uv, depth, width_m in roads:
        distances = point_segment_distances(px, uv[:-1], uv[1:])
        nearest = np.argmin(distances, axis=1)
        half_px = (width_m / 2.0) * focal_px / depth[nearest]
        clearance = np.minimum(clearance, distances[np.arange(len(px)), nearest] - half_px)
    return clearance


def _random_frame_samples(scene: Scene, hits: SurfaceHits, uv: np.ndarray, rows: np.ndarray,
                          rng: np.random.Generator, source: str) -> List[ProjectedSample]:
    frame = scene.frame
    lats, lons, alts = frame.to_geo(hits.points[rows])
    angles = rng.uniform(0.0, 2.0 * math.pi, len(rows))
    samples = []
    for k, row in enumerate(rows):
        primary = (math.cos(angles[k]), math.sin(angles[k]))
        samples.append(ProjectedSample(
            segment_id=f"{source}", index=int(row),
            world=GeoPoint(float(lats[k]), float(lons[k]), float(alts[k])),
            px=(float(uv[row, 0]), float(uv[row, 1])),
            primary_dir=primary, normal_dir=(-primary[1], primary[0]),
            visible=True, label='inconsistent', source=source,
        ))
    return samples


def _choose(pool: Sequence, count: int, rng: np.random.Generator) -> List:
    if count >= len(pool):
        return list(pool)
    picked = np.sort(rng.choice(len(pool), size=count, replace=False))
    return [pool[i] for i in picked]


def allot_counts(sizes: Sequence[int], total: int) -> List[int]:
    """
    Verteilt total möglichst gleichmäßig auf Töpfe der Größen sizes.

    Was ein Topf nicht decken kann, geht zu gleichen Teilen an alle Töpfe mit
    freier Kapazität; ungerade Reste an die vorderen. Die Summe ist
    min(total, sum(sizes)).
    """
    counts = [0] * len(sizes)
    remaining = total
    open_pools = [k for k, size in enumerate(sizes) if size > 0]
    while remaining > 0 and open_pools:
        share, extra = divmod(remaining, len(open_pools))
        for rank, k in enumerate(open_pools):
            take = min(share + (1 if rank < extra else 0), sizes[k] - counts[k])
            counts[k] += take
            remaining -= take
        open_pools = [k for k in open_pools if counts[k] < sizes[k]]
    return counts


def label_samples(true_scene: Scene, corrupted_scene: Optional[Scene], image: np.ndarray,
                  n_pos: Optional[int] = None, n_neg: Optional[int] = None, rng_seed: int = 0,
                  spacing_px: float = SPACING_PX,
                  params: DescriptorParams = DescriptorParams()) -> List[ProjectedSample]:
    """
    Gelabelte Trainingspunkte aus Wahrheit und verfälschter Szene.

    Positiv: sichtbare Abtastpunkte der wahren Straßen (source 'road').
    Negativ, gleichmäßig auf die Quellen verteilt (Fehlmengen an alle übrigen, siehe allot_counts):
    - 'offset': Abtastpunkte der verfälschten Straßen neben jeder Fahrbahn
    - 'occluded': wahre Straßenpunkte hinter Gebäuden
    - 'facade': Pixel auf Gebäudewänden und -dächern
    - 'clutter': Bodenpixel weit weg von Straßen

    Args:
        true_scene: Wahrheit, aus der das Bild gerendert wurde
        corrupted_scene: verfälschte Szene oder None
        image: gerendertes Bild
        n_pos, n_neg: exakte Anzahl je Klasse (Default: alle Positiven, gleich viele Negative)
        rng_seed: Seed für Auswahl und zufällige Pixel
        spacing_px: Abstand der Abtastpunkte entlang der Straßen
        params: Deskriptor-Parameter (bestimmen den nutzbaren Bildrand)

    Returns:
        Positive, dann Negative

    Raises:
        RenderError: Budget nicht erfüllbar
    """
    rng = np.random.default_rng([rng_seed, 2])
    pose = scene_pose(true_scene)
    roads = _projected_roads(true_scene)

    def usable(s: ProjectedSample) -> bool:
        return patch_fits(s.px, image.shape, params)

    positives: List[ProjectedSample] = []
    occluded: List[ProjectedSample] = []
    offsets: List[ProjectedSample] = []
    phases = [spacing_px * k / MAX_PHASES for k in range(MAX_PHASES)]
    for k, phase in enumerate(phases):
        batch = [s for s in sample_segments(true_scene, spacing_px, phase) if usable(s)]
        if batch:
            kinds = trace_pixels(true_scene, np.array([s.px for s in batch])).kind
            positives.extend(replace(s, label='consistent', source='road')
                             for s, kind in zip(batch, kinds) if s.visible and kind == ROAD)
            occluded.extend(replace(s, label='inconsistent', source='occluded')
                            for s, kind in zip(batch, kinds) if not s.visible and kind != ROAD)
        if corrupted_scene is not None:
            shifted = [s for s in sample_segments(corrupted_scene, spacing_px, phase) if usable(s)]
            if shifted:
                clear = road_clearance_px(roads, np.array([s.px for s in shifted]), pose.focal_px)
                offsets.extend(replace(s, label='inconsistent', source='offset')
                               for s, c in zip(shifted, clear) if c >= OFFSET_MARGIN_PX)
        if n_pos is None or len(positives) >= n_pos:
            break

    if n_pos is None:
        n_pos = len(positives)
    if len(positives) < n_pos:
        raise RenderError(f"Nur {len(positives)} positive Abtastpunkte, {n_pos} verlangt")
    positives = _choose(positives, n_pos, rng)
    if n_neg is None:
        n_neg = n_pos

    # Zufällige Pixel für Fassaden und Hintergrund
    width, height = true_scene.camera.image_size
    count = 4 * n_neg + 2000
    uv = np.stack([rng.uniform(0.0, width - 1.0, count), rng.uniform(0.0, height - 1.0, count)], axis=1)
    fits = np.array([patch_fits(p, image.shape, params) for p in uv])
    hits = trace_pixels(true_scene, uv)
    facade_rows = np.flatnonzero(fits & ((hits.kind == WALL) | (hits.kind == ROOF)))
    ground_rows = np.flatnonzero(fits & (hits.kind == GROUND))
    if len(ground_rows):
        clear = road_clearance_px(roads, uv[ground_rows], pose.focal_px)
        ground_rows = ground_rows[clear >= params.patch_size / 2.0 + OFFSET_MARGIN_PX]
    facades = _random_frame_samples(true_scene, hits, uv, facade_rows, rng, 'facade')
    clutter = _random_frame_samples(true_scene, hits, uv, ground_rows, rng, 'clutter')

    pools = [offsets, occluded, facades, clutter]
    counts = allot_counts([len(pool) for pool in pools], n_neg)
    if sum(counts) < n_neg:
        raise RenderError(f"Nur {sum(counts)} negative Abtastpunkte, {n_neg} verlangt")
    negatives: List[ProjectedSample] = []
    for pool, count in zip(pools, counts):
        negatives.extend(_choose(pool, count, rng))
    return positives + negatives


# --- Komplettlauf ---

@dataclass(frozen=True, eq=False)
class SynthResult:
    recipe: SceneRecipe
    true_scene: Scene
    corrupted_scene: Scene
    image: np.ndarray
    samples: List[ProjectedSample]


def synthesize(recipe: SceneRecipe, injections: Sequence[ErrorInjection] = (),
               n_pos: Optional[int] = None, n_neg: Optional[int] = None,
               spacing_px: float = SPACING_PX, params: DescriptorParams = DescriptorParams(),
               progress: Optional[Callable[[str], None]] = None) -> SynthResult:
    """Rendern, verfälschen und labeln in einem Schritt."""
    def report(message: str) -> None:
        if progress is not None:
            progress(message)

    report("Szene würfeln")
    true_scene = build_scene(recipe)
    report("Bild rendern")
    image = render_scene(true_scene, recipe)
    corrupted = true_scene
    for err in injections:
        corrupted = inject(corrupted, err)
    report("Abtastpunkte labeln")
    samples = label_samples(true_scene, corrupted, image, n_pos, n_neg, recipe.rng_seed, spacing_px, params)
    return SynthResult(recipe=recipe, true_scene=true_scene, corrupted_scene=corrupted,
                       image=image, samples=samples)
