"""
Gemeinsame Fixtures: handgebaute Szene über ebenem Gelände.

DEM auf Höhe 100 m, 41 x 41 Knoten mit 10 m Abstand ab (48.1, 11.5).
Die Standardkamera steht bei ENU (200, 0, 300), blickt nach Norden und ist
40° gegen die Lotrechte geneigt; die optische Achse trifft den Boden bei
etwa n = 168 m.
"""

import numpy as np
import pytest

from src.scene_model import (
    BuildingPrism,
    Camera,
    DemGrid,
    GeoPoint,
    LocalFrame,
    RoadNetwork,
    RoadSegment,
    Scene,
    validate_scene,
)

ORIGIN = (48.1, 11.5)
GROUND_M = 100.0
CELL_M = 10.0
DEM_NODES = 41


def local_frame() -> LocalFrame:
    return LocalFrame(*ORIGIN)


def geo(e: float, n: float, alt: float = GROUND_M) -> GeoPoint:
    return local_frame().enu_to_point(np.array([e, n, alt]))


def latlon(e: float, n: float):
    point = geo(e, n)
    return (point.lat, point.lon)


def hill_heights(peak_m: float = 30.0, spread_m: float = 40.0) -> np.ndarray:
    """Gauß-Hügel um ENU (200, 200) auf dem Grundniveau; Knoten (r, c) liegt bei e = 10 c, n = 10 r."""
    rows, cols = np.mgrid[0:DEM_NODES, 0:DEM_NODES]
    d2 = (CELL_M * cols - 200.0) ** 2 + (CELL_M * rows - 200.0) ** 2
    return GROUND_M + peak_m * np.exp(-d2 / (2.0 * spread_m ** 2))


def build_scene(roads=(), buildings=(), heights=None, camera_enu=(200.0, 0.0, 300.0),
                yaw_deg=0.0, pitch_deg=40.0, roll_deg=0.0, focal_px=600.0,
                image_size=(640, 480)) -> Scene:
    """
    roads: [(id, [(e, n), ...])] auf dem Gelände
    buildings: [(id, [(e, n), ...], base_alt, height)]
    """
    frame = local_frame()
    if heights is None:
        heights = np.full((DEM_NODES, DEM_NODES), GROUND_M)
    dem = DemGrid(
        origin=GeoPoint(*ORIGIN),
        cell_size=(CELL_M / frame.m_per_deg_lat, CELL_M / frame.m_per_deg_lon),
        heights=np.asarray(heights, dtype=float),
    )
    segments = []
    for road_id, points in roads:
        polyline = []
        for e, n in points:
            point = geo(e, n)
            polyline.append(point)
        segments.append(RoadSegment(id=road_id, polyline=tuple(polyline)))
    prisms = tuple(
        BuildingPrism(id=b_id, footprint=tuple(latlon(e, n) for e, n in footprint),
                      base_alt=base, height=height)
        for b_id, footprint, base, height in buildings
    )
    width, height = image_size
    camera = Camera(
        position=geo(*camera_enu),
        yaw_deg=yaw_deg,
        pitch_deg=pitch_deg,
        roll_deg=roll_deg,
        focal_px=focal_px,
        principal=((width - 1) / 2.0, (height - 1) / 2.0),
        image_size=image_size,
    )
    scene = Scene(dem=dem, roads=RoadNetwork(tuple(segments)), buildings=prisms, camera=camera)
    validate_scene(scene)
    return scene


# --- Fixtures ---

@pytest.fixture
def make_scene():
    """Fabrik für Szenen; Argumente wie build_scene()."""
    return build_scene


@pytest.fixture
def flat_scene():
    """Ebene Szene mit einer Ost-West- und einer Nord-Süd-Straße."""
    return build_scene(roads=[
        ('east-west', [(160.0, 168.0), (240.0, 168.0)]),
        ('north-south', [(200.0, 120.0), (200.0, 230.0)]),
    ])


@pytest.fixture
def hill_scene():
    """Hügel unter einer geraden Ost-West-Straße und einer gekrümmten Straße."""
    return build_scene(heights=hill_heights(), roads=[
        ('over-hill', [(140.0, 200.0), (260.0, 200.0)]),
        ('curved', [(140.0, 180.0), (170.0, 200.0), (200.0, 205.0), (230.0, 200.0), (260.0, 180.0)]),
    ])


@pytest.fixture
def geo_at():
    """ENU (e, n[, alt]) -> GeoPoint im Rahmen der Testszenen."""
    return geo
