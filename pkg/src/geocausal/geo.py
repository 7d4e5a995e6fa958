"""Geodesy, treatment-assignment rules, ADM2 adjacency and tile compositing."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0088
NEIGHBORHOOD_SIDE_KM = 6.7
NEAR_RADIUS_KM = 25.0
# boundaries are inclusive; 1 mm absorbs float round-off for points placed on them
BOUNDARY_TOL_KM = 1e-6
BANDS = ("red", "green", "blue", "nir", "swir")


class RecordInvalidError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class TileFormatError(ValueError):
    pass


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a sphere of radius 6371.0088 km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def azimuthal_equidistant(lat0, lon0, lat, lon):
    """Project (lat, lon) to (east_km, north_km) around (lat0, lon0).

    Distances from the centre are exact great-circle distances.
    """
    p0, l0 = np.radians(lat0), np.radians(lon0)
    p, l = np.radians(lat), np.radians(lon)
    cos_c = np.sin(p0) * np.sin(p) + np.cos(p0) * np.cos(p) * np.cos(l - l0)
    c = np.arccos(np.clip(cos_c, -1.0, 1.0))
    k = np.where(c > 1e-12, c / np.sin(np.where(c > 1e-12, c, 1.0)), 1.0)
    x = k * np.cos(p) * np.sin(l - l0)
    y = k * (np.cos(p0) * np.sin(p) - np.sin(p0) * np.cos(p) * np.cos(l - l0))
    return EARTH_RADIUS_KM * x, EARTH_RADIUS_KM * y


def destination_point(lat, lon, bearing_deg, distance_km):
    """Point reached travelling ``distance_km`` from (lat, lon) on an initial bearing."""
    d = distance_km / EARTH_RADIUS_KM
    b = np.radians(bearing_deg)
    p1, l1 = np.radians(lat), np.radians(lon)
    p2 = np.arcsin(np.sin(p1) * np.cos(d) + np.cos(p1) * np.sin(d) * np.cos(b))
    l2 = l1 + np.arctan2(np.sin(b) * np.sin(d) * np.cos(p1), np.cos(d) - np.sin(p1) * np.sin(p2))
    return float(np.degrees(p2)), float((np.degrees(l2) + 540) % 360 - 180)


@dataclass
class Neighborhood:
    unit_id: str
    lat: float
    lon: float
    country: str
    adm1_id: str
    adm2_id: str
    square_side_km: float = NEIGHBORHOOD_SIDE_KM

    def __post_init__(self):
        if not -90 <= self.lat <= 90 or not -180 <= self.lon <= 180:
            raise RecordInvalidError(f"unit {self.unit_id}: coordinates out of range")


@dataclass
class ProjectRecord:
    project_id: str
    funder: str
    sector_code: int
    lat: float
    lon: float
    precision: int
    adm2_id: str | None
    year: int

    def __post_init__(self):
        if self.precision not in (1, 2, 3):
            raise RecordInvalidError(f"project {self.project_id}: precision {self.precision} not in 1..3")
        if self.precision == 3 and not self.adm2_id:
            raise RecordInvalidError(f"project {self.project_id}: precision 3 requires adm2_id")


def in_square(unit: Neighborhood, lat: float, lon: float) -> bool:
    """Point inside the unit's axis-aligned square in its local azimuthal frame."""
    x, y = azimuthal_equidistant(unit.lat, unit.lon, lat, lon)
    half = unit.square_side_km / 2
    return bool(abs(x) <= half + BOUNDARY_TOL_KM and abs(y) <= half + BOUNDARY_TOL_KM)


def assign_treatment(unit: Neighborhood, projects) -> int:
    """1 if any project covers the unit under the precision-specific rule.

    ``projects`` must already be filtered to one funder x sector and period.
    """
    for p in projects:
        if p.precision == 3 and not p.adm2_id:
            raise RecordInvalidError(f"project {p.project_id}: precision 3 requires adm2_id")
    reach = NEAR_RADIUS_KM + BOUNDARY_TOL_KM
    for p in projects:
        if p.precision == 1 and in_square(unit, p.lat, p.lon):
            return 1
        if p.precision == 2 and haversine_km(unit.lat, unit.lon, p.lat, p.lon) <= reach:
            return 1
        if p.precision == 3 and str(p.adm2_id) == str(unit.adm2_id):
            return 1
    return 0


# ---------------------------------------------------------------------------
# ADM2 polygons
# ---------------------------------------------------------------------------

@dataclass
class AdminArea:
    adm2_id: str
    country: str
    adm1_id: str
    rings: list  # list of polygons, each a list of rings (exterior first) of (lon, lat)


def _check_ring(ring, adm2_id):
    if len(ring) < 4 or tuple(ring[0]) != tuple(ring[-1]):
        raise GeometryError(f"polygon {adm2_id}: ring is not closed")


def load_adm2_geojson(path_or_obj) -> dict:
    """GeoJSON FeatureCollection -> {adm2_id: AdminArea}.

    Features need properties ``adm2_id`` and ``country`` (``adm1_id`` optional)
    and Polygon or MultiPolygon geometry.
    """
    if isinstance(path_or_obj, dict):
        obj = path_or_obj
    else:
        with open(path_or_obj) as fh:
            obj = json.load(fh)
    out = {}
    for feat in obj["features"]:
        props = feat["properties"]
        aid = str(props["adm2_id"])
        geom = feat["geometry"]
        polys = [geom["coordinates"]] if geom["type"] == "Polygon" else geom["coordinates"]
        for poly in polys:
            for ring in poly:
                _check_ring(ring, aid)
        out[aid] = AdminArea(aid, str(props.get("country", "")), str(props.get("adm1_id", "")), polys)
    return out


def adm2_geojson(areas) -> dict:
    feats = []
    for a in areas:
        geom = ({"type": "Polygon", "coordinates": a.rings[0]} if len(a.rings) == 1
                else {"type": "MultiPolygon", "coordinates": a.rings})
        feats.append({"type": "Feature",
                      "properties": {"adm2_id": a.adm2_id, "country": a.country, "adm1_id": a.adm1_id},
                      "geometry": geom})
    return {"type": "FeatureCollection", "features": feats}


def _shape(area: AdminArea):
    from shapely.geometry import MultiPolygon, Polygon

    polys = [Polygon(p[0], p[1:]) for p in area.rings]
    return polys[0] if len(polys) == 1 else MultiPolygon(polys)


def spatial_join_adjacent_adm2(areas: dict, tolerance: float = 1e-6) -> dict:
    """Symmetric adjacency: boundaries within ``tolerance`` degrees share a point.

    Corner contact counts as adjacency. Country borders are ignored.
    """
    from shapely import STRtree

    for a in areas.values():
        for poly in a.rings:
            for ring in poly:
                _check_ring(ring, a.adm2_id)
    ids = list(areas)
    boundaries = [_shape(areas[i]).boundary for i in ids]
    tree = STRtree(boundaries)
    adj = {i: set() for i in ids}
    for i, b in enumerate(boundaries):
        for j in tree.query(b.buffer(tolerance)):
            j = int(j)
            if j != i and b.distance(boundaries[j]) <= tolerance:
                adj[ids[i]].add(ids[j])
                adj[ids[j]].add(ids[i])
    return adj


def locate_points(areas: dict, lats, lons) -> list:
    """ADM2 id containing each point (None when outside every polygon)."""
    from shapely import STRtree, points

    ids = list(areas)
    shapes = [_shape(areas[i]) for i in ids]
    tree = STRtree(shapes)
    pts = points(np.column_stack([lons, lats]))
    out = [None] * len(pts)
    pi, si = tree.query(pts, predicate="intersects")
    for p, s in zip(pi, si):
        if out[p] is None:
            out[p] = ids[s]
    return out


# ---------------------------------------------------------------------------
# tiles
# ---------------------------------------------------------------------------

@dataclass
class ImageTile:
    """Band-major raster; masked pixels hold NaN and are False in ``mask``."""

    tile_id: str
    pixels: np.ndarray
    mask: np.ndarray
    period: int = -1
    bands: tuple = field(default=BANDS)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.pixels.ndim != 3 or self.pixels.shape[1:] != self.mask.shape:
            raise TileFormatError(f"tile {self.tile_id}: pixels {self.pixels.shape} vs mask {self.mask.shape}")
        self.pixels = np.where(self.mask[None], self.pixels, np.float32(np.nan))

    @property
    def side(self) -> int:
        return self.pixels.shape[1]


TILE_MAGIC = b"GCTL"
TILE_VERSION = 1


def write_tile(path, tile: ImageTile):
    """GCTL: magic, version u32, bands u32, side u32, float32 LE band-major, bitpacked mask."""
    bands, side, _ = tile.pixels.shape
    with open(path, "wb") as fh:
        fh.write(TILE_MAGIC)
        fh.write(struct.pack("<III", TILE_VERSION, bands, side))
        fh.write(np.where(tile.mask[None], tile.pixels, 0).astype("<f4").tobytes())
        fh.write(np.packbits(tile.mask.reshape(-1), bitorder="little").tobytes())


def read_tile(path, tile_id: str | None = None, period: int = -1) -> ImageTile:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TILE_MAGIC:
        raise TileFormatError(f"{path}: bad magic")
    version, bands, side = struct.unpack_from("<III", data, 4)
    if version != TILE_VERSION:
        raise TileFormatError(f"{path}: unsupported version {version}")
    n = bands * side * side
    pix = np.frombuffer(data, dtype="<f4", count=n, offset=16).reshape(bands, side, side)
    bits = np.frombuffer(data, dtype=np.uint8, offset=16 + 4 * n)
    mask = np.unpackbits(bits, bitorder="little")[: side * side].astype(bool).reshape(side, side)
    return ImageTile(tile_id or str(path), pix.copy(), mask, period)


def median_composite(scenes, tile_id: str = "composite", period: int = -1) -> ImageTile:
    """Per-pixel median over the valid (unmasked) scenes; masked where none is valid.

    ``scenes`` is a list of ImageTile or (pixels, mask) pairs with equal geometry.
    """
    if not scenes:
        raise ValueError("median_composite needs at least one scene")
    stacks, masks = [], []
    for s in scenes:
        pix, mask = (s.pixels, s.mask) if isinstance(s, ImageTile) else s
        stacks.append(np.where(np.asarray(mask, bool)[None], pix, np.nan))
        masks.append(np.asarray(mask, bool))
    shapes = {a.shape for a in stacks}
    if len(shapes) != 1:
        raise ValueError(f"scenes differ in geometry: {shapes}")
    stack = np.stack(stacks).astype(np.float64)
    valid = np.any(np.stack(masks), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
        med = np.nanmedian(stack, axis=0)
    return ImageTile(tile_id, med.astype(np.float32), valid, period)
