"""Shared domain types and geospatial primitives.

Every type here is a frozen dataclass: safe to share between tasks and
hashable where it makes sense (regions, points, licences).
"""
from __future__ import annotations

import enum
import math
import secrets
from dataclasses import dataclass, replace
from typing import FrozenSet

EARTH_RADIUS_M = 6_371_000.0

_GEOHASH_ALPHABET = "0123456789bcdefghjkmnpqrstuvwxyz"
DEFAULT_TILE_PRECISION = 5


class ValidationError(ValueError):
    """Raised when a domain value violates its invariants."""


class DataType(str, enum.Enum):
    CITS = "cits"
    IMAGE = "image"
    VIDEO = "video"

    @classmethod
    def parse(cls, value: "str | DataType") -> "DataType":
        if isinstance(value, DataType):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValidationError(f"unknown data type {value!r}") from None


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValidationError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude {self.lon} out of range")

    def to_dict(self) -> dict:
        return {"lat": self.lat, "lon": self.lon}

    @classmethod
    def from_dict(cls, d) -> "GeoPoint":
        return cls(float(d["lat"]), float(d["lon"]))


@dataclass(frozen=True)
class GeoRegion:
    """Axis-aligned lat/lon rectangle with inclusive bounds.

    Regions crossing the antimeridian cannot be expressed (min_lon must not
    exceed max_lon) and are rejected.
    """

    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def __post_init__(self):
        GeoPoint(self.min_lat, self.min_lon)
        GeoPoint(self.max_lat, self.max_lon)
        if self.min_lat > self.max_lat:
            raise ValidationError("min_lat > max_lat")
        if self.min_lon > self.max_lon:
            raise ValidationError("min_lon > max_lon (antimeridian-crossing regions are not supported)")

    def contains(self, point: GeoPoint) -> bool:
        return region_contains(self, point)

    def overlaps(self, other: "GeoRegion") -> bool:
        return not (
            other.min_lat > self.max_lat
            or other.max_lat < self.min_lat
            or other.min_lon > self.max_lon
            or other.max_lon < self.min_lon
        )

    @property
    def centre(self) -> GeoPoint:
        return GeoPoint((self.min_lat + self.max_lat) / 2, (self.min_lon + self.max_lon) / 2)

    def to_dict(self) -> dict:
        return {
            "min_lat": self.min_lat,
            "max_lat": self.max_lat,
            "min_lon": self.min_lon,
            "max_lon": self.max_lon,
        }

    @classmethod
    def from_dict(cls, d) -> "GeoRegion":
        return cls(float(d["min_lat"]), float(d["max_lat"]), float(d["min_lon"]), float(d["max_lon"]))

    @classmethod
    def everywhere(cls) -> "GeoRegion":
        return cls(-90.0, 90.0, -180.0, 180.0)


def region_contains(region: GeoRegion, point: GeoPoint) -> bool:
    return (
        region.min_lat <= point.lat <= region.max_lat
        and region.min_lon <= point.lon <= region.max_lon
    )


def geotile(point: GeoPoint, precision: int = DEFAULT_TILE_PRECISION) -> str:
    """Base-32 geohash of ``point`` with ``precision`` characters (1..8)."""
    if not isinstance(precision, int) or not 1 <= precision <= 8:
        raise ValidationError(f"geotile precision must be in 1..8, got {precision!r}")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bits = 0
    nbits = 0
    even = True
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if point.lon >= mid:
                bits = (bits << 1) | 1
                lon_lo = mid
            else:
                bits <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if point.lat >= mid:
                bits = (bits << 1) | 1
                lat_lo = mid
            else:
                bits <<= 1
                lat_hi = mid
        even = not even
        nbits += 1
        if nbits == 5:
            chars.append(_GEOHASH_ALPHABET[bits])
            bits = 0
            nbits = 0
    return "".join(chars)


def geotile_bounds(tile: str) -> GeoRegion:
    """Cell rectangle of a geohash string."""
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for ch in tile:
        try:
            value = _GEOHASH_ALPHABET.index(ch)
        except ValueError:
            raise ValidationError(f"invalid geohash character {ch!r}") from None
        for shift in range(4, -1, -1):
            bit = (value >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    return GeoRegion(lat_lo, lat_hi, lon_lo, lon_hi)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in metres on a spherical Earth."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class Licence:
    id: str

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("licence id must be a non-empty string")

    def __str__(self):
        return self.id


def new_opaque_id(prefix: str, nbytes: int = 8) -> str:
    return f"{prefix}-{secrets.token_hex(nbytes)}"


@dataclass(frozen=True)
class FlowDescriptor:
    flow_id: str
    pseudo_id: str
    data_type: DataType
    licence: Licence
    home_position: GeoPoint
    nominal_rate: float
    producer_link: str = "ETH"

    def __post_init__(self):
        if not self.flow_id or not self.pseudo_id:
            raise ValidationError("flow_id and pseudo_id must be non-empty")
        if self.flow_id == self.pseudo_id:
            raise ValidationError("pseudo_id must differ from flow_id")
        if not (self.nominal_rate > 0 and math.isfinite(self.nominal_rate)):
            raise ValidationError("nominal_rate must be positive")
        object.__setattr__(self, "data_type", DataType.parse(self.data_type))

    @property
    def tile(self) -> str:
        return geotile(self.home_position)

    def to_dict(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "pseudo_id": self.pseudo_id,
            "data_type": self.data_type.value,
            "licence": self.licence.id,
            "home_position": self.home_position.to_dict(),
            "nominal_rate": self.nominal_rate,
            "producer_link": self.producer_link,
        }

    @classmethod
    def from_dict(cls, d) -> "FlowDescriptor":
        return cls(
            flow_id=d["flow_id"],
            pseudo_id=d["pseudo_id"],
            data_type=DataType.parse(d["data_type"]),
            licence=Licence(d["licence"]),
            home_position=GeoPoint.from_dict(d["home_position"]),
            nominal_rate=float(d["nominal_rate"]),
            producer_link=d.get("producer_link", "ETH"),
        )


@dataclass(frozen=True)
class ProducerDescriptor:
    """What a producer submits at registration; the platform mints the ids."""

    data_type: DataType
    licence: Licence
    position: GeoPoint
    nominal_rate: float
    producer_link: str = "ETH"

    def __post_init__(self):
        object.__setattr__(self, "data_type", DataType.parse(self.data_type))
        if not (self.nominal_rate > 0 and math.isfinite(self.nominal_rate)):
            raise ValidationError("nominal_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "data_type": self.data_type.value,
            "licence": self.licence.id,
            "position": self.position.to_dict(),
            "nominal_rate": self.nominal_rate,
            "producer_link": self.producer_link,
        }

    @classmethod
    def from_dict(cls, d) -> "ProducerDescriptor":
        return cls(
            DataType.parse(d["data_type"]),
            Licence(d["licence"]),
            GeoPoint.from_dict(d["position"]),
            float(d["nominal_rate"]),
            d.get("producer_link", "ETH"),
        )


@dataclass(frozen=True)
class DataSample:
    pseudo_id: str
    seq: int
    produce_ts: int
    geotag: GeoPoint
    data_type: DataType
    payload: bytes
    anonymised: bool = False

    def replace(self, **changes) -> "DataSample":
        return replace(self, **changes)


@dataclass(frozen=True)
class DataQuery:
    consumer_id: str
    region: GeoRegion
    data_types: FrozenSet[DataType]
    licences: FrozenSet[Licence]
    min_quality: float = 0.0

    def __post_init__(self):
        types = frozenset(DataType.parse(t) for t in self.data_types)
        lics = frozenset(l if isinstance(l, Licence) else Licence(l) for l in self.licences)
        if not types:
            raise ValidationError("query needs at least one data type")
        if not lics:
            raise ValidationError("query needs at least one licence")
        if not 0.0 <= self.min_quality <= 1.0:
            raise ValidationError("min_quality must be within [0, 1]")
        if not self.consumer_id:
            raise ValidationError("consumer_id must be non-empty")
        object.__setattr__(self, "data_types", types)
        object.__setattr__(self, "licences", lics)

    def matches(self, flow: FlowDescriptor, quality: float = 1.0) -> bool:
        return (
            flow.data_type in self.data_types
            and region_contains(self.region, flow.home_position)
            and flow.licence in self.licences
            and quality >= self.min_quality
        )

    def to_dict(self) -> dict:
        return {
            "consumer_id": self.consumer_id,
            "region": self.region.to_dict(),
            "data_types": sorted(t.value for t in self.data_types),
            "licences": sorted(l.id for l in self.licences),
            "min_quality": self.min_quality,
        }

    @classmethod
    def from_dict(cls, d) -> "DataQuery":
        return cls(
            d["consumer_id"],
            GeoRegion.from_dict(d["region"]),
            frozenset(DataType.parse(t) for t in d["data_types"]),
            frozenset(Licence(l) for l in d["licences"]),
            float(d.get("min_quality", 0.0)),
        )


@dataclass(frozen=True)
class SlaContract:
    max_rate: float
    cpu_allocation: float = 1.0

    def __post_init__(self):
        if not (self.max_rate > 0 and math.isfinite(self.max_rate)):
            raise ValidationError("max_rate must be positive")
        if not (self.cpu_allocation > 0 and math.isfinite(self.cpu_allocation)):
            raise ValidationError("cpu_allocation must be positive")

    def to_dict(self) -> dict:
        return {"max_rate": self.max_rate, "cpu_allocation": self.cpu_allocation}

    @classmethod
    def from_dict(cls, d) -> "SlaContract":
        return cls(float(d["max_rate"]), float(d.get("cpu_allocation", 1.0)))


def licences(*ids: str) -> FrozenSet[Licence]:
    return frozenset(Licence(i) for i in ids)
