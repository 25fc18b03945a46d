import pytest
from hypothesis import HealthCheck, settings

from crowdstream.domain import GeoRegion
from crowdstream.edge import EdgeConfig
from crowdstream.runtime import Platform

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

AREA_A = GeoRegion(43.28, 43.34, -2.02, -1.94)
AREA_B = GeoRegion(43.28, 43.34, -1.90, -1.82)


@pytest.fixture
def platform():
    p = Platform(seed=11)
    p.add_edge(EdgeConfig("mec-a", AREA_A))
    return p


@pytest.fixture
def two_edges():
    p = Platform(seed=12)
    p.add_edge(EdgeConfig("mec-a", AREA_A))
    p.add_edge(EdgeConfig("mec-b", AREA_B))
    return p


def spawn(platform, n, data_type="cits", area=AREA_A, licence="open", link="ETH", seed=0, start_id=1):
    """Register ``n`` producers at seeded random spots inside ``area``."""
    import random

    from crowdstream.clients import Producer, Vehicle
    from crowdstream.domain import GeoPoint

    rng = random.Random(seed)
    out = []
    for i in range(start_id, start_id + n):
        pos = GeoPoint(rng.uniform(area.min_lat, area.max_lat), rng.uniform(area.min_lon, area.max_lon))
        prod = Producer(platform, Vehicle(f"veh-{i}", pos, 1000 + i), data_type, licence,
                        producer_link=link, rng=random.Random(rng.getrandbits(32)))
        prod.register()
        out.append(prod)
    return out


def query(consumer_id="c1", region=AREA_A, types=("cits",), lics=("open",), min_quality=0.0):
    from crowdstream.domain import DataQuery, licences
    return DataQuery(consumer_id, region, frozenset(types), licences(*lics), min_quality)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
