import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import pytest

from ocpsps.errors import InvariantViolation, RoutingUnavailable
from ocpsps.routing import HttpRoutingClient, StaticRoutingMatrix, estimated_matrix, haversine_km

ORIGIN = (37.5, 127.0)


def test_static_lookup_and_round_trip(tmp_path):
    m = StaticRoutingMatrix([ORIGIN], ["A", "B"], [[1.0, 2.5]], [[4.0, 9.0]])
    assert m.route((37.5000000001, 127.0), "B").travel_min == 9.0
    p = tmp_path / "r.json"
    p.write_text(json.dumps(m.to_dict()))
    assert StaticRoutingMatrix.load(p).to_dict() == m.to_dict()


def test_static_missing_route():
    m = StaticRoutingMatrix([ORIGIN], ["A"], [[1.0]], [[4.0]])
    with pytest.raises(RoutingUnavailable):
        m.route(ORIGIN, "Z")
    with pytest.raises(RoutingUnavailable):
        m.route((1.0, 1.0), "A")


def test_static_rejects_bad_tables():
    with pytest.raises(InvariantViolation):
        StaticRoutingMatrix([ORIGIN], ["A"], [[1.0, 2.0]], [[1.0, 2.0]])
    with pytest.raises(InvariantViolation):
        StaticRoutingMatrix([ORIGIN], ["A"], [[-1.0]], [[1.0]])


def test_haversine_one_degree_latitude():
    assert haversine_km((0.0, 0.0), (1.0, 0.0)) == pytest.approx(111.195, abs=1e-2)


def test_estimated_matrix_scales():
    m = estimated_matrix([ORIGIN], {"A": (37.51, 127.0)}, circuity=1.0, speed_kmh=60.0)
    r = m.route(ORIGIN, "A")
    assert r.distance_km == pytest.approx(haversine_km(ORIGIN, (37.51, 127.0)))
    assert r.travel_min == pytest.approx(r.distance_km)


@pytest.fixture
def server():
    hits = []

    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            q = parse_qs(urlparse(self.path).query)
            hits.append(q)
            if q["destination"][0].startswith("0.0"):
                self.send_response(500)
                self.end_headers()
                return
            lat = float(q["destination"][0].split(",")[0])
            body = json.dumps({"distance_km": lat - 37.0, "travel_min": 10.0}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    srv = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/route", hits
    srv.shutdown()
    srv.server_close()


def test_http_client_caches(server):
    url, hits = server
    client = HttpRoutingClient(url, {"A": (37.5, 127.1), "B": (37.25, 127.0)})
    assert client.route(ORIGIN, "A").distance_km == pytest.approx(0.5)
    client.route(ORIGIN, "A")
    assert len(hits) == 1
    routes = client.route_many([(ORIGIN, "A"), (ORIGIN, "B")] * 10, workers=4)
    assert [r.distance_km for r in routes[:2]] == pytest.approx([0.5, 0.25])
    assert len(hits) <= 1 + 4  # concurrent misses may race, but the cache bounds them


def test_http_client_failures(server):
    url, _ = server
    client = HttpRoutingClient(url, {"bad": (0.0, 0.0)})
    with pytest.raises(RoutingUnavailable):
        client.route(ORIGIN, "bad")
    with pytest.raises(RoutingUnavailable):
        client.route(ORIGIN, "unknown")
