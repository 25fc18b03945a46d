"""Multi-process scenario runs over loopback TCP.

The calling process hosts the platform (cloud and edge brokers) on the host
monotonic clock and serves length-prefixed frames. Producers live in one
child process and every consumer in its own. A frame whose body starts
with ``{`` is a JSON control message; anything else is an encoded envelope.

Network emulation stays inside the platform process: an uplink envelope is
held for the emulated link delay (or dropped) before ingest, exactly as in
single-process runs.
"""
from __future__ import annotations

import asyncio
import logging
import multiprocessing as mp
import random
import time
from array import array
from types import SimpleNamespace
from typing import Dict, List, Optional

import psutil

from ..broker import Envelope, decode_envelope, encode_envelope, frame, read_frame
from ..cam import encode_cam, make_cam
from ..clients import NOMINAL_RATE, payload_size
from ..control import ControlService, decode_message, encode_message
from ..domain import DataQuery, DataType, GeoPoint, Licence, ProducerDescriptor, licences
from ..edge import EdgeConfig
from ..netem import NS_PER_S, LinkProfile, RealtimeScheduler, derive_seed
from ..runtime import Platform
from .metrics import MetricsRecord, collect_resources
from .scenario import EDGE_ID, SERVING_AREA, InvariantBreach, ScenarioConfig, finalise, measure

logger = logging.getLogger(__name__)

HOST = "127.0.0.1"
CLOCK_SKEW = 1e-3  # same draw as clients.Producer


class RemoteDevice:
    """Platform-side stand-in for a producer living in another process."""

    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.pseudo_id: Optional[str] = None
        self.host_name: Optional[str] = None

    def _send(self, event: str, host_name: str) -> None:
        if self.writer.is_closing():
            return
        msg = {"id": None, "event": event, "pseudo_id": self.pseudo_id, "host": host_name}
        self.writer.write(frame(encode_message(msg)))

    def activate(self, host_name: str) -> None:
        self._send("ACTIVATE", host_name)

    def deactivate(self, host_name: str) -> None:
        self._send("DEACTIVATE", host_name)


class RemoteConsumerView:
    """What the platform handed to one remote consumer (for the run invariants)."""

    def __init__(self, consumer_id: str, session_id: str):
        self.consumer_id = consumer_id
        self.session = SimpleNamespace(session_id=session_id)
        self.received = 0
        self.received_bytes = 0
        self.order_violations = 0
        self.licences_seen = set()
        self.paths = set()
        self._last_seq: Dict[str, int] = {}
        self.delays_ns = array("q")
        self.access_delay_ns: Optional[int] = None

    def record(self, env) -> None:
        self.received += 1
        self.received_bytes += len(env.payload)
        last = self._last_seq.get(env.pseudo_id)
        if last is not None and env.seq <= last:
            self.order_violations += 1
        self._last_seq[env.pseudo_id] = env.seq
        self.licences_seen.add(env.licence)
        self.paths.add(env.path)


class PlatformServer:
    def __init__(self, platform: Platform):
        self.platform = platform
        self.control = ControlService(platform)
        self.consumers: Dict[str, RemoteConsumerView] = {}
        self.uplink_lost = 0
        self.rejected = 0
        self.malformed = 0

    async def on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                data = await read_frame(reader)
                if data[:1] == b"{":
                    self._control(data, writer)
                else:
                    self._uplink(data)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            writer.close()

    def _control(self, data: bytes, writer) -> None:
        msg = decode_message(data)
        verb = msg.get("verb")
        device = RemoteDevice(writer) if verb == "REGISTER_FLOW" else None
        reply = self.control.handle_frame(data, device)
        out = decode_message(reply)
        if "result" in out:
            if device is not None:
                device.pseudo_id = out["result"]["flow"]["pseudo_id"]
            elif verb == "OPEN_SESSION":
                self._attach_consumer(msg["body"], out["result"], writer)
        writer.write(frame(reply))

    def _attach_consumer(self, body: dict, result: dict, writer) -> None:
        consumer_id = body["query"]["consumer_id"]
        view = RemoteConsumerView(consumer_id, result["session_id"])
        self.consumers[consumer_id] = view
        broker = self.platform.cloud.broker_of(result["consumer_host"])
        token = self.control.tokens[result["token"]]

        def forward(env, ts):
            view.record(env)
            if not writer.is_closing():
                writer.write(frame(encode_envelope(env)))

        broker.subscribe(token, result["consumer_topic"], forward, node="consumer",
                         name=f"consumer:{consumer_id}")

    def _uplink(self, data: bytes) -> None:
        try:
            env = decode_envelope(data)
            host, topic, token = self.platform.cloud.attachment(env.pseudo_id)
        except (ValueError, KeyError) as exc:
            self.malformed += 1
            logger.debug("uplink frame dropped: %s", exc)
            return
        cloud = self.platform.cloud
        flow = cloud.catalogue.flows[env.pseudo_id]
        link = self.platform.netem.link(flow.producer_link, f"uplink:{env.pseudo_id}:{host.name}")
        arrival = link.transmit(self.platform.clock.now())
        if arrival is None:
            self.uplink_lost += 1
            return
        self.platform.scheduler.call_at(arrival, self._land, host, token, topic, env, node=host.name)

    def _land(self, host, token, topic, env) -> None:
        try:
            host.receive(token, topic, env)
        except Exception as exc:
            self.rejected += 1
            logger.debug("sample %s/%d rejected: %s", env.pseudo_id, env.seq, exc)


# -- child processes ---------------------------------------------------------

class _FrameConn:
    """Async request/response over one stream, with an event callback."""

    def __init__(self, reader, writer, on_event=None, on_data=None):
        self.reader, self.writer = reader, writer
        self.on_event, self.on_data = on_event, on_data
        self._pending: Dict[int, asyncio.Future] = {}
        self._ids = 0
        self.task = asyncio.ensure_future(self._pump())

    async def call(self, verb: str, body: dict) -> dict:
        self._ids += 1
        fut = asyncio.get_running_loop().create_future()
        self._pending[self._ids] = fut
        self.writer.write(frame(encode_message({"id": self._ids, "verb": verb, "body": body})))
        msg = await fut
        if "error" in msg:
            raise RuntimeError(f"{verb}: {msg['error']['kind']}: {msg['error']['message']}")
        return msg["result"]

    async def _pump(self) -> None:
        try:
            while True:
                data = await read_frame(self.reader)
                if data[:1] != b"{":
                    self.on_data(data)
                    continue
                msg = decode_message(data)
                fut = self._pending.pop(msg["id"], None) if msg["id"] is not None else None
                if fut is not None:
                    fut.set_result(msg)
                elif self.on_event is not None:
                    self.on_event(msg)
        except (asyncio.IncompleteReadError, ConnectionError):
            pass


async def _pipe_recv(conn):
    return await asyncio.get_running_loop().run_in_executor(None, conn.recv)


class _RemoteProducer:
    def __init__(self, index: int, pos: GeoPoint, config: ScenarioConfig, rng: random.Random):
        self.station_id = 100000 + index
        self.pos = pos
        self.dtype = config.dtype
        self.licence = config.licence
        self.rate = NOMINAL_RATE[self.dtype]
        nominal_period = NS_PER_S / self.rate
        self.phase_ns = rng.randrange(int(round(nominal_period)))
        self.period_ns = int(round(nominal_period * (1.0 + rng.uniform(0.0, CLOCK_SKEW))))
        self.jitter_ns = 0
        self.rng = random.Random(rng.getrandbits(64))
        self.size = payload_size(self.dtype, config.payload_scale)
        self.link = config.producer_link
        self.pseudo_id = None
        self.seq = 0
        self.produced = 0
        self.gen = 0
        self.streaming = False

    def descriptor(self) -> ProducerDescriptor:
        return ProducerDescriptor(self.dtype, Licence(self.licence), self.pos, self.rate, self.link)

    def payload(self, now: int) -> bytes:
        if self.dtype is DataType.CITS:
            cam = make_cam(self.station_id, self.pos.lat, self.pos.lon, gen_delta_ms=now // 1_000_000,
                           vin=f"VIN{self.station_id:014d}")
            return encode_cam(cam, self.size)
        return bytes(self.size)


async def _producer_child(port: int, config: ScenarioConfig, pipe) -> None:
    loop = asyncio.get_running_loop()
    reader, writer = await asyncio.open_connection(HOST, port)
    rng = random.Random(derive_seed(config.seed, "producers"))
    producers: List[_RemoteProducer] = []
    for i in range(config.n_producers):
        pos = GeoPoint(rng.uniform(SERVING_AREA.min_lat, SERVING_AREA.max_lat),
                       rng.uniform(SERVING_AREA.min_lon, SERVING_AREA.max_lon))
        producers.append(_RemoteProducer(i, pos, config, rng))
    by_pseudo: Dict[str, _RemoteProducer] = {}
    stopped = False

    def schedule(p, slot):
        offset = p.rng.randrange(p.jitter_ns) if p.jitter_ns else 0
        loop.call_at((slot + offset) / NS_PER_S, tick, p, p.gen, slot)

    def tick(p, gen, slot):
        if gen != p.gen or not p.streaming or stopped:
            return
        # stamped with the emission slot: event-loop lateness then counts as
        # delay instead of squeezing the interval seen by the rate limiter
        now = slot
        p.seq += 1
        p.produced += 1
        env = Envelope(p.pseudo_id, p.seq, now, p.pos.lat, p.pos.lon, p.dtype, False, p.licence,
                       p.payload(now))
        writer.write(frame(encode_envelope(env)))
        schedule(p, slot + p.period_ns)

    def on_event(msg):
        p = by_pseudo.get(msg.get("pseudo_id"))
        if p is None or stopped:
            return
        p.gen += 1
        if msg["event"] == "ACTIVATE" and not p.streaming:
            p.streaming = True
            now = time.monotonic_ns()
            k = -(-(now - p.phase_ns) // p.period_ns)
            schedule(p, p.phase_ns + max(0, k) * p.period_ns)
        elif msg["event"] == "DEACTIVATE":
            p.streaming = False

    conn = _FrameConn(reader, writer, on_event=on_event)
    for p in producers:
        result = await conn.call("REGISTER_FLOW", {"producer": p.descriptor().to_dict()})
        p.pseudo_id = result["flow"]["pseudo_id"]
        by_pseudo[p.pseudo_id] = p
    pipe.send({"registered": len(producers)})
    await _pipe_recv(pipe)
    stopped = True
    await writer.drain()
    pipe.send({"produced": sum(p.produced for p in producers)})
    writer.close()


async def _consumer_child(port: int, config: ScenarioConfig, consumer_id: str, pipe) -> None:
    reader, writer = await asyncio.open_connection(HOST, port)
    delays = array("q")
    first = []

    def on_data(data):
        now = time.monotonic_ns()
        env = decode_envelope(data)
        if not first:
            first.append(now)
        delays.append(now - env.produce_ts_ns)

    conn = _FrameConn(reader, writer, on_data=on_data)
    query = DataQuery(consumer_id, SERVING_AREA, {config.dtype}, licences(config.licence))
    sla = config.sla_contract()
    host = EDGE_ID if config.consumer_host == "MEC" else None
    session = await conn.call("OPEN_SESSION", {"query": query.to_dict(), "sla": sla.to_dict(),
                                               "consumer_host": host})
    pipe.send({"session_id": session["session_id"]})
    await _pipe_recv(pipe)
    pipe.send({"delays_ns": delays.tolist(), "access_delay_ns":
               (first[0] - session["created_ts"]) if first else None})
    await _pipe_recv(pipe)
    ledger = await conn.call("CLOSE_SESSION", {"session_id": session["session_id"]})
    pipe.send({"ledger": ledger})
    writer.close()


def producer_main(port: int, config: dict, pipe) -> None:
    asyncio.run(_producer_child(port, ScenarioConfig.from_dict(config), pipe))


def consumer_main(port: int, config: dict, consumer_id: str, pipe) -> None:
    asyncio.run(_consumer_child(port, ScenarioConfig.from_dict(config), consumer_id, pipe))


# -- orchestration ---------------------------------------------------------

class _ProcessSampler:
    """CPU% and RSS of the participating OS processes, once per second (psutil)."""

    def __init__(self, pids: Dict[str, int]):
        self.procs = {name: psutil.Process(pid) for name, pid in pids.items()}
        self.series = {"t_s": [], "cpu": {n: [] for n in pids}, "rss_mib": {n: [] for n in pids}}
        for p in self.procs.values():
            p.cpu_percent(None)
        self.t0 = time.monotonic()

    def sample(self) -> None:
        self.series["t_s"].append(round(time.monotonic() - self.t0, 3))
        for name, p in self.procs.items():
            try:
                self.series["cpu"][name].append(p.cpu_percent(None))
                self.series["rss_mib"][name].append(p.memory_info().rss / 2 ** 20)
            except psutil.Error:
                self.series["cpu"][name].append(float("nan"))
                self.series["rss_mib"][name].append(float("nan"))


async def _run(config: ScenarioConfig, strict: bool, progress) -> MetricsRecord:
    wall0 = time.perf_counter()
    loop = asyncio.get_running_loop()
    profiles = {name: LinkProfile.from_dict({"name": name, **spec}) for name, spec in config.profiles.items()}
    platform = Platform(seed=config.seed, profiles=profiles, startup_delay_ms=config.startup_delay_ms,
                        bridge_setup_ms=config.bridge_setup_ms, trust_checks=config.trust_checks,
                        scheduler=RealtimeScheduler(loop))
    edge = platform.add_edge(EdgeConfig(EDGE_ID, SERVING_AREA))
    server = PlatformServer(platform)
    srv = await asyncio.start_server(server.on_connect, HOST, 0)
    port = srv.sockets[0].getsockname()[1]
    ctx = mp.get_context("spawn")
    cfg = config.to_dict()
    children = []
    try:
        prod_pipe, child_end = ctx.Pipe()
        pproc = ctx.Process(target=producer_main, args=(port, cfg, child_end), daemon=True)
        pproc.start()
        children.append(pproc)
        await _pipe_recv(prod_pipe)
        monitor = collect_resources(platform, nodes=["cloud", EDGE_ID])
        cons_pipes = []
        for i in range(config.fanout):
            parent_end, child_end = ctx.Pipe()
            proc = ctx.Process(target=consumer_main, args=(port, cfg, f"consumer-{i:03d}", child_end), daemon=True)
            proc.start()
            children.append(proc)
            await _pipe_recv(parent_end)
            cons_pipes.append((f"consumer-{i:03d}", parent_end))
        if progress:
            progress(f"{config.label()}: {config.n_producers} producers, {config.fanout} consumer(s), "
                     f"multiproc on port {port}")
        sampler = _ProcessSampler({"platform": mp.current_process().pid, "producers": pproc.pid,
                                   **{name: p.pid for (name, _), p in zip(cons_pipes, children[1:])}})
        end = loop.time() + config.duration_s
        while loop.time() < end:
            await asyncio.sleep(min(1.0, end - loop.time()))
            sampler.sample()
        prod_pipe.send("stop")
        produced = (await _pipe_recv(prod_pipe))["produced"]
        await asyncio.sleep(config.drain_s)
        for cid, pipe in cons_pipes:
            pipe.send("report")
            data = await _pipe_recv(pipe)
            view = server.consumers[cid]
            view.delays_ns = array("q", data["delays_ns"])
            view.access_delay_ns = data["access_delay_ns"]
        views = [server.consumers[cid] for cid, _ in cons_pipes]
        rec = measure(config, platform, edge, views, produced=produced, uplink_lost=server.uplink_lost,
                      rejected=server.rejected + server.malformed)
        for cid, pipe in cons_pipes:
            pipe.send("close")
            rec.ledger[cid] = (await _pipe_recv(pipe))["ledger"]
        await asyncio.sleep(1.0)
        monitor.stop()
        finalise(rec, platform, edge, monitor, wall0)
        rec.resources["processes"] = sampler.series
        rec.config["mode"] = "multiproc"
    finally:
        srv.close()
        for proc in children:
            await loop.run_in_executor(None, proc.join, 10)
            if proc.is_alive():
                proc.terminate()
    if strict and not rec.ok:
        raise InvariantBreach("; ".join(rec.diagnostics))
    return rec


def run_multiproc(config: ScenarioConfig, strict: bool = False, progress=None) -> MetricsRecord:
    """Run ``config`` with producers and consumers in separate OS processes."""
    return asyncio.run(_run(config, strict, progress))
