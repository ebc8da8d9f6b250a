"""asyncio server and worker processes around the control-plane core.

The server runs one actor task that owns the ``ControlPlane``; connection
handlers submit closures to it and await the result. Worker-bound messages
are delivered by one sender task per worker so their order is preserved.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import random
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .cluster import CheckpointStore, ClusterConfig, ControlPlane, LeaseManager, Outbound
from .domain import JobSpec, ResourceVector, WorkerDescriptor
from .errors import (
    ConsistencyError,
    EdgeOffloadError,
    NoCapacityError,
    NotLeaderError,
    ProtocolError,
    SubmissionError,
)
from .protocol import (
    DEFAULT_TIMEOUT_S,
    Connection,
    HEADER,
    HEADER_SIZE,
    MAX_FRAME_BYTES,
    Message,
    MessageType,
    b64decode,
    b64encode,
    decode_body,
    encode,
    read_body,
    request_once,
    split_address,
    write_message,
)
from .sim.latency import roundtrip_latency

log = logging.getLogger(__name__)

NOT_LEADER = "not_leader"
NO_CAPACITY = "no_capacity"
INVALID = "invalid"
CONFLICT = "conflict"
UNREACHABLE = "unreachable"
INTERNAL = "internal"

CANNED_DETECTIONS = [
    {"label": "person", "score": 0.91, "box": [0.12, 0.20, 0.58, 0.71]},
]


def error_code(exc: Exception) -> str:
    if isinstance(exc, NotLeaderError):
        return NOT_LEADER
    if isinstance(exc, NoCapacityError):
        return NO_CAPACITY
    if isinstance(exc, ConsistencyError):
        return CONFLICT
    if isinstance(exc, (EdgeOffloadError, ValueError, KeyError, TypeError)):
        return INVALID
    return INTERNAL


async def _serve(address: str, handler) -> tuple:
    host, port = split_address(address)
    server = await asyncio.start_server(handler, host, port, limit=MAX_FRAME_BYTES + HEADER_SIZE)
    sock_host, sock_port = server.sockets[0].getsockname()[:2]
    return server, f"{sock_host}:{sock_port}"


async def _handle_connection(reader, writer, respond) -> None:
    try:
        while True:
            try:
                body = await read_body(reader)
                if body is None:
                    break
                msg = decode_body(body)
            except ProtocolError as exc:
                # the stream position is unknown after a bad frame: report and close
                err = Message(MessageType.ERROR, {"code": INVALID, "message": str(exc)})
                await write_message(writer, err)
                break
            reply = await respond(msg, body)
            await write_message(writer, reply)
    except (ConnectionError, asyncio.IncompleteReadError):
        pass
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass


class ServerNode:
    """The ML server: leader election, control plane actor, request routing."""

    def __init__(self, listen: str, state_dir, config: Optional[ClusterConfig] = None,
                 node_id: Optional[str] = None):
        self.listen = listen
        self.state_dir = Path(state_dir)
        self.config = config or ClusterConfig()
        self.node_id = node_id or f"server-{socket.gethostname()}-{id(self):x}"
        self.store = CheckpointStore(self.state_dir / "checkpoints")
        self.lease = LeaseManager(self.state_dir, self.node_id, self.config.lease_duration_s)
        self.plane = ControlPlane(self.config, self.store, lease=self.lease)
        self.address: Optional[str] = None
        self._server = None
        self._inbox: asyncio.Queue = None
        self._senders: dict = {}
        self._tasks: list = []
        self._term = None
        # idle forwarding connections per worker address
        self._pool: dict = {}

    async def start(self) -> str:
        self._inbox = asyncio.Queue()
        self._server, self.address = await _serve(self.listen, self._handle)
        self.lease.address = self.address
        self._tasks = [
            asyncio.create_task(self._actor()),
            asyncio.create_task(self._lease_loop()),
            asyncio.create_task(self._failure_loop()),
        ]
        await self._renew_lease()
        log.info("server %s listening on %s", self.node_id, self.address)
        return self.address

    async def serve_forever(self) -> None:
        await asyncio.gather(*self._tasks)

    async def stop(self) -> None:
        tasks = self._tasks + [task for task, _ in self._senders.values()]
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        self._senders.clear()
        for conns in self._pool.values():
            for conn in conns:
                await conn.close()
        self._pool.clear()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self.lease.release()

    # -- actor ---------------------------------------------------------------

    async def call(self, fn, *args):
        fut = asyncio.get_running_loop().create_future()
        await self._inbox.put((fn, args, fut))
        return await fut

    async def _actor(self) -> None:
        while True:
            fn, args, fut = await self._inbox.get()
            try:
                result = fn(*args)
            except Exception as exc:  # noqa: BLE001 - returned to the caller
                if not fut.cancelled():
                    fut.set_exception(exc)
            else:
                if not fut.cancelled():
                    fut.set_result(result)

    def _deliver(self, outbound: list) -> None:
        for ob in outbound:
            entry = self._senders.get(ob.worker_id)
            if entry is None or entry[0].done():
                queue = asyncio.Queue()
                task = asyncio.create_task(self._sender(queue))
                self._senders[ob.worker_id] = (task, queue)
            self._senders[ob.worker_id][1].put_nowait(ob)

    async def _sender(self, queue: asyncio.Queue) -> None:
        while True:
            ob: Outbound = await queue.get()
            try:
                reply = await request_once(ob.address, ob.message, self.config.forward_timeout_s)
                if reply.type == MessageType.ERROR:
                    log.warning("worker %s rejected %s: %s", ob.worker_id, ob.message.type.value,
                                reply.payload.get("message"))
            except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
                # the heartbeat timeout decides whether the worker is gone
                log.warning("push of %s to %s failed: %s", ob.message.type.value, ob.worker_id, exc)

    async def _forward(self, address: str, frame: bytes, msg_id: str) -> Message:
        """Request over a pooled connection. A pooled connection may have
        gone stale, so its failure is retried once on a fresh one."""
        idle = self._pool.setdefault(address, [])
        while True:
            pooled = bool(idle)
            conn = idle.pop() if pooled else await Connection.open(address, self.config.forward_timeout_s)
            try:
                reply = await conn.request_frame(frame, msg_id)
            except (OSError, asyncio.TimeoutError, ProtocolError):
                await conn.close()
                if pooled:
                    idle.clear()
                    continue
                raise
            idle.append(conn)
            return reply

    # -- background loops ------------------------------------------------------

    async def _renew_lease(self) -> None:
        try:
            lease = self.lease.acquire()
        except OSError as exc:
            log.error("lease update failed: %s", exc)
            return
        if lease is not None and lease.term != self._term:
            if self._term is not None:
                await self.call(self.plane.reset)
            self._term = lease.term
            log.info("%s is leader for term %d", self.node_id, lease.term)

    async def _lease_loop(self) -> None:
        while True:
            await asyncio.sleep(self.config.lease_duration_s / 3)
            await self._renew_lease()

    async def _failure_loop(self) -> None:
        while True:
            await asyncio.sleep(self.config.heartbeat_period_s / 2)
            if not self.lease.is_leader():
                continue
            dead, out = await self.call(self.plane.detect_failures)
            if dead:
                log.warning("workers declared dead: %s", ", ".join(dead))
            self._deliver(out)

    # -- request handling ------------------------------------------------------

    async def _handle(self, reader, writer) -> None:
        await _handle_connection(reader, writer, self.respond)

    async def respond(self, msg: Message, body: Optional[bytes] = None) -> Message:
        try:
            return await self._dispatch(msg, body)
        except Exception as exc:  # noqa: BLE001 - every failure becomes an ERROR reply
            code = error_code(exc)
            if code == INTERNAL:
                log.exception("internal error handling %s", msg.type.value)
            payload = {"code": code, "message": str(exc)}
            if isinstance(exc, NotLeaderError) and exc.leader:
                payload["leader"] = exc.leader
            return msg.reply(MessageType.ERROR, payload)

    async def _dispatch(self, msg: Message, body: Optional[bytes]) -> Message:
        p = msg.payload
        if msg.type == MessageType.REGISTER:
            desc = WorkerDescriptor.from_dict(p["worker"])
            out = await self.call(self.plane.register_worker, desc, tuple(p.get("serves", ())))
            self._deliver(out)
            return msg.reply(MessageType.REGISTER_ACK, {
                "worker_id": desc.worker_id,
                "heartbeat_period_s": self.config.heartbeat_period_s,
                "term": self._term,
            })
        if msg.type == MessageType.HEARTBEAT:
            reply, out = await self.call(
                self.plane.heartbeat, p["worker_id"], p.get("utilization"), p.get("progress")
            )
            self._deliver(out)
            return msg.reply(MessageType.HEARTBEAT_ACK, reply)
        if msg.type == MessageType.SUBMIT_JOB:
            spec = JobSpec.from_dict(p["job"])
            out = await self.call(self.plane.submit_job, spec)
            self._deliver(out)
            status = await self.call(self.plane.job_status, spec.job_id)
            return msg.reply(MessageType.JOB_STATUS, {"jobs": status})
        if msg.type == MessageType.JOB_STATUS:
            status = await self.call(self.plane.job_status, p.get("job_id"))
            return msg.reply(MessageType.JOB_STATUS, {"jobs": status})
        if msg.type == MessageType.CHECKPOINT_DONE:
            blob = b64decode(p.get("blob_b64", ""))
            out = await self.call(self.plane.checkpoint_done, p["job_id"], blob,
                                  float(p.get("delta_s", 0.0)))
            self._deliver(out)
            status = await self.call(self.plane.job_status, p["job_id"])
            return msg.reply(MessageType.JOB_STATUS, {"jobs": status})
        if msg.type == MessageType.OFFLOAD_REQUEST:
            return await self._offload(msg, body)
        raise SubmissionError(f"server does not accept {msg.type.value}")

    async def _offload(self, msg: Message, body: Optional[bytes] = None) -> Message:
        """Forward to the least-loaded hosting worker; if the forward
        fails, mark that worker unreachable and try the next one."""
        t0 = time.perf_counter()
        model = msg.payload["model_name"]
        tried = []
        while True:
            try:
                wid, addr = await self.call(self.plane.route_inference, model, tuple(tried))
            except NoCapacityError:
                if tried:
                    raise NoCapacityError(
                        f"every worker hosting {model!r} failed ({', '.join(tried)})"
                    ) from None
                raise
            # the client's frame is forwarded as is; the worker answers to the same id
            frame = HEADER.pack(len(body)) + body if body is not None else encode(msg)
            try:
                reply = await self._forward(addr, frame, msg.id)
            except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
                log.warning("forward to %s failed (%s); rerouting", wid, exc)
                tried.append(wid)
                out = await self.call(self.plane.mark_unreachable, wid)
                self._deliver(out)
                continue
            finally:
                await self.call(self.plane.end_forward, wid)
            if reply.type == MessageType.ERROR:
                tried.append(wid)
                continue
            payload = dict(reply.payload)
            payload["worker_id"] = wid
            timings = dict(payload.get("timings", {}))
            timings["server_total_ms"] = (time.perf_counter() - t0) * 1000.0
            payload["timings"] = timings
            return msg.reply(MessageType.OFFLOAD_RESPONSE, payload)


# -- worker ------------------------------------------------------------------

@dataclass
class _Assignment:
    job_id: str
    spec: dict
    members: int
    primary: bool
    executed_s: float
    resumed_at: float
    duration_s: Optional[float]
    checkpoint_overhead_s: float
    restored_blob: Optional[bytes] = None
    reported_s: float = 0.0
    stopping: bool = False

    def executed(self, now: float) -> float:
        if self.stopping:
            return self.executed_s
        return self.executed_s + (now - self.resumed_at)


@dataclass
class WorkerStats:
    served: int = 0
    busy_s: float = 0.0
    restored: dict = field(default_factory=dict)


class WorkerNode:
    """An ML worker with a synthetic executor: inference sleeps the model's
    profiled service time; training members just accumulate run time."""

    def __init__(self, servers, capacity: ResourceVector, profiles: dict, tags=(),
                 listen: str = "127.0.0.1:0", worker_id: Optional[str] = None, seed: int = 0,
                 heartbeat_period_s: Optional[float] = None, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.servers = list(servers) if not isinstance(servers, str) else servers.split(",")
        if not self.servers:
            raise ValueError("at least one server address is required")
        self.capacity = capacity
        self.profiles = dict(profiles)
        self.tags = frozenset(tags)
        self.listen = listen
        self.worker_id = worker_id
        self.rng = random.Random(seed)
        self.heartbeat_period_s = heartbeat_period_s
        self.timeout_s = timeout_s
        self.address: Optional[str] = None
        self.leader: Optional[str] = None
        self.assignments: dict = {}
        self.stats = WorkerStats()
        self._server = None
        self._tasks: list = []
        self._executor = asyncio.Lock()
        self._conns: set = set()
        self._busy_since_hb = 0.0
        self._last_hb = time.monotonic()

    async def start(self) -> str:
        self._server, self.address = await _serve(self.listen, self._handle)
        if self.worker_id is None:
            self.worker_id = f"{socket.gethostname()}-{self.address.rsplit(':', 1)[1]}"
        await self.register()
        self._tasks = [asyncio.create_task(self._heartbeat_loop())]
        log.info("worker %s listening on %s", self.worker_id, self.address)
        return self.address

    async def serve_forever(self) -> None:
        await asyncio.gather(*self._tasks)

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._server is not None:
            self._server.close()
            # a stopped worker must not keep answering on established connections
            for writer in list(self._conns):
                writer.close()
            await self._server.wait_closed()

    def descriptor(self) -> WorkerDescriptor:
        return WorkerDescriptor(self.worker_id, self.capacity, self.tags, self.address)

    # -- talking to the leader ---------------------------------------------------

    async def _to_leader(self, msg: Message) -> Message:
        """Send to the known leader, else each server in turn."""
        order = ([self.leader] if self.leader else []) + [s for s in self.servers if s != self.leader]
        last = None
        for addr in order:
            try:
                reply = await request_once(addr, msg, self.timeout_s)
            except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
                last = exc
                continue
            if reply.type == MessageType.ERROR and reply.payload.get("code") == NOT_LEADER:
                last = NotLeaderError(reply.payload.get("message", "not leader"))
                continue
            self.leader = addr
            return reply
        self.leader = None
        raise ConnectionError(f"no leader reachable among {order}: {last}")

    async def register(self, retry_until: Optional[float] = None) -> None:
        deadline = retry_until if retry_until is not None else time.monotonic() + 30.0
        payload = {"worker": self.descriptor().to_dict(), "serves": sorted(self.profiles)}
        while True:
            try:
                reply = await self._to_leader(Message(MessageType.REGISTER, payload))
            except ConnectionError:
                if time.monotonic() >= deadline:
                    raise
                await asyncio.sleep(0.2)
                continue
            if reply.type == MessageType.ERROR:
                raise EdgeOffloadError(f"registration rejected: {reply.payload.get('message')}")
            if self.heartbeat_period_s is None:
                self.heartbeat_period_s = float(reply.payload.get("heartbeat_period_s", 2.0))
            return

    async def _heartbeat_loop(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_period_s)
            try:
                await self.heartbeat()
            except (ConnectionError, EdgeOffloadError) as exc:
                log.warning("heartbeat failed: %s", exc)

    def _progress(self) -> dict:
        now = time.monotonic()
        out = {}
        for jid, a in sorted(self.assignments.items()):
            if not a.primary or a.stopping:
                continue
            executed = a.executed(now)
            done = a.duration_s is not None and executed >= a.duration_s
            if done:
                executed = a.duration_s
            out[jid] = {"delta_s": max(0.0, executed - a.reported_s), "done": done}
            a.reported_s = executed
        for jid, rep in out.items():
            if rep["done"]:
                del self.assignments[jid]
        return out

    def _utilization(self) -> dict:
        now = time.monotonic()
        window = max(now - self._last_hb, 1e-6)
        busy = min(1.0, self._busy_since_hb / window)
        self._busy_since_hb = 0.0
        self._last_hb = now
        return {"executor": busy}

    async def heartbeat(self) -> dict:
        msg = Message(MessageType.HEARTBEAT, {
            "worker_id": self.worker_id,
            "utilization": self._utilization(),
            "progress": self._progress(),
        })
        reply = await self._to_leader(msg)
        if reply.type == MessageType.ERROR:
            raise EdgeOffloadError(reply.payload.get("message", "heartbeat rejected"))
        if reply.payload.get("reregister"):
            self.assignments.clear()
            await self.register()
        for jid in reply.payload.get("stop", ()):
            self.assignments.pop(jid, None)
        return reply.payload

    # -- incoming messages ---------------------------------------------------------

    async def _handle(self, reader, writer) -> None:
        self._conns.add(writer)
        try:
            await _handle_connection(reader, writer, self.respond)
        finally:
            self._conns.discard(writer)

    async def respond(self, msg: Message, body: Optional[bytes] = None) -> Message:
        try:
            return await self._dispatch(msg)
        except Exception as exc:  # noqa: BLE001 - every failure becomes an ERROR reply
            code = error_code(exc)
            if code == INTERNAL:
                log.exception("internal error handling %s", msg.type.value)
            return msg.error(code, str(exc))

    async def _dispatch(self, msg: Message) -> Message:
        p = msg.payload
        if msg.type in (MessageType.DISPATCH, MessageType.RESUME):
            self._start(p)
            return msg.reply(MessageType.JOB_STATUS, {"job_id": p["job_id"], "status": "running"})
        if msg.type == MessageType.PREEMPT:
            a = self.assignments.get(p["job_id"])
            if a is not None and p.get("checkpoint") and not p.get("discard"):
                a.executed_s = a.executed(time.monotonic())
                a.stopping = True
                asyncio.create_task(self._checkpoint(a))
            else:
                self.assignments.pop(p["job_id"], None)
            return msg.reply(MessageType.JOB_STATUS, {"job_id": p["job_id"], "status": "stopping"})
        if msg.type == MessageType.OFFLOAD_REQUEST:
            return await self._infer(msg)
        raise SubmissionError(f"worker does not accept {msg.type.value}")

    def _start(self, p: dict) -> None:
        spec = p["job"]
        blob = b64decode(p["checkpoint_b64"]) if p.get("checkpoint_b64") else None
        if blob is not None:
            self.stats.restored[p["job_id"]] = blob
        executed = float(p.get("executed_time_s", 0.0))
        self.assignments[p["job_id"]] = _Assignment(
            job_id=p["job_id"],
            spec=spec,
            members=int(p.get("members", 1)),
            primary=bool(p.get("primary", True)),
            executed_s=executed,
            resumed_at=time.monotonic(),
            duration_s=spec.get("true_duration_s"),
            checkpoint_overhead_s=float(p.get("checkpoint_overhead_s", 0.0)),
            restored_blob=blob,
            reported_s=executed,
        )

    async def _checkpoint(self, a: _Assignment) -> None:
        await asyncio.sleep(a.checkpoint_overhead_s)
        state = {"job_id": a.job_id, "executed_s": a.executed_s, "worker_id": self.worker_id}
        if a.restored_blob is not None:
            state["restored_sha256"] = hashlib.sha256(a.restored_blob).hexdigest()
        blob = json.dumps(state, sort_keys=True).encode("utf-8")
        if self.assignments.get(a.job_id) is a:
            del self.assignments[a.job_id]
        msg = Message(MessageType.CHECKPOINT_DONE, {
            "job_id": a.job_id,
            "blob_b64": b64encode(blob),
            "delta_s": max(0.0, a.executed_s - a.reported_s),
        })
        try:
            reply = await self._to_leader(msg)
            if reply.type == MessageType.ERROR:
                log.warning("checkpoint of %s rejected: %s", a.job_id, reply.payload.get("message"))
        except ConnectionError as exc:
            log.warning("checkpoint of %s not delivered: %s", a.job_id, exc)

    async def _infer(self, msg: Message) -> Message:
        model = msg.payload["model_name"]
        profile = self.profiles.get(model)
        if profile is None:
            raise NoCapacityError(f"worker {self.worker_id} does not serve {model!r}")
        data = b64decode(msg.payload["data_b64"])
        t_arrive = time.perf_counter()
        async with self._executor:
            t_start = time.perf_counter()
            service_ms = roundtrip_latency(profile, len(data), self.rng)
            await asyncio.sleep(service_ms / 1000.0)
            t_end = time.perf_counter()
        self._busy_since_hb += t_end - t_start
        self.stats.served += 1
        self.stats.busy_s += t_end - t_start
        return msg.reply(MessageType.OFFLOAD_RESPONSE, {
            "model_name": model,
            "detections": CANNED_DETECTIONS,
            "payload_bytes": len(data),
            "payload_sha256": hashlib.sha256(data).hexdigest(),
            "timings": {
                "queue_ms": (t_start - t_arrive) * 1000.0,
                "service_ms": (t_end - t_start) * 1000.0,
            },
        })


# -- client ------------------------------------------------------------------

async def leader_request(servers, msg: Message, timeout: float = DEFAULT_TIMEOUT_S) -> Message:
    """Send one request to whichever server currently leads."""
    addrs = servers.split(",") if isinstance(servers, str) else list(servers)
    last = None
    for addr in addrs:
        try:
            reply = await request_once(addr, msg, timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            last = exc
            continue
        if reply.type == MessageType.ERROR and reply.payload.get("code") == NOT_LEADER:
            last = NotLeaderError(reply.payload.get("message", "not leader"))
            continue
        return reply
    raise ConnectionError(f"no leader reachable among {addrs}: {last}")
