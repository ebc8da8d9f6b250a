import asyncio
import hashlib
import random
import struct

from edgeoffload.cluster import ClusterConfig, load_worker_profiles
from edgeoffload.domain import JobSpec, ModelProfile, ResourceVector
from edgeoffload.node import ServerNode, WorkerNode, leader_request
from edgeoffload.protocol import Message, MessageType, b64encode, read_message, request_once, split_address

FAST = ClusterConfig(heartbeat_period_s=0.2, lease_duration_s=2.0, forward_timeout_s=2.0)
GPU = ResourceVector(gpus=1, cpu_cores=4, memory_mb=8192)


def profiles(rtt_ms=5):
    return load_worker_profiles({"models": {"ssd_mobilenet_v1": {"measured_rtt_ms": rtt_ms}}})


async def offload(server, data, model="ssd_mobilenet_v1", attempts=50):
    """Offload once, waiting out the brief window before the serving job starts."""
    msg = Message(MessageType.OFFLOAD_REQUEST, {"model_name": model, "data_b64": b64encode(data)})
    for _ in range(attempts):
        reply = await leader_request([server], msg)
        if reply.type != MessageType.ERROR or reply.payload.get("code") != "no_capacity":
            return reply
        await asyncio.sleep(0.05)
    return reply


async def cluster(tmp_path, n_workers=1, rtt_ms=5):
    server = ServerNode("127.0.0.1:0", tmp_path, FAST, node_id="s1")
    addr = await server.start()
    workers = []
    for i in range(n_workers):
        w = WorkerNode([addr], GPU, profiles(rtt_ms), worker_id=f"w{i}", seed=i)
        await w.start()
        workers.append(w)
    return server, addr, workers


async def shutdown(server, workers):
    for w in workers:
        await w.stop()
    await server.stop()


def test_192kb_payload_survives_the_round_trip(tmp_path):
    data = random.Random(9).randbytes(192 * 1024)

    async def main():
        server, addr, workers = await cluster(tmp_path)
        try:
            return await offload(addr, data)
        finally:
            await shutdown(server, workers)

    reply = asyncio.run(main())
    assert reply.type == MessageType.OFFLOAD_RESPONSE
    assert reply.payload["payload_sha256"] == hashlib.sha256(data).hexdigest()
    assert reply.payload["payload_bytes"] == len(data)
    assert reply.payload["worker_id"] == "w0"
    assert reply.payload["timings"]["service_ms"] >= 4


def test_oversize_frame_gets_an_error_and_the_connection_closes(tmp_path):
    async def main():
        server, addr, workers = await cluster(tmp_path, n_workers=0)
        try:
            reader, writer = await asyncio.open_connection(*split_address(addr))
            writer.write(struct.pack(">I", 2**31))
            await writer.drain()
            reply = await read_message(reader)
            tail = await reader.read()
            writer.close()
            return reply, tail
        finally:
            await shutdown(server, workers)

    reply, tail = asyncio.run(main())
    assert reply.type == MessageType.ERROR and reply.payload["code"] == "invalid"
    assert tail == b""


def test_unknown_model_is_a_no_capacity_error(tmp_path):
    async def main():
        server, addr, workers = await cluster(tmp_path)
        try:
            return await leader_request([addr], Message(MessageType.OFFLOAD_REQUEST,
                                                        {"model_name": "nope", "data_b64": ""}))
        finally:
            await shutdown(server, workers)

    reply = asyncio.run(main())
    assert reply.type == MessageType.ERROR and reply.payload["code"] == "no_capacity"


def test_submitted_training_job_runs_and_accrues_service(tmp_path):
    spec = JobSpec(job_id="train", required=ResourceVector(gpus=1, cpu_cores=1, memory_mb=1024),
                   model=ModelProfile("resnet"))

    async def main():
        server, addr, workers = await cluster(tmp_path)
        try:
            reply = await leader_request([addr], Message(MessageType.SUBMIT_JOB, {"job": spec.to_dict()}))
            assert reply.type == MessageType.JOB_STATUS
            await asyncio.sleep(0.8)
            status = await leader_request([addr], Message(MessageType.JOB_STATUS, {"job_id": "train"}))
            return status.payload["jobs"][0]
        finally:
            await shutdown(server, workers)

    status = asyncio.run(main())
    assert status["status"] == "running" and status["workers"] == ["w0"]
    assert status["executed_time_s"] > 0


def test_requests_keep_flowing_when_a_worker_dies(tmp_path):
    async def main():
        server, addr, workers = await cluster(tmp_path, n_workers=2)
        try:
            seen = set()
            for _ in range(6):
                reply = await offload(addr, b"frame")
                assert reply.type == MessageType.OFFLOAD_RESPONSE
                seen.add(reply.payload["worker_id"])
            # stop without deregistering: the server only learns from forwards and heartbeats
            await workers[0].stop()
            served = []
            for _ in range(10):
                reply = await offload(addr, b"frame")
                assert reply.type == MessageType.OFFLOAD_RESPONSE, reply.payload
                served.append(reply.payload["worker_id"])
            return seen, served
        finally:
            await shutdown(server, workers[1:])

    seen, served = asyncio.run(main())
    assert seen == {"w0", "w1"}
    assert set(served) == {"w1"}


def test_second_server_is_not_leader_and_points_to_the_first(tmp_path):
    async def main():
        s1 = ServerNode("127.0.0.1:0", tmp_path, FAST, node_id="s1")
        s2 = ServerNode("127.0.0.1:0", tmp_path, FAST, node_id="s2")
        a1 = await s1.start()
        a2 = await s2.start()
        try:
            direct = await request_once(a2, Message(MessageType.JOB_STATUS, {}))
            routed = await leader_request([a2, a1], Message(MessageType.JOB_STATUS, {}))
            return a1, direct, routed
        finally:
            await s2.stop()
            await s1.stop()

    a1, direct, routed = asyncio.run(main())
    assert direct.type == MessageType.ERROR and direct.payload["code"] == "not_leader"
    assert direct.payload["leader"] == a1
    assert routed.type == MessageType.JOB_STATUS
