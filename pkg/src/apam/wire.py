"""Framed byte protocol and the message-passing run mode.

Frame layout (little-endian, crc32 with the IEEE 0xEDB88320 polynomial
over every preceding byte):

    magic    4 bytes  b"APAM"
    msg_type 1 byte   0 = params push, 1 = gradient, 2 = shutdown
    version  u64      parameter version the payload refers to
    worker   u32
    n        u32      payload length in float64 values
    payload  n * f64
    crc32    u32

The master pushes versioned parameter frames and workers answer with
gradient frames; staleness is just the difference between the master's
current version and the version a gradient was computed at. The default
transport is an in-process loopback (with an optional frame latency to
inject staleness); a localhost stream-socket transport runs real worker
threads behind the same interface.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .problems import derive_batch_seed
from .runtime import GradMsg, RunConfig, RunTrace, _Master, _resolve_start
from .staleness import ParamHistory, ReadMeta
from .vectormath import as_vec

MAGIC = b"APAM"
MSG_PARAMS = 0
MSG_GRADIENT = 1
MSG_SHUTDOWN = 2

_HEADER = struct.Struct("<4sBQII")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size  # 21
CRC_SIZE = _CRC.size  # 4


class WireError(Exception):
    """Base class for frame codec and transport failures."""


class BadMagicError(WireError):
    pass


class TruncatedFrameError(WireError):
    pass


class CrcMismatchError(WireError):
    pass


@dataclass(frozen=True)
class WireFrame:
    msg_type: int
    version: int
    worker_id: int
    payload: np.ndarray

    def __post_init__(self):
        if self.msg_type not in (MSG_PARAMS, MSG_GRADIENT, MSG_SHUTDOWN):
            raise ValueError(f"unknown msg_type {self.msg_type}")
        if not (0 <= self.version < 1 << 64):
            raise ValueError("version must fit in an unsigned 64-bit field")
        if not (0 <= self.worker_id < 1 << 32):
            raise ValueError("worker_id must fit in an unsigned 32-bit field")
        object.__setattr__(self, "payload", as_vec(self.payload))

    @property
    def n(self) -> int:
        return self.payload.shape[0]


def frame_size(n: int) -> int:
    return HEADER_SIZE + 8 * n + CRC_SIZE


def encode_frame(frame: WireFrame) -> bytes:
    head = _HEADER.pack(
        MAGIC, frame.msg_type, frame.version, frame.worker_id, frame.n
    ) + frame.payload.astype("<f8").tobytes()
    return head + _CRC.pack(zlib.crc32(head) & 0xFFFFFFFF)


def decode_frame(buf: bytes) -> WireFrame:
    if len(buf) < HEADER_SIZE:
        raise TruncatedFrameError(f"{len(buf)} bytes is shorter than a frame header")
    magic, msg_type, version, worker_id, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    total = frame_size(n)
    if len(buf) < total:
        raise TruncatedFrameError(f"frame needs {total} bytes, got {len(buf)}")
    if len(buf) > total:
        raise WireError(f"{len(buf) - total} trailing bytes after frame")
    (crc_stored,) = _CRC.unpack_from(buf, total - CRC_SIZE)
    crc_actual = zlib.crc32(buf[: total - CRC_SIZE]) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise CrcMismatchError(f"crc {crc_stored:#010x} != computed {crc_actual:#010x}")
    if msg_type not in (MSG_PARAMS, MSG_GRADIENT, MSG_SHUTDOWN):
        raise WireError(f"unknown msg_type {msg_type}")
    payload = np.frombuffer(buf, dtype="<f8", count=n, offset=HEADER_SIZE).astype(np.float64)
    return WireFrame(msg_type, version, worker_id, payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            raise TruncatedFrameError("connection closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> WireFrame:
    """Read one complete frame from a stream socket."""
    head = _recv_exact(sock, HEADER_SIZE)
    magic, _, _, _, n = _HEADER.unpack_from(head)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    rest = _recv_exact(sock, 8 * n + CRC_SIZE)
    return decode_frame(head + rest)


class LoopbackTransport:
    """In-process transport: per-worker parameter frame streams.

    A worker sees the frame `latency` positions behind the newest one in
    its stream, which is how in-flight staleness is injected without any
    real concurrency.
    """

    def __init__(self, workers: int, latency: int = 0):
        if latency < 0:
            raise ValueError("latency must be nonnegative")
        self.latency = latency
        self._streams: list[list[bytes]] = [[] for _ in range(workers)]

    def push_params(self, worker: int, frame_bytes: bytes) -> None:
        self._streams[worker].append(frame_bytes)

    def visible_params(self, worker: int) -> bytes:
        stream = self._streams[worker]
        if not stream:
            raise WireError(f"no parameter frame for worker {worker}")
        return stream[max(0, len(stream) - 1 - self.latency)]


def _wire_worker_compute(problem, frame: WireFrame, worker: int, counter: int,
                         batch_size: int, master_seed: int) -> bytes:
    bseed = derive_batch_seed(master_seed, worker, counter)
    g = problem.minibatch_grad(frame.payload, batch_size, bseed)
    return encode_frame(WireFrame(MSG_GRADIENT, frame.version, worker, g))


def run_wire(problem, hp, cfg: RunConfig, hooks=(), box=None, x0=None) -> RunTrace:
    """Message-passing mode; master-side semantics identical to run_sim.

    Every frame crossing the transport goes through the byte codec.
    Terminates after cfg.total_iterations applied gradients; the master
    answers every gradient (applied or dropped) with a fresh parameter
    frame, so a worker behind a large latency still converges back under
    the staleness bound instead of stalling.
    """
    if cfg.mode != "wire":
        raise ValueError("run_wire requires cfg.mode == 'wire'")
    if cfg.wire_transport == "loopback":
        return _run_wire_loopback(problem, hp, cfg, hooks, box, x0)
    if cfg.wire_transport == "socket":
        return _run_wire_socket(problem, hp, cfg, hooks, box, x0)
    raise ValueError(f"unknown wire transport {cfg.wire_transport!r}")


def _params_frame(hist: ParamHistory) -> bytes:
    return encode_frame(
        WireFrame(MSG_PARAMS, hist.current_version, 0, hist.get(hist.current_version))
    )


def _run_wire_loopback(problem, hp, cfg, hooks, box, x0) -> RunTrace:
    box, x0 = _resolve_start(problem, box, x0)
    capacity = cfg.policy.tau_max + 2
    hist = ParamHistory(capacity)
    master = _Master(problem, hp, box, cfg.policy, hist, hooks, x0, sim_clock=True)
    transport = LoopbackTransport(cfg.workers, cfg.wire_latency)
    for w in range(cfg.workers):
        transport.push_params(w, _params_frame(hist))
    counters = [0] * cfg.workers
    produced = 0
    w = 0
    while master.applied < cfg.total_iterations:
        pframe = decode_frame(transport.visible_params(w))
        counters[w] += 1
        raw = _wire_worker_compute(
            problem, pframe, w, counters[w], cfg.batch_size, cfg.master_seed
        )
        gframe = decode_frame(raw)
        produced += 1
        meta = ReadMeta.consistent(gframe.n, gframe.version)
        master.deliver(GradMsg(gframe.payload, meta, w, derive_batch_seed(
            cfg.master_seed, w, counters[w])))
        transport.push_params(w, _params_frame(hist))
        w = (w + 1) % cfg.workers
    return RunTrace(
        mode="wire",
        rows=master.rows,
        final_state=master.state,
        applied=master.applied,
        dropped=master.dropped,
        produced=produced,
        staleness_hist=master.staleness_hist,
    )


def _run_wire_socket(problem, hp, cfg, hooks, box, x0) -> RunTrace:
    box, x0 = _resolve_start(problem, box, x0)
    hist = ParamHistory(cfg.policy.tau_max + 2)
    master = _Master(problem, hp, box, cfg.policy, hist, hooks, x0, sim_clock=False)

    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]
    stop = threading.Event()
    failures: list[tuple[int, BaseException]] = []

    def worker_main(wid: int) -> None:
        try:
            with socket.create_connection(("127.0.0.1", port)) as sock:
                sock.sendall(struct.pack("<I", wid))  # identify this connection
                counter = 0
                while True:
                    frame = read_frame(sock)
                    if frame.msg_type == MSG_SHUTDOWN:
                        return
                    counter += 1
                    sock.sendall(_wire_worker_compute(
                        problem, frame, wid, counter, cfg.batch_size, cfg.master_seed
                    ))
        except BaseException as exc:  # noqa: BLE001 - reported to the master
            if not stop.is_set():
                failures.append((wid, exc))
                stop.set()

    workers = [
        threading.Thread(target=worker_main, args=(w,), name=f"apam-wire-{w}", daemon=True)
        for w in range(cfg.workers)
    ]
    for t in workers:
        t.start()
    conns: dict[int, socket.socket] = {}
    inbox: queue.Queue = queue.Queue()

    def reader_main(wid: int, sock: socket.socket) -> None:
        try:
            while not stop.is_set():
                inbox.put((wid, read_frame(sock)))
        except BaseException:
            pass  # connection teardown during shutdown is expected

    readers = []
    t_start = time.perf_counter()
    try:
        for _ in range(cfg.workers):
            sock, _ = listener.accept()
            (wid,) = struct.unpack("<I", _recv_exact(sock, 4))
            conns[wid] = sock
        for wid, sock in conns.items():
            r = threading.Thread(target=reader_main, args=(wid, sock), daemon=True)
            r.start()
            readers.append(r)
            sock.sendall(_params_frame(hist))
        counters = {w: 0 for w in conns}
        produced = 0
        while master.applied < cfg.total_iterations:
            if failures:
                break
            try:
                wid, frame = inbox.get(timeout=0.1)
            except queue.Empty:
                continue
            if frame.msg_type != MSG_GRADIENT:
                raise WireError(f"unexpected frame type {frame.msg_type} from worker {wid}")
            counters[wid] += 1
            produced += 1
            meta = ReadMeta.consistent(frame.n, frame.version)
            master.deliver(GradMsg(
                frame.payload, meta, wid,
                derive_batch_seed(cfg.master_seed, wid, counters[wid]),
            ))
            conns[wid].sendall(_params_frame(hist))
    finally:
        stop.set()
        shutdown = encode_frame(WireFrame(MSG_SHUTDOWN, 0, 0, np.zeros(0)))
        for sock in conns.values():
            try:
                sock.sendall(shutdown)
            except OSError:
                pass
        for t in workers:
            t.join(timeout=5.0)
        stuck = [t.name for t in workers if t.is_alive()]
        for sock in conns.values():
            sock.close()
        listener.close()
    elapsed = time.perf_counter() - t_start
    if failures:
        wid, exc = failures[0]
        raise RuntimeError(f"wire worker {wid} failed: {exc!r}") from exc
    if stuck:
        raise RuntimeError(f"workers did not exit on shutdown: {stuck}")
    return RunTrace(
        mode="wire",
        rows=master.rows,
        final_state=master.state,
        applied=master.applied,
        dropped=master.dropped,
        produced=produced,
        staleness_hist=master.staleness_hist,
        elapsed_s=elapsed,
    )
