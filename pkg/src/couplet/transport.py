"""Message delivery between instances.

Within one process a message goes straight into the receiving port's
:class:`PortQueue`, copied once on the way. Across processes it is encoded as
a DATA frame and written by a background thread on a :class:`FrameSocket`.
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import threading
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

from .codec import HEADER_SIZE, Data, Frame, Location as LocationFrame, Payload, decode_body, encode_frame, parse_header
from .errors import Aborted, ChannelClosed, CodecError, PeerUnreachable, QueueClosed
from .topology import Endpoint

log = logging.getLogger(__name__)


class Location(NamedTuple):
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Location":
        host, sep, port = text.rpartition(":")
        if not sep or not host:
            raise ValueError(f"expected HOST:PORT, got {text!r}")
        return cls(host, int(port))


@dataclass(frozen=True)
class PortRange:
    lo: int
    hi: int

    def __post_init__(self):
        if not (0 <= self.lo <= self.hi <= 0xFFFF):
            raise ValueError(f"bad port range {self.lo}:{self.hi}")

    def __contains__(self, port: int) -> bool:
        return self.lo <= port <= self.hi

    def overlaps(self, other: "PortRange") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi

    def __str__(self) -> str:
        return f"{self.lo}:{self.hi}"

    @classmethod
    def parse(cls, text: str) -> "PortRange":
        lo, sep, hi = text.partition(":")
        if not sep:
            raise ValueError(f"expected LO:HI, got {text!r}")
        return cls(int(lo), int(hi))


@dataclass(frozen=True)
class Message:
    src: Endpoint
    dst: Endpoint
    timestamp: float
    payload: Payload

    def __post_init__(self):
        if not (math.isfinite(self.timestamp) and self.timestamp >= 0):
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp}")

    def to_frame(self) -> Data:
        return Data(self.src, self.dst, self.timestamp, self.payload)

    @classmethod
    def from_frame(cls, f: Data) -> "Message":
        return cls(f.src, f.dst, f.timestamp, f.payload)


class PortQueue:
    """FIFO for one in-port: many producers, one consumer.

    Queues of the same instance may share a condition variable so the owner
    can wait on several ports at once.
    """

    def __init__(self, name: str = "", cond: threading.Condition | None = None, producers: int = 1):
        self.name = name
        self.cond = cond or threading.Condition()
        self._items: deque[Message] = deque()
        self._producers = producers
        self._receiver_open = True
        self._abort_reason: str | None = None
        self.received = 0

    def put(self, msg: Message) -> None:
        with self.cond:
            if self._abort_reason is not None:
                raise Aborted(self._abort_reason)
            if not self._receiver_open:
                raise ChannelClosed(f"{self.name}: receiver has finished")
            if self._producers <= 0:
                raise ChannelClosed(f"{self.name}: channel closed")
            self._items.append(msg)
            self.cond.notify_all()

    def close_producer(self) -> None:
        with self.cond:
            self._producers -= 1
            self.cond.notify_all()

    def close_receiver(self) -> int:
        """Mark the consumer finished; returns the number of unread messages."""
        with self.cond:
            self._receiver_open = False
            unread = len(self._items)
            self._items.clear()
            return unread

    def abort(self, reason: str) -> None:
        with self.cond:
            if self._abort_reason is None:
                self._abort_reason = reason
            self.cond.notify_all()

    # state probes; call with self.cond held
    def _ready(self) -> bool:
        return self._abort_reason is not None or bool(self._items) or self._producers <= 0

    @property
    def pending(self) -> int:
        return len(self._items)

    @property
    def closed(self) -> bool:
        return self._producers <= 0 and not self._items

    def _pop(self) -> Message:
        if self._abort_reason is not None:
            raise Aborted(self._abort_reason)
        if self._items:
            self.received += 1
            return self._items.popleft()
        raise QueueClosed(self.name)

    def get(self, timeout: float | None = None) -> Message:
        with self.cond:
            if not self.cond.wait_for(self._ready, timeout):
                raise TimeoutError(self.name)
            return self._pop()

    def try_get(self) -> Message | None:
        with self.cond:
            if self._abort_reason is None and not self._items and self._producers > 0:
                return None
            return self._pop()

    def wait_pending(self) -> bool:
        """Block until a message is queued (True) or the queue is closed (False)."""
        with self.cond:
            self.cond.wait_for(self._ready)
            if self._abort_reason is not None:
                raise Aborted(self._abort_reason)
            return bool(self._items)


@dataclass
class ChannelRef:
    """Where messages sent on one conduit go."""

    kind: str  # "in_process" or "socket"
    queue: PortQueue | None = None
    router: "OutboundRouter | None" = None
    dst_instance: str = ""
    zero_copy: bool = False

    @property
    def dst_location(self) -> Location | None:
        return self.router.location_of(self.dst_instance) if self.router else None


def send(ch: ChannelRef, m: Message) -> None:
    """Hand ``m`` over for delivery without waiting for the receiver."""
    if ch.kind == "in_process":
        if not ch.zero_copy:
            m = replace(m, payload=m.payload.copy())
        ch.queue.put(m)
    elif ch.kind == "socket":
        ch.router.post(ch.dst_instance, encode_frame(m.to_frame()))
    else:
        raise ValueError(f"unknown channel kind {ch.kind!r}")


def receive(q: PortQueue) -> Message:
    return q.get()


def try_receive(q: PortQueue) -> Message | None:
    return q.try_get()


# --- sockets -----------------------------------------------------------------


def read_exact(sock: socket.socket, n: int) -> bytearray | None:
    """Read exactly ``n`` bytes; None on clean EOF before the first byte."""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], min(n - got, 1 << 20))
        if k == 0:
            if got == 0:
                return None
            raise ConnectionError("connection closed mid-frame")
        got += k
    return buf


def read_frame(sock: socket.socket) -> Frame | None:
    """Blocking read of one whole frame; None on clean EOF."""
    head = read_exact(sock, HEADER_SIZE)
    if head is None:
        return None
    opcode, body_len = parse_header(head)
    body = read_exact(sock, body_len) if body_len else bytearray()
    if body is None:
        raise ConnectionError("connection closed mid-frame")
    return decode_body(opcode, body)


def _tune(sock: socket.socket) -> None:
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    except OSError:
        pass


class FrameSocket:
    """A framed stream connection with a background writer.

    ``send`` only enqueues. The writer thread connects lazily (when built from
    an address), writes an optional preamble, then drains the queue. When
    ``on_frame`` is given a reader thread delivers incoming frames to it.
    """

    _STOP = object()

    def __init__(
        self,
        sock: socket.socket | None = None,
        address: Location | None = None,
        preamble: bytes | None = None,
        on_frame: Callable[[Frame], None] | None = None,
        on_error: Callable[[Exception], None] | None = None,
        on_close: Callable[[], None] | None = None,
        name: str = "link",
        start_reading: bool = True,
    ):
        if sock is None and address is None:
            raise ValueError("need a socket or an address")
        self.name = name
        self.address = address
        self._sock = sock
        self._preamble = preamble
        self._on_frame = on_frame
        self._on_error = on_error
        self._on_close = on_close
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._connected = threading.Event()
        self._closed = False
        self._failed = False
        self.bytes_sent = 0
        if sock is not None:
            _tune(sock)
            self._connected.set()
        self._writer = threading.Thread(target=self._write_loop, name=f"{name}-writer", daemon=True)
        self._reader = None
        self._writer.start()
        if on_frame is not None and sock is not None and start_reading:
            self._start_reader()

    def start_reading(self) -> None:
        """Start delivering frames; for links built with ``start_reading=False``."""
        if self._reader is None:
            self._start_reader()

    def _start_reader(self) -> None:
        self._reader = threading.Thread(target=self._read_loop, name=f"{self.name}-reader", daemon=True)
        self._reader.start()

    def send(self, data: bytes) -> None:
        if self._closed or self._failed:
            raise ChannelClosed(f"{self.name} is closed")
        self._queue.put(data)

    def send_frame(self, frame: Frame) -> None:
        self.send(encode_frame(frame))

    def _fail(self, exc: Exception) -> None:
        if self._failed or self._closed:
            return
        self._failed = True
        if self._on_error is not None:
            self._on_error(exc)

    def _write_loop(self) -> None:
        try:
            if self._sock is None:
                try:
                    self._sock = socket.create_connection(tuple(self.address), timeout=10)
                    self._sock.settimeout(None)
                except OSError as exc:
                    raise PeerUnreachable(f"cannot connect to {self.address}: {exc}") from exc
                _tune(self._sock)
                self._connected.set()
                if self._on_frame is not None:
                    self._start_reader()
            if self._preamble:
                self._sock.sendall(self._preamble)
            while True:
                item = self._queue.get()
                if item is self._STOP:
                    break
                self._sock.sendall(item)
                self.bytes_sent += len(item)
            try:
                self._sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        except PeerUnreachable as exc:
            self._fail(exc)
        except OSError as exc:
            if not self._closed:
                self._fail(PeerUnreachable(f"write to {self.name} failed: {exc}"))

    def _read_loop(self) -> None:
        try:
            while True:
                frame = read_frame(self._sock)
                if frame is None:
                    break
                self._on_frame(frame)
        except Exception as exc:
            if not self._closed:
                log.debug("%s: reader stopped: %s", self.name, exc)
                self._fail(exc if isinstance(exc, CodecError) else PeerUnreachable(str(exc)))
                return
        if self._on_close is not None and not self._closed:
            self._on_close()

    def close(self, timeout: float | None = 30.0) -> None:
        """Flush queued data, then close the sending side."""
        if self._closed:
            return
        self._queue.put(self._STOP)
        self._writer.join(timeout)
        self._closed = True
        self._shutdown()

    def abort(self) -> None:
        """Drop queued data and tear the connection down now."""
        self._closed = True
        self._queue.put(self._STOP)
        self._shutdown()

    def _shutdown(self) -> None:
        sock = self._sock
        if sock is None:
            return
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()


class Listener:
    """Accept loop on the first free port of ``ports`` (0 means any port)."""

    def __init__(
        self,
        on_connection: Callable[[socket.socket, tuple], None],
        host: str = "127.0.0.1",
        ports: PortRange | int = 0,
        name: str = "listener",
    ):
        self.name = name
        self._on_connection = on_connection
        self._sock = _bind(host, ports)
        self.address = Location(host, self._sock.getsockname()[1])
        self._closed = False
        self._thread = threading.Thread(target=self._loop, name=name, daemon=True)

    def start(self) -> "Listener":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while True:
            try:
                conn, addr = self._sock.accept()
            except OSError:
                return
            if self._closed:
                conn.close()
                return
            self._on_connection(conn, addr)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def _bind(host: str, ports: PortRange | int) -> socket.socket:
    candidates = range(ports.lo, ports.hi + 1) if isinstance(ports, PortRange) else [ports]
    last: OSError | None = None
    for port in candidates:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
            sock.listen(128)
            return sock
        except OSError as exc:
            sock.close()
            last = exc
    raise OSError(f"no free port in {ports}: {last}")


class OutboundRouter:
    """Outgoing socket traffic of one local manager.

    Destination instances are resolved to a location on first use, by a
    helper thread, so posting never blocks; frames posted meanwhile are held
    in order. One connection is kept per destination location. Locations
    outside ``local_range`` go through ``relay`` when one is configured, with
    a LOCATION frame naming the final destination as the first frame.
    """

    def __init__(
        self,
        resolve: Callable[[str], Location],
        on_failure: Callable[[Exception], None],
        relay: Location | None = None,
        local_range: PortRange | None = None,
        on_frame: Callable[[Frame], None] | None = None,
        name: str = "router",
    ):
        self._resolve = resolve
        self._on_failure = on_failure
        self._relay = relay
        self._local_range = local_range
        self._on_frame = on_frame
        self.name = name
        self._lock = threading.Lock()
        self._routes: dict[str, Location] = {}
        self._pending: dict[str, list[bytes]] = {}
        self._links: dict[Location, FrameSocket] = {}
        self._closed = False
        self._abort_reason: str | None = None
        self._resolvers: list[threading.Thread] = []

    def location_of(self, instance: str) -> Location | None:
        return self._routes.get(instance)

    def post(self, dst_instance: str, data: bytes) -> None:
        with self._lock:
            if self._abort_reason is not None:
                raise Aborted(self._abort_reason)
            if self._closed:
                raise ChannelClosed(f"{self.name} is closed")
            loc = self._routes.get(dst_instance)
            if loc is not None:
                self._link(loc).send(data)
                return
            held = self._pending.get(dst_instance)
            if held is not None:
                held.append(data)
                return
            self._pending[dst_instance] = [data]
            th = threading.Thread(
                target=self._resolve_route, args=(dst_instance,), name=f"resolve-{dst_instance}", daemon=True
            )
            self._resolvers.append(th)
        th.start()

    def _resolve_route(self, dst_instance: str) -> None:
        try:
            loc = self._resolve(dst_instance)
        except Aborted:
            return
        except Exception as exc:  # resolution failure is fatal for the run
            self._on_failure(exc)
            return
        with self._lock:
            if self._abort_reason is not None:
                return
            link = self._link(loc)
            held = self._pending.pop(dst_instance, [])
            self._routes[dst_instance] = loc
            try:
                for data in held:
                    link.send(data)
            except ChannelClosed as exc:
                failure = exc
            else:
                return
        self._on_failure(failure)

    def _link(self, loc: Location) -> FrameSocket:
        link = self._links.get(loc)
        if link is None:
            via_relay = (
                self._relay is not None and self._local_range is not None and loc.port not in self._local_range
            )
            if via_relay:
                preamble = encode_frame(LocationFrame("", loc.host, loc.port))
                link = FrameSocket(
                    address=self._relay,
                    preamble=preamble,
                    on_frame=self._on_frame,
                    on_error=self._on_failure,
                    name=f"{self.name}->{loc}(relay)",
                )
            else:
                link = FrameSocket(
                    address=loc, on_frame=self._on_frame, on_error=self._on_failure, name=f"{self.name}->{loc}"
                )
            self._links[loc] = link
        return link

    def close(self, timeout: float = 30.0) -> None:
        with self._lock:
            self._closed = True
            resolvers = list(self._resolvers)
        # frames held for an unresolved destination still have to go out
        for th in resolvers:
            th.join(timeout)
        with self._lock:
            links = list(self._links.values())
        for link in links:
            link.close(timeout)

    def abort(self, reason: str) -> None:
        with self._lock:
            if self._abort_reason is None:
                self._abort_reason = reason
            links = list(self._links.values())
            self._pending.clear()
        for link in links:
            link.abort()
