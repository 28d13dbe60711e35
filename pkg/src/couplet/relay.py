"""Forwarding daemon joining local managers across network boundaries.

A relay owns a port range. Local managers whose destination lies outside
their own range connect to the relay and open the stream with a LOCATION
frame naming the final destination; every following frame is forwarded
there, either straight to a local address or to the peer relay owning that
port. Between relays the destination is carried by a LOCATION envelope
whenever it changes.

Scheduling prefers sending over receiving: each round flushes writable
buffers first and reads only while the aggregate of queued bytes is below
``buffer_limit``.
"""

from __future__ import annotations

import errno
import logging
import selectors
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .codec import HEADER_SIZE, Abort, FrameDecoder, Location as LocationFrame, Opcode, Register, RegisterAck, decode_body, encode_frame, parse_header
from .errors import CodecError, NoRoute
from .transport import Location, PortRange

log = logging.getLogger(__name__)

DEFAULT_BUFFER_LIMIT = 3 * 1024 * 1024
READ_CHUNK = 256 * 1024
RETRY_INTERVAL = 0.5


@dataclass(frozen=True)
class PeerSpec:
    name: str
    location: Location
    range: PortRange

    @classmethod
    def parse(cls, text: str) -> "PeerSpec":
        """``NAME=HOST:PORT,LO:HI``"""
        name, eq, rest = text.partition("=")
        addr, comma, rng = rest.partition(",")
        if not (eq and comma and name):
            raise ValueError(f"expected NAME=HOST:PORT,LO:HI, got {text!r}")
        return cls(name, Location.parse(addr), PortRange.parse(rng))


@dataclass
class RelayConfig:
    local_range: PortRange
    peers: list[PeerSpec] = field(default_factory=list)
    buffer_limit: int = DEFAULT_BUFFER_LIMIT
    name: str = "relay"
    listen: Location | None = None  # default: first port of local_range

    def check(self) -> None:
        if self.buffer_limit <= 0:
            raise ValueError("buffer_limit must be positive")
        for p in self.peers:
            if p.range.overlaps(self.local_range):
                raise ValueError(f"peer {p.name} range {p.range} overlaps local range {self.local_range}")
            if p.name == self.name:
                raise ValueError(f"peer {p.name} has this relay's own name")
        for i, p in enumerate(self.peers):
            for q in self.peers[i + 1 :]:
                if p.range.overlaps(q.range):
                    raise ValueError(f"peer ranges {p.name} and {q.name} overlap")


class _Outbox:
    """Queued bytes for one destination."""

    def __init__(self, key):
        self.key = key
        self.chunks: deque[memoryview] = deque()
        self.pending = 0
        self.last_dest: Location | None = None  # peer links: envelope state


class _Conn:
    def __init__(self, sock: socket.socket, role: str, outbox: _Outbox, connecting: bool = False):
        self.sock = sock
        self.role = role  # "unknown", "sender", "peer", "local"
        self.outbox = outbox
        self.decoder = FrameDecoder()
        self.dest: Location | None = None
        self.peer: str | None = None
        self.connecting = connecting
        self.backlogged = False  # holds a whole frame we could not yet enqueue
        self.closed = False


class Relay:
    def __init__(self, config: RelayConfig):
        config.check()
        self.config = config
        self.name = config.name
        self.limit = config.buffer_limit
        self._sel = selectors.DefaultSelector()
        listen = config.listen or Location("127.0.0.1", config.local_range.lo)
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(tuple(listen))
        self._server.listen(128)
        self._server.setblocking(False)
        self.address = Location(listen.host, self._server.getsockname()[1])
        self._conns: list[_Conn] = []
        self._peer_box: dict[str, _Outbox] = {p.name: _Outbox(p.name) for p in config.peers}
        self._peer_conn: dict[str, _Conn] = {}
        self._peer_retry: dict[str, float] = {}
        self._local_conn: dict[Location, _Conn] = {}
        self.aggregate = 0
        self.max_aggregate = 0
        self.max_frame = 0
        self.frames_forwarded = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- routing ------------------------------------------------------------

    def route(self, dst: Location) -> tuple[str, str | None]:
        """``("local", None)`` or ``("peer", name)`` for a destination location."""
        port = dst.port
        if port in self.config.local_range:
            return "local", None
        for p in self.config.peers:
            if port in p.range:
                return "peer", p.name
        raise NoRoute(f"{self.name}: no route to port {port}")

    def add_peer(self, peer: PeerSpec) -> None:
        """Add a peer before :meth:`start`."""
        self.config.peers.append(peer)
        self.config.check()
        self._peer_box[peer.name] = _Outbox(peer.name)

    def per_destination(self) -> dict:
        boxes = [c.outbox for c in self._conns] + [b for n, b in self._peer_box.items() if n not in self._peer_conn]
        return {b.key: b.pending for b in boxes if b.pending}

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "Relay":
        self._sel.register(self._server, selectors.EVENT_READ, None)
        self._thread = threading.Thread(target=self._loop, name=f"relay-{self.name}", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                self.pump(0.05)
            except Exception:
                log.exception("%s: scheduling round failed", self.name)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(5)
        for c in self._conns:
            c.closed = True
            c.sock.close()
        self._conns.clear()
        try:
            self._sel.unregister(self._server)
        except (KeyError, ValueError):
            pass
        self._server.close()
        self._sel.close()

    # -- one scheduling round -----------------------------------------------

    def pump(self, timeout: float = 0.0) -> None:
        self._connect_peers()
        for c in list(self._conns):
            if c.outbox.pending and not c.connecting:
                self._flush(c)
        for c in list(self._conns):
            if c.backlogged:
                self._extract(c)
        accepting = self.aggregate < self.limit
        for c in list(self._conns):
            if c.closed:
                continue
            events = 0
            if c.connecting or c.outbox.pending:
                events |= selectors.EVENT_WRITE
            if accepting and not c.backlogged and not c.connecting:
                events |= selectors.EVENT_READ
            self._interest(c, events)
        self._interest_server(accepting)
        for key, mask in self._sel.select(timeout):
            c = key.data
            if c is None:
                self._accept()
                continue
            if c.closed:
                continue
            if mask & selectors.EVENT_WRITE:
                if c.connecting:
                    self._finish_connect(c)
                elif c.outbox.pending:
                    self._flush(c)
            if mask & selectors.EVENT_READ and not c.closed and self.aggregate < self.limit:
                self._read(c)

    def _interest(self, c: _Conn, events: int) -> None:
        try:
            key = self._sel.get_key(c.sock)
        except KeyError:
            if events:
                self._sel.register(c.sock, events, c)
            return
        if not events:
            self._sel.unregister(c.sock)
        elif key.events != events:
            self._sel.modify(c.sock, events, c)

    def _interest_server(self, accepting: bool) -> None:
        registered = True
        try:
            self._sel.get_key(self._server)
        except KeyError:
            registered = False
        if accepting and not registered:
            self._sel.register(self._server, selectors.EVENT_READ, None)
        elif not accepting and registered:
            self._sel.unregister(self._server)

    # -- sockets ------------------------------------------------------------

    def _accept(self) -> None:
        try:
            sock, _ = self._server.accept()
        except OSError:
            return
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        c = _Conn(sock, "unknown", _Outbox(f"conn-{id(sock)}"))
        self._conns.append(c)

    def _open(self, loc: Location, role: str, outbox: _Outbox) -> _Conn:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        rc = sock.connect_ex(tuple(loc))
        c = _Conn(sock, role, outbox, connecting=rc in (errno.EINPROGRESS, errno.EWOULDBLOCK, errno.EALREADY))
        self._conns.append(c)
        if rc not in (0, errno.EINPROGRESS, errno.EWOULDBLOCK, errno.EALREADY):
            self._drop(c, reason=f"cannot connect to {loc}: {errno.errorcode.get(rc, rc)}")
        return c

    def _finish_connect(self, c: _Conn) -> None:
        err = c.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
        if err:
            self._drop(c, reason=f"connect failed: {errno.errorcode.get(err, err)}")
            return
        c.connecting = False
        self._flush(c)

    def _connect_peers(self) -> None:
        now = time.monotonic()
        for p in self.config.peers:
            if p.name in self._peer_conn or self.name > p.name:
                continue
            if now < self._peer_retry.get(p.name, 0.0):
                continue
            self._peer_retry[p.name] = now + RETRY_INTERVAL
            box = self._peer_box[p.name]
            # the handshake has to precede anything already queued
            box.chunks.appendleft(memoryview(encode_frame(Register(self.name, "", 0))))
            self._account(box, len(box.chunks[0]))
            c = self._open(p.location, "peer", box)
            if not c.closed:
                c.peer = p.name
                self._peer_conn[p.name] = c

    def _flush(self, c: _Conn) -> None:
        box = c.outbox
        while box.chunks:
            chunk = box.chunks[0]
            try:
                n = c.sock.send(chunk)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as exc:
                self._drop(c, reason=f"write failed: {exc}")
                return
            self._account(box, -n)
            if n == len(chunk):
                box.chunks.popleft()
            else:
                box.chunks[0] = chunk[n:]
                return

    def _read(self, c: _Conn) -> None:
        try:
            data = c.sock.recv(READ_CHUNK)
        except (BlockingIOError, InterruptedError):
            return
        except OSError as exc:
            self._drop(c, reason=f"read failed: {exc}")
            return
        if not data:
            self._drop(c, reason="connection closed", graceful=True)
            return
        c.decoder.feed(data)
        self._extract(c)

    def _extract(self, c: _Conn) -> None:
        c.backlogged = False
        while not c.closed:
            if self.aggregate >= self.limit:
                c.backlogged = self._has_frame(c)
                return
            try:
                item = c.decoder.next_raw()
            except CodecError as exc:
                self._drop(c, reason=f"bad frame: {exc}")
                return
            if item is None:
                return
            self._on_frame(c, *item)

    @staticmethod
    def _has_frame(c: _Conn) -> bool:
        buf = c.decoder._buf
        try:
            head = parse_header(buf)
        except CodecError:
            return True
        return head is not None and len(buf) >= HEADER_SIZE + head[1]

    # -- forwarding ---------------------------------------------------------

    def _on_frame(self, c: _Conn, opcode: int, raw: bytes) -> None:
        self.max_frame = max(self.max_frame, len(raw))
        if c.role == "local":
            return  # destinations never talk back
        if opcode == Opcode.LOCATION:
            f = decode_body(opcode, raw[HEADER_SIZE:])
            c.dest = Location(f.host, f.port)
            if c.role == "unknown":
                c.role = "sender"
            return
        if c.role == "unknown":
            if opcode != Opcode.REGISTER:
                self._drop(c, reason="first frame is neither LOCATION nor REGISTER")
                return
            f = decode_body(opcode, raw[HEADER_SIZE:])
            if f.name not in self._peer_box:
                self._drop(c, reason=f"unknown peer relay {f.name!r}")
                return
            old = self._peer_conn.get(f.name)
            if old is not None and old is not c:
                self._drop(old, reason="replaced by new connection", notify=False)
            c.role, c.peer = "peer", f.name
            c.outbox = self._peer_box[f.name]
            c.outbox.last_dest = None
            self._peer_conn[f.name] = c
            self._push(c.outbox, encode_frame(RegisterAck(True)))
            return
        if c.role == "peer" and opcode in (Opcode.REGISTER_ACK,):
            return
        if c.dest is None:
            self._drop(c, reason="data before any destination")
            return
        try:
            kind, peer = self.route(c.dest)
        except NoRoute as exc:
            self._send_back(c, str(exc))
            return
        if kind == "local":
            self._push(self._local_box(c.dest), raw)
        else:
            box = self._peer_box[peer]
            if box.last_dest != c.dest:
                envelope = encode_frame(LocationFrame("", c.dest.host, c.dest.port))
                self._push(box, envelope)
                box.last_dest = c.dest
                # an envelope and its frame enter the buffers in one step
                self.max_frame = max(self.max_frame, len(envelope) + len(raw))
            self._push(box, raw)
        self.frames_forwarded += 1

    def _local_box(self, loc: Location) -> _Outbox:
        c = self._local_conn.get(loc)
        if c is None or c.closed:
            c = self._open(loc, "local", _Outbox(loc))
            self._local_conn[loc] = c
        return c.outbox

    def _push(self, box: _Outbox, data: bytes) -> None:
        box.chunks.append(memoryview(data))
        self._account(box, len(data))

    def _account(self, box: _Outbox, delta: int) -> None:
        box.pending += delta
        self.aggregate += delta
        if self.aggregate > self.max_aggregate:
            self.max_aggregate = self.aggregate

    def _send_back(self, c: _Conn, reason: str) -> None:
        if c.role == "sender" and not c.closed:
            self._push(c.outbox, encode_frame(Abort(reason)))

    def _drop(self, c: _Conn, reason: str = "", notify: bool = True, graceful: bool = False) -> None:
        if c.closed:
            return
        c.closed = True
        if not graceful:
            log.warning("%s: dropping %s link: %s", self.name, c.role, reason)
        try:
            self._sel.unregister(c.sock)
        except (KeyError, ValueError):
            pass
        if c.role == "peer" and self._peer_conn.get(c.peer) is c:
            del self._peer_conn[c.peer]
            c.outbox.last_dest = None
        if c.role == "sender" and graceful and c.outbox.pending:
            self._flush_blocking(c)
        try:
            c.sock.close()
        except OSError:
            pass
        if c in self._conns:
            self._conns.remove(c)
        lost = c.outbox.pending
        if lost and not (c.role == "peer" and graceful):
            c.outbox.chunks.clear()
            self._account(c.outbox, -lost)
        if notify and not graceful and c.role in ("peer", "local"):
            self._abort_senders(c, reason)

    def _flush_blocking(self, c: _Conn) -> None:
        c.sock.setblocking(True)
        try:
            while c.outbox.chunks:
                c.sock.sendall(c.outbox.chunks.popleft())
        except OSError:
            pass

    def _abort_senders(self, failed: _Conn, reason: str) -> None:
        for s in list(self._conns):
            if s.role != "sender" or s.dest is None:
                continue
            try:
                kind, peer = self.route(s.dest)
            except NoRoute:
                continue
            hit = (kind == "peer" and failed.role == "peer" and peer == failed.peer) or (
                kind == "local" and failed.role == "local" and self._local_conn.get(s.dest) is failed
            )
            if hit:
                self._send_back(s, f"{self.name}: link failed: {reason}")


def run_relay(config: RelayConfig) -> None:
    """Run a relay in the foreground until interrupted."""
    relay = Relay(config).start()
    try:
        # announced inside the try so an interrupt right after it still stops cleanly
        log.info("relay %s listening on %s, range %s", relay.name, relay.address, config.local_range)
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        relay.stop()
