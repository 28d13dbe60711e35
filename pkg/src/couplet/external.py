"""Client for instances that run in their own process.

An external instance connects to the controller address a Local Manager
hands out (``COUPLET_MANAGER``), registers under its instance name
(``COUPLET_INSTANCE``) and then exchanges DATA frames. The manager routes
outgoing DATA by source port, so the destination endpoint may be left empty.
A DEREGISTER frame from the manager names an in-port whose producers are all
done. FIN ends the session.

Only the frame codec and plain sockets are used here, so the same exchange
can be written in any language.
"""

from __future__ import annotations

import os
import socket
from collections import deque

from .codec import Abort, Data, Deregister, Fin, Payload, Register, RegisterAck, encode_frame
from .errors import Aborted, BadHandshake, QueueClosed
from .runtime import ENV_INSTANCE, ENV_MANAGER
from .topology import Endpoint
from .transport import Location, read_frame


class ExternalInstance:
    def __init__(self, name: str | None = None, manager: str | Location | None = None):
        self.name = name or os.environ[ENV_INSTANCE]
        addr = manager or os.environ[ENV_MANAGER]
        self.manager = addr if isinstance(addr, Location) else Location.parse(addr)
        self._sock: socket.socket | None = None
        self._inbox: dict[str, deque] = {}
        self._closed_ports: set[str] = set()

    def connect(self) -> "ExternalInstance":
        self._sock = socket.create_connection(tuple(self.manager))
        self._sock.sendall(encode_frame(Register(self.name, "", 0)))
        reply = read_frame(self._sock)
        if isinstance(reply, Abort):
            raise Aborted(reply.reason)
        if not (isinstance(reply, RegisterAck) and reply.ok):
            raise BadHandshake(f"registration of {self.name!r} refused: {reply!r}")
        return self

    def __enter__(self) -> "ExternalInstance":
        return self.connect()

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.finish()
        elif self._sock is not None:
            self._sock.close()

    def send(self, port: str, payload, t: float) -> None:
        frame = Data(Endpoint(self.name, port), Endpoint("", ""), float(t), Payload.of(payload))
        self._sock.sendall(encode_frame(frame))

    def _pump(self) -> None:
        f = read_frame(self._sock)
        if f is None:
            raise Aborted("manager closed the connection")
        if isinstance(f, Data):
            self._inbox.setdefault(f.dst.port, deque()).append((f.payload, f.timestamp))
        elif isinstance(f, Deregister):
            self._closed_ports.add(f.name)
        elif isinstance(f, Abort):
            raise Aborted(f.reason)

    def receive(self, port: str) -> tuple[Payload, float]:
        """Next message on ``port``; QueueClosed once it is drained and closed."""
        while True:
            box = self._inbox.get(port)
            if box:
                return box.popleft()
            if port in self._closed_ports:
                raise QueueClosed(port)
            self._pump()

    def finish(self) -> None:
        """Tell the manager this instance is done and wait for its FIN."""
        self._sock.sendall(encode_frame(Fin()))
        while True:
            f = read_frame(self._sock)
            if f is None or isinstance(f, Fin):
                break
            if isinstance(f, Abort):
                self._sock.close()
                raise Aborted(f.reason)
        self._sock.close()
