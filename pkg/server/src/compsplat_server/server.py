"""Threaded TCP guidance server.

Connection lifecycle: HELLO handshake first (version mismatch is answered
with HELLO_ERR and the connection closes), then any number of REQUEST
frames, one in flight at a time. Malformed bytes earn an ERROR frame and a
close; a plugin failure earns an ERROR frame and the connection survives.
"""

from __future__ import annotations

import logging
import socketserver
import time

from . import framing
from .framing import BadFrame, MsgType
from .plugins import PluginError, ProviderPlugin

log = logging.getLogger("compsplat_server")

ERR_BAD_FRAME = 1
ERR_PROTOCOL = 2
ERR_PLUGIN = 3


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock = self.request
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        try:
            if not self._handshake(sock, peer):
                return
            self._serve_requests(sock, peer)
        except (ConnectionError, OSError):
            log.info("%s: connection dropped", peer)

    def _send_error(self, sock, code: int, message: str) -> None:
        try:
            framing.send_frame(sock, MsgType.ERROR, framing.error_payload(code, message))
        except OSError:
            pass  # peer already gone; nothing to report to

    def _handshake(self, sock, peer: str) -> bool:
        try:
            kind, payload = framing.recv_frame(sock)
            if kind != MsgType.HELLO:
                raise BadFrame(f"expected HELLO, got {kind.name}")
            client_version = framing.parse_hello(payload)
        except BadFrame as exc:
            log.warning("%s: bad handshake: %s", peer, exc)
            self._send_error(sock, ERR_BAD_FRAME, str(exc))
            return False
        if client_version != framing.PROTOCOL_VERSION:
            log.warning(
                "%s: client version %d, server speaks %d",
                peer, client_version, framing.PROTOCOL_VERSION,
            )
            framing.send_frame(sock, MsgType.HELLO_ERR, framing.hello_reply())
            return False
        framing.send_frame(sock, MsgType.HELLO_OK, framing.hello_reply())
        log.info("%s: handshake ok", peer)
        return True

    def _serve_requests(self, sock, peer: str) -> None:
        plugin: ProviderPlugin = self.server.plugin
        while True:
            try:
                kind, payload = framing.recv_frame(sock)
            except BadFrame as exc:
                log.warning("%s: malformed frame: %s", peer, exc)
                self._send_error(sock, ERR_BAD_FRAME, str(exc))
                return
            except ConnectionError:
                return  # client finished
            if kind != MsgType.REQUEST:
                self._send_error(sock, ERR_PROTOCOL, f"unexpected {kind.name} frame")
                return
            try:
                request = framing.parse_request(payload)
            except BadFrame as exc:
                log.warning("%s: malformed request: %s", peer, exc)
                self._send_error(sock, ERR_BAD_FRAME, str(exc))
                return
            started = time.perf_counter()
            try:
                residual, weight, cfg_scale = plugin.respond(request)
            except PluginError as exc:
                log.warning("%s: plugin refused request: %s", peer, exc)
                self._send_error(sock, ERR_PLUGIN, str(exc))
                continue  # connection stays usable
            framing.send_frame(
                sock, MsgType.RESPONSE, framing.response_payload(weight, cfg_scale, residual)
            )
            log.info(
                "%s: prompt %d it %d answered in %.1f ms",
                peer, request.prompt_id, request.iteration,
                (time.perf_counter() - started) * 1e3,
            )


class GuidanceServer(socketserver.ThreadingTCPServer):
    """One worker thread per connection; port 0 binds an ephemeral port."""

    allow_reuse_address = True
    daemon_threads = True
    # clients reconnect after every protocol error, so bursts of short-lived
    # connections are normal; the socketserver default backlog of 5 drops them
    request_queue_size = 64

    def __init__(self, plugin: ProviderPlugin, host: str = "127.0.0.1", port: int = 0):
        self.plugin = plugin
        super().__init__((host, port), _Handler)

    @property
    def host(self) -> str:
        return self.server_address[0]

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(plugin: ProviderPlugin, host: str = "127.0.0.1", port: int = 0) -> None:
    """Run until interrupted."""
    with GuidanceServer(plugin, host, port) as server:
        log.info("listening on %s:%d (plugin %s)", server.host, server.port, plugin.name)
        server.serve_forever()
