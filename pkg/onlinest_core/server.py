"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Network services.

`StreamServer` hosts streaming sessions: clients send `open`, `chunk` and
`close` envelopes and get back one commit envelope per chunk, a final
commit on close and a latency summary. `DecoderServer` exposes an
in-process backend over the decoder wire protocol.
"""

import asyncio
import contextlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Optional, Sequence, TypeVar, Union

from .config.models import PolicyConfig
from .decoders import DecoderFactory, DecoderRegistry, IncrementalDecoder
from .errors import (
    EmptySessionError,
    UndefinedLatencyError,
    describe,
)
from .metrics import LatencyLog, latency_seconds
from .policy import Chunk, StreamSession, finish_stream, ingest_chunk
from .protocol import (
    LINE_LIMIT,
    InputKind,
    LineSocket,
    MalformedMessage,
    Message,
    decode_payload,
    encode_payload,
    parse_address,
    payload_segments,
    read_message,
    write_message,
)
from .tokens import TokenSequence

LOG = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class Limits:
    """Resource limits of a stream server."""

    max_sessions: int = 64
    max_chunk_bytes: int = 1 << 20
    workers: int = 8


@dataclass
class ServedSession:
    """A stream session and the decoder dedicated to it."""

    id: str
    session: StreamSession
    decoder: IncrementalDecoder
    busy: bool = False
    task: Optional["asyncio.Task[None]"] = None


@dataclass
class Connection:
    """One client connection and the sessions it hosts."""

    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    sessions: dict[str, ServedSession] = field(default_factory=dict)
    closed: set[str] = field(default_factory=set)
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)

    async def send(self, message: Message) -> None:
        """Write one envelope; writes from session tasks never interleave."""
        async with self.lock:
            await write_message(self.writer, message)


def commit_envelope(
    session: str,
    tokens: Sequence[str],
    chunk: int,
    final: bool = False,
    error: Optional[str] = None,
) -> Message:
    """Build a commit envelope."""
    envelope: Message = {
        "type": "commit",
        "session": session,
        "tokens": list(tokens),
        "chunk": chunk,
        "final": final,
    }
    if error is not None:
        envelope["error"] = error
    return envelope


def payload_size(payload: Union[bytes, tuple[str, ...]]) -> int:
    """Size of a chunk payload in bytes."""
    if isinstance(payload, bytes):
        return len(payload)
    return sum(len(token.encode("utf-8")) for token in payload)


class StreamServer:
    """Session-oriented streaming service.

    Connections are served concurrently. Within a session envelopes are
    handled strictly in order and only one chunk may be outstanding.
    """

    def __init__(
        self,
        registry: DecoderRegistry,
        policy: PolicyConfig = PolicyConfig(),
        limits: Limits = Limits(),
    ) -> None:
        """Constructor.

        Raises:
            ValueError: No backend is registered.
        """
        if not len(registry):
            raise ValueError("at least one backend must be registered")
        self.registry = registry
        self.policy = policy
        self.limits = limits
        self.executor = ThreadPoolExecutor(max_workers=limits.workers)
        self.server: Optional[asyncio.AbstractServer] = None
        self.active = 0
        self.served = 0
        self.rejected = 0

    def status(self) -> dict[str, int]:
        """Session counters."""
        return {
            "active": self.active,
            "served": self.served,
            "rejected": self.rejected,
        }

    async def start(self, host: str, port: int) -> asyncio.AbstractServer:
        """Start listening on host:port (port 0 picks a free port)."""
        self.server = await asyncio.start_server(
            self.handle, host, port, limit=LINE_LIMIT
        )
        LOG.info("stream server listening on %s:%d", *self.address)
        return self.server

    @property
    def address(self) -> tuple[str, int]:
        """Bound host and port."""
        assert self.server is not None
        sockets = self.server.sockets or ()
        host, port = sockets[0].getsockname()[:2]
        return host, port

    async def close(self) -> None:
        """Stop listening and release the worker threads."""
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        self.executor.shutdown(wait=False)

    async def run(self, fn: Callable[..., T], *args: Any) -> T:
        """Run a blocking backend call on the worker pool."""
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(self.executor, partial(fn, *args))

    async def handle(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        """Serve one connection until the client hangs up."""
        conn = Connection(reader, writer)
        try:
            while True:
                try:
                    message = await read_message(reader)
                except MalformedMessage as e:
                    await conn.send(
                        {"type": "error", "session": None, "error": str(e)}
                    )
                    continue
                except (ConnectionError, ValueError) as e:
                    LOG.warning("dropping connection: %s", e)
                    break
                if message is None:
                    break
                await self.dispatch(conn, message)
        finally:
            await self.drop(conn)
            writer.close()
            with contextlib.suppress(ConnectionError):
                await writer.wait_closed()

    async def dispatch(self, conn: Connection, message: Message) -> None:
        """Route one client envelope."""
        session_id = message.get("session")
        if not isinstance(session_id, str) or not session_id:
            await conn.send(
                {
                    "type": "error",
                    "session": None,
                    "error": "envelope needs a session id",
                }
            )
            return

        kind = message.get("type")
        if kind == "open":
            await self.open(conn, session_id, message)
        elif kind == "chunk":
            await self.chunk(conn, session_id, message)
        elif kind == "close":
            await self.close_session(conn, session_id)
        else:
            await self.abort(
                conn, session_id, f"unknown envelope type: {kind!r}"
            )

    async def open(
        self, conn: Connection, session_id: str, message: Message
    ) -> None:
        """Start a session."""
        if session_id in conn.sessions or session_id in conn.closed:
            await conn.send(
                {
                    "type": "error",
                    "session": session_id,
                    "error": "session id already used on this connection",
                }
            )
            return
        if self.active >= self.limits.max_sessions:
            await self.reject(
                conn, session_id, f"{self.active} sessions already open"
            )
            return

        backend = message.get("backend")
        if backend is not None and backend not in self.registry:
            await self.reject(conn, session_id, f"no backend {backend!r}")
            return
        try:
            decoder = await self.run(self.registry.create, backend, session_id)
            session = StreamSession(
                agreement_depth=int(
                    message.get(
                        "agreement_depth", self.policy.agreement_depth
                    )
                ),
                chunk_duration_s=float(
                    message.get(
                        "chunk_duration_s", self.policy.chunk_duration_s
                    )
                ),
                tokenizer_tag=decoder.tokenizer_tag,
            )
        except Exception as e:
            await conn.send(
                {"type": "error", "session": session_id, "error": describe(e)}
            )
            return

        conn.sessions[session_id] = ServedSession(session_id, session, decoder)
        self.active += 1
        LOG.info("session %s opened", session_id)

    async def reject(
        self, conn: Connection, session_id: str, reason: str
    ) -> None:
        """Refuse a request that exceeds a limit."""
        self.rejected += 1
        LOG.warning("session %s rejected: %s", session_id, reason)
        await conn.send(
            {"type": "rejected", "session": session_id, "error": reason}
        )

    async def chunk(
        self, conn: Connection, session_id: str, message: Message
    ) -> None:
        """Accept a chunk and decode it in the background."""
        served = conn.sessions.get(session_id)
        if served is None:
            await conn.send(
                {
                    "type": "error",
                    "session": session_id,
                    "error": "no open session with that id",
                }
            )
            return
        if served.busy:
            await self.abort(
                conn,
                session_id,
                "chunk sent before the previous commit was answered",
            )
            return

        try:
            payload = decode_payload(
                message.get("payload"), served.decoder.kind
            )
            index = message.get("index")
            if not isinstance(index, int):
                raise MalformedMessage("chunk index must be an integer")
        except MalformedMessage as e:
            await self.abort(conn, session_id, str(e))
            return

        if payload_size(payload) > self.limits.max_chunk_bytes:
            await self.abort(
                conn,
                session_id,
                f"chunk exceeds {self.limits.max_chunk_bytes} bytes",
                envelope="rejected",
            )
            return

        try:
            chunk = Chunk(index, payload, served.session.chunk_duration_s)
        except Exception as e:
            await self.abort(conn, session_id, describe(e))
            return

        served.busy = True
        served.task = asyncio.create_task(self.ingest(conn, served, chunk))

    async def ingest(
        self, conn: Connection, served: ServedSession, chunk: Chunk
    ) -> None:
        """Decode one chunk and answer with its commit envelope."""
        try:
            event = await self.run(
                ingest_chunk, served.session, chunk, served.decoder
            )
        except Exception as e:
            if conn.sessions.get(served.id) is served:
                await self.abort(conn, served.id, describe(e))
            return

        served.busy = False
        if conn.sessions.get(served.id) is not served:
            return
        tokens = list(event.tokens) if event is not None else []
        await conn.send(commit_envelope(served.id, tokens, chunk.index))

    async def close_session(self, conn: Connection, session_id: str) -> None:
        """Flush a session: final commit envelope, then its summary."""
        if session_id in conn.closed:
            await conn.send(
                {
                    "type": "error",
                    "session": session_id,
                    "error": "session already closed",
                }
            )
            return
        served = conn.sessions.get(session_id)
        if served is None:
            await conn.send(
                {
                    "type": "error",
                    "session": session_id,
                    "error": "no open session with that id",
                }
            )
            return

        if served.task is not None:
            await served.task
            if conn.sessions.get(session_id) is not served:
                return

        session = served.session
        conn.closed.add(session_id)
        del conn.sessions[session_id]
        self.active -= 1
        self.served += 1
        try:
            event = await self.run(finish_stream, session, served.decoder)
        except EmptySessionError as e:
            await conn.send(
                commit_envelope(session_id, [], 0, True, describe(e))
            )
            return
        except Exception as e:
            await conn.send(
                commit_envelope(
                    session_id, [], session.chunks_arrived, True, describe(e)
                )
            )
            return
        finally:
            await self.run(served.decoder.close)

        tokens = list(event.tokens) if event is not None else []
        await conn.send(
            commit_envelope(session_id, tokens, session.chunks_arrived, True)
        )
        await conn.send(summary_envelope(session_id, session))
        LOG.info("session %s closed", session_id)

    async def abort(
        self,
        conn: Connection,
        session_id: str,
        error: str,
        envelope: str = "error",
    ) -> None:
        """End a session after a failure; other sessions carry on."""
        served = conn.sessions.pop(session_id, None)
        if served is not None:
            conn.closed.add(session_id)
            self.active -= 1
            self.release(served)
        if envelope == "rejected":
            self.rejected += 1
        LOG.warning("session %s aborted: %s", session_id, error)
        await conn.send(
            {"type": envelope, "session": session_id, "error": error}
        )

    def release(self, served: ServedSession) -> None:
        """Close a session's decoder once no chunk is in flight."""
        if served.task is not None and not served.task.done():
            served.task.add_done_callback(
                lambda _: self.executor.submit(served.decoder.close)
            )
        else:
            self.executor.submit(served.decoder.close)

    async def drop(self, conn: Connection) -> None:
        """Abandon the sessions of a connection that went away."""
        for served in list(conn.sessions.values()):
            if served.task is not None:
                with contextlib.suppress(Exception):
                    await served.task
            if conn.sessions.pop(served.id, None) is served:
                self.active -= 1
                self.release(served)


def summary_envelope(session_id: str, session: StreamSession) -> Message:
    """Latency summary of a finished session."""
    log = LatencyLog.from_commits(
        session.commit_log, session.chunk_duration_s, session.chunks_arrived
    )
    latency: Optional[float]
    try:
        latency = latency_seconds(log)
    except UndefinedLatencyError:
        latency = None
    return {
        "type": "summary",
        "session": session_id,
        "latency_s": latency,
        "tokens": len(session.committed),
        "chunks": session.chunks_arrived,
    }


async def serve(
    bind: str,
    registry: DecoderRegistry,
    limits: Limits = Limits(),
    policy: PolicyConfig = PolicyConfig(),
) -> StreamServer:
    """Start a stream server on bind ("host:port") and return it."""
    server = StreamServer(registry, policy, limits)
    await server.start(*parse_address(bind))
    return server


class DecoderServer:
    """Serves decoders made by a factory over the decoder wire protocol.

    Each connection gets its own decoder, created at the handshake with the
    key the client names.
    """

    def __init__(self, factory: DecoderFactory, workers: int = 8) -> None:
        """Constructor."""
        self.factory = factory
        self.executor = ThreadPoolExecutor(max_workers=workers)
        self.server: Optional[asyncio.AbstractServer] = None

    async def start(self, host: str, port: int) -> asyncio.AbstractServer:
        """Start listening on host:port (port 0 picks a free port)."""
        self.server = await asyncio.start_server(
            self.handle, host, port, limit=LINE_LIMIT
        )
        LOG.info("decoder server listening on %s:%d", *self.address)
        return self.server

    @property
    def address(self) -> tuple[str, int]:
        """Bound host and port."""
        assert self.server is not None
        sockets = self.server.sockets or ()
        host, port = sockets[0].getsockname()[:2]
        return host, port

    async def close(self) -> None:
        """Stop listening."""
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        self.executor.shutdown(wait=False)

    async def run(self, fn: Callable[..., T], *args: Any, **kwargs: Any) -> T:
        """Run a blocking backend call on the worker pool."""
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(
            self.executor, partial(fn, *args, **kwargs)
        )

    async def handle(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        """Serve one client connection."""
        decoder: Optional[IncrementalDecoder] = None
        try:
            while True:
                try:
                    message = await read_message(reader)
                except MalformedMessage as e:
                    await write_message(writer, {"id": None, "error": str(e)})
                    continue
                except (ConnectionError, ValueError):
                    break
                if message is None:
                    break

                if "hello" in message:
                    if decoder is not None:
                        await self.run(decoder.close)
                    decoder, response = await self.hello(message)
                else:
                    response = await self.respond(decoder, message)
                await write_message(writer, response)
        finally:
            if decoder is not None:
                await self.run(decoder.close)
            writer.close()
            with contextlib.suppress(ConnectionError):
                await writer.wait_closed()

    async def hello(
        self, message: Message
    ) -> tuple[Optional[IncrementalDecoder], Message]:
        """Create the connection's decoder and report its capabilities."""
        hello = message.get("hello")
        key = hello.get("key", "*") if isinstance(hello, dict) else "*"
        try:
            decoder = await self.run(self.factory, str(key))
        except Exception as e:
            return None, {"id": message.get("id"), "error": describe(e)}
        return decoder, {
            "id": message.get("id"),
            "capabilities": {
                "kind": decoder.kind.value,
                "deterministic": decoder.deterministic,
            },
        }

    async def respond(
        self, decoder: Optional[IncrementalDecoder], message: Message
    ) -> Message:
        """Answer one decode request."""
        request_id = message.get("id")
        if decoder is None:
            return {"id": request_id, "error": "handshake required"}
        try:
            request = message["input"]
            kind = InputKind(request.get("kind", decoder.kind.value))
            if kind is not decoder.kind:
                raise MalformedMessage(
                    f"backend accepts {decoder.kind.value}, not {kind.value}"
                )
            chunks = [
                Chunk(i, decode_payload(payload, kind))
                for i, payload in enumerate(
                    payload_segments(request["payload"], kind), start=1
                )
            ]
            committed = TokenSequence(
                tuple(message.get("committed", ())), decoder.tokenizer_tag
            )
            hypothesis = await self.run(
                decoder.decode,
                chunks,
                committed,
                final=bool(message.get("final", False)),
            )
        except Exception as e:
            LOG.warning("request %s failed: %s", request_id, e)
            return {"id": request_id, "error": describe(e)}
        return {"id": request_id, "hypothesis": list(hypothesis.tokens)}


def replay_session(
    address: str,
    payloads: Sequence[Union[bytes, tuple[str, ...]]],
    session_id: str = "replay",
    chunk_duration_s: Optional[float] = None,
    agreement_depth: Optional[int] = None,
    backend: Optional[str] = None,
    timeout_s: Optional[float] = 30.0,
) -> list[Message]:
    """Stream payloads to a stream server as one session.

    Each chunk waits for its commit envelope before the next is sent.

    Returns:
        list[Message]: Every envelope the server sent for the session.

    Raises:
        OSError: The server is unreachable.
    """
    connection = LineSocket(address, timeout_s)
    envelopes: list[Message] = []
    try:
        opening: Message = {"type": "open", "session": session_id}
        if chunk_duration_s is not None:
            opening["chunk_duration_s"] = chunk_duration_s
        if agreement_depth is not None:
            opening["agreement_depth"] = agreement_depth
        if backend is not None:
            opening["backend"] = backend
        connection.send(opening)

        for index, payload in enumerate(payloads, start=1):
            connection.send(
                {
                    "type": "chunk",
                    "session": session_id,
                    "index": index,
                    "payload": encode_payload(payload),
                }
            )
            envelope = connection.receive()
            envelopes.append(envelope)
            if envelope.get("type") != "commit":
                return envelopes

        connection.send({"type": "close", "session": session_id})
        final = connection.receive()
        envelopes.append(final)
        if final.get("type") == "commit" and "error" not in final:
            envelopes.append(connection.receive())
    finally:
        connection.close()
    return envelopes
