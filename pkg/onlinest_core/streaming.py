"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

import asyncio
from pathlib import Path
from typing import Any, Awaitable, List, Optional, Union

import typer
import uvicorn
from typer import Typer
from typing_extensions import Annotated

from .api import EXIT_PARTIAL, API
from .app import app
from .config.models import BackendConfig
from .decoders import (
    DecoderRegistry,
    backend_factory,
    load_backend_config,
    parse_backend,
)
from .errors import OnlineSTError
from .harness import split_frames
from .protocol import Message, parse_address
from .server import DecoderServer, Limits, replay_session
from .server import serve as serve_streams


def build_registry(
    specs: List[str], config: Optional[BackendConfig]
) -> DecoderRegistry:
    """Register one factory per backend spec, the first being the default.

    Raises:
        ValueError: A spec is incomplete.
    """
    registry = DecoderRegistry()
    for spec in specs:
        backend = parse_backend(spec, config)
        registry.register(
            backend.name,
            backend_factory(
                backend,
                app.settings.decoder.timeout_s,
                app.settings.decoder.retries,
                app.settings.policy.tokenizer_tag,
            ),
        )
    return registry


def format_envelope(envelope: Message) -> str:
    """Human-readable line for a stream envelope."""
    kind = envelope.get("type")
    if kind == "commit":
        line = f"{envelope['chunk']}\t{' '.join(envelope['tokens'])}"
        if envelope.get("final"):
            line += "\t[final]"
        if "error" in envelope:
            line += f"\t[{envelope['error']}]"
        return line
    if kind == "summary":
        latency = envelope.get("latency_s")
        shown = "undefined" if latency is None else f"{latency:.2f}s"
        return (
            f"latency {shown} over {envelope['tokens']} tokens "
            f"in {envelope['chunks']} chunks"
        )
    return f"{kind}: {envelope.get('error')}"


class StreamAPI(API):
    """Streaming module."""

    prefix = "/stream"
    commands = Typer(help="Serve and replay streaming sessions.")

    @staticmethod
    async def run_services(
        bind: str, registry: DecoderRegistry, limits: Limits
    ) -> None:
        """Run the stream server and, if configured, the status listener."""
        server = await serve_streams(
            bind, registry, limits, app.settings.policy
        )
        app.stream_server = server
        assert server.server is not None

        services: list[Awaitable[Any]] = [server.server.serve_forever()]
        http = app.settings.server.http
        if http is not None:
            status = uvicorn.Server(
                uvicorn.Config(
                    app.router,
                    host=http.host,
                    port=http.port,
                    log_level="info",
                )
            )
            services.append(status.serve())
        try:
            await asyncio.gather(*services)
        finally:
            await server.close()
            app.stream_server = None

    @staticmethod
    @commands.command(help="Start the stream server.")
    def serve(
        backend: Annotated[
            List[str],
            typer.Option(
                "--backend",
                help="scripted, toy, cascade or remote:<host:port>; "
                "repeat to offer several, the first is the default.",
            ),
        ],
        bind: Annotated[
            Optional[str],
            typer.Option("--bind", help="host:port to listen on."),
        ] = None,
        backend_config: Annotated[
            Optional[Path],
            typer.Option(
                "--backend-config",
                help="YAML file with transcripts, toy or stage settings.",
            ),
        ] = None,
        max_sessions: Annotated[
            Optional[int],
            typer.Option("--max-sessions", help="Open sessions allowed."),
        ] = None,
        max_chunk_bytes: Annotated[
            Optional[int],
            typer.Option("--max-chunk-bytes", help="Largest chunk payload."),
        ] = None,
    ) -> None:
        """Serve streaming sessions until interrupted."""
        settings = app.settings.server
        try:
            config = (
                load_backend_config(backend_config)
                if backend_config is not None
                else None
            )
            registry = build_registry(backend, config)
            address = bind or f"{settings.host}:{settings.port}"
            parse_address(address)
        except (OnlineSTError, ValueError, OSError) as e:
            raise API.fail(str(e))

        limits = Limits(
            max_sessions=max_sessions or settings.max_sessions,
            max_chunk_bytes=max_chunk_bytes or settings.max_chunk_bytes,
            workers=settings.workers,
        )
        try:
            asyncio.run(StreamAPI.run_services(address, registry, limits))
        except KeyboardInterrupt:
            pass
        except OSError as e:
            raise API.fail(str(e))

    @staticmethod
    @commands.command(help="Replay a stored utterance against a server.")
    def replay(
        connect: Annotated[
            str, typer.Option("--connect", help="Server host:port.")
        ],
        frames: Annotated[
            Optional[Path],
            typer.Option(
                "--frames", "--wav-frames", help="Raw frame file to stream."
            ),
        ] = None,
        tokens: Annotated[
            Optional[Path],
            typer.Option(
                "--tokens", help="Text file, one chunk of tokens per line."
            ),
        ] = None,
        chunk: Annotated[
            Optional[float],
            typer.Option("--chunk", help="Chunk duration in seconds."),
        ] = None,
        frame_rate: Annotated[
            float, typer.Option("--frame-rate", help="Frames per second.")
        ] = 100.0,
        frame_bytes: Annotated[
            int, typer.Option("--frame-bytes", help="Bytes per frame.")
        ] = 2,
        session: Annotated[
            str, typer.Option("--session", help="Session id.")
        ] = "replay",
        backend: Annotated[
            Optional[str],
            typer.Option("--backend", help="Backend offered by the server."),
        ] = None,
        depth: Annotated[
            Optional[int],
            typer.Option("--depth", help="Agreement depth."),
        ] = None,
    ) -> None:
        """Print each commit as `chunk<TAB>tokens`, then the summary."""
        if (frames is None) == (tokens is None):
            raise API.fail("give exactly one of --frames or --tokens")

        duration = chunk or app.settings.policy.chunk_duration_s
        payloads: list[Union[bytes, tuple[str, ...]]]
        try:
            if frames is not None:
                payloads = list(
                    split_frames(
                        frames.read_bytes(), duration, frame_rate, frame_bytes
                    )
                )
            else:
                assert tokens is not None
                lines = tokens.read_text(encoding="utf-8").splitlines()
                payloads = [tuple(line.split()) for line in lines]
            envelopes = replay_session(
                connect,
                payloads,
                session_id=session,
                chunk_duration_s=duration,
                agreement_depth=depth,
                backend=backend,
                timeout_s=app.settings.decoder.timeout_s,
            )
        except (OnlineSTError, ValueError, OSError) as e:
            raise API.fail(str(e))

        failed = False
        for envelope in envelopes:
            failed = failed or envelope.get("type") in ("error", "rejected")
            failed = failed or "error" in envelope
            app.echo(format_envelope(envelope))
        if failed:
            raise typer.Exit(code=EXIT_PARTIAL)


class DecoderAPI(API):
    """Decoder module."""

    prefix = "/decoder"
    commands = Typer(help="Expose decoder backends over the network.")

    @staticmethod
    async def run_service(address: str, server: DecoderServer) -> None:
        """Serve until cancelled."""
        listener = await server.start(*parse_address(address))
        try:
            await listener.serve_forever()
        finally:
            await server.close()

    @staticmethod
    @commands.command(help="Serve a backend over the decoder protocol.")
    def serve(
        bind: Annotated[
            str, typer.Option("--bind", help="host:port to listen on.")
        ],
        backend: Annotated[
            str, typer.Option("--backend", help="scripted, toy or cascade.")
        ],
        backend_config: Annotated[
            Optional[Path],
            typer.Option(
                "--config",
                help="YAML file with transcripts, toy or stage settings.",
            ),
        ] = None,
    ) -> None:
        """Serve decode requests until interrupted."""
        try:
            config = (
                load_backend_config(backend_config)
                if backend_config is not None
                else None
            )
            factory = backend_factory(
                parse_backend(backend, config),
                app.settings.decoder.timeout_s,
                app.settings.decoder.retries,
                app.settings.policy.tokenizer_tag,
            )
            parse_address(bind)
        except (OnlineSTError, ValueError, OSError) as e:
            raise API.fail(str(e))

        server = DecoderServer(factory, app.settings.server.workers)
        try:
            asyncio.run(DecoderAPI.run_service(bind, server))
        except KeyboardInterrupt:
            pass
        except OSError as e:
            raise API.fail(str(e))
