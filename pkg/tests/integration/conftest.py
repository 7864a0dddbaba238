"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from pathlib import Path

import pytest

from onlinest_core.config.models import BackendConfig
from onlinest_core.decoders import (
    DecoderRegistry,
    backend_factory,
    load_backend_config,
)
from onlinest_core.protocol import InputKind
from onlinest_core.server import DecoderServer, Limits, StreamServer
from tests.integration.utils import (
    LoopThread,
    PrefixIgnoringDecoder,
    SlowDecoder,
)


@pytest.fixture(scope="module")
def loop_thread():
    thread = LoopThread()
    thread.start()
    yield thread
    thread.stop()


@pytest.fixture
def scripted_config(files: Path) -> BackendConfig:
    return load_backend_config(files / "backend_nature.yml")


@pytest.fixture
def decoder_server(loop_thread, scripted_config):
    server = DecoderServer(backend_factory(scripted_config), workers=4)
    loop_thread.call(server.start("127.0.0.1", 0))
    yield server
    loop_thread.call(server.close())


@pytest.fixture
def decoder_address(decoder_server) -> str:
    host, port = decoder_server.address
    return f"{host}:{port}"


@pytest.fixture
def stream_server(loop_thread, scripted_config, decoder_address):
    scripted = backend_factory(scripted_config)
    transcript = scripted("*").transcript  # type: ignore[attr-defined]

    registry = DecoderRegistry()
    registry.register("scripted", scripted)
    registry.register(
        "remote",
        backend_factory(
            BackendConfig(name="remote", endpoint=decoder_address),
            timeout_s=10,
            retries=1,
        ),
    )
    registry.register(
        "slow", lambda key: SlowDecoder(transcript, InputKind.tokens)
    )
    registry.register("broken", lambda key: PrefixIgnoringDecoder())

    server = StreamServer(
        registry,
        limits=Limits(max_sessions=2, max_chunk_bytes=64, workers=4),
    )
    loop_thread.call(server.start("127.0.0.1", 0))
    yield server
    loop_thread.call(server.close())
