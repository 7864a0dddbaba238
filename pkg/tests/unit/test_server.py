"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

import asyncio

import pytest

from onlinest_core.decoders import DecoderRegistry, ScriptedDecoder
from onlinest_core.policy import StreamSession, ingest_chunk
from onlinest_core.protocol import (
    InputKind,
    decode,
    encode,
    encode_payload,
)
from onlinest_core.server import (
    DecoderServer,
    Limits,
    StreamServer,
    commit_envelope,
    payload_size,
    serve,
    summary_envelope,
)


def test_commit_envelope() -> None:
    assert commit_envelope("s", ("a",), 3) == {
        "type": "commit",
        "session": "s",
        "tokens": ["a"],
        "chunk": 3,
        "final": False,
    }
    assert commit_envelope("s", [], 0, True, "boom")["error"] == "boom"


def test_payload_size() -> None:
    assert payload_size(b"\x00" * 10) == 10
    assert payload_size(("naïve", "ok")) == 8


def test_summary_envelope(nature_decoder, nature_chunks) -> None:
    session = StreamSession()
    assert summary_envelope("s", session)["latency_s"] is None
    for chunk in nature_chunks:
        ingest_chunk(session, chunk, nature_decoder)
    summary = summary_envelope("s", session)
    assert summary["tokens"] == 3
    assert summary["chunks"] == 4
    assert summary["latency_s"] == pytest.approx(1.5)


def test_stream_server_needs_a_backend() -> None:
    with pytest.raises(ValueError):
        StreamServer(DecoderRegistry())


@pytest.fixture
def registry(nature_transcript) -> DecoderRegistry:
    registry = DecoderRegistry()
    registry.register(
        "scripted",
        lambda key: ScriptedDecoder(nature_transcript, InputKind.tokens),
    )
    return registry


@pytest.mark.asyncio
async def test_stream_session_over_asyncio(registry, nature_chunks) -> None:
    server = await serve("127.0.0.1:0", registry, Limits(workers=2))
    reader, writer = await asyncio.open_connection(*server.address)
    try:
        writer.write(encode({"type": "open", "session": "t"}))
        for chunk in nature_chunks:
            writer.write(
                encode(
                    {
                        "type": "chunk",
                        "session": "t",
                        "index": chunk.index,
                        "payload": encode_payload(chunk.payload),
                    }
                )
            )
            await writer.drain()
            envelope = decode(await reader.readline())
            assert envelope["chunk"] == chunk.index

        writer.write(encode({"type": "close", "session": "t"}))
        await writer.drain()
        final = decode(await reader.readline())
        summary = decode(await reader.readline())
    finally:
        writer.close()
        await server.close()

    assert final["tokens"] == ["us"] and final["final"]
    assert summary["latency_s"] == pytest.approx(1.625)
    assert server.status()["served"] == 1


@pytest.mark.asyncio
async def test_decoder_server_respond(nature_transcript) -> None:
    server = DecoderServer(
        lambda key: ScriptedDecoder(nature_transcript, InputKind.tokens),
        workers=1,
    )
    decoder, hello = await server.hello({"id": 0, "hello": {"key": "k"}})
    assert hello == {
        "id": 0,
        "capabilities": {"kind": "tokens", "deterministic": True},
    }

    response = await server.respond(
        decoder,
        {
            "id": 1,
            "committed": ["Nature"],
            "input": {"kind": "tokens", "payload": [["la"], ["nos"]]},
        },
    )
    assert response == {"id": 1, "hypothesis": ["Nature", "can", "not"]}

    mismatch = await server.respond(
        decoder, {"id": 2, "input": {"kind": "frames", "payload": []}}
    )
    assert "accepts tokens" in mismatch["error"]
    missing = await server.respond(decoder, {"id": 3})
    assert missing["id"] == 3 and "error" in missing
    await server.close()

