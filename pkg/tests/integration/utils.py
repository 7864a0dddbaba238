"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

import asyncio
import socket
import threading
import time
from typing import Any, Coroutine, Sequence, TypeVar

from onlinest_core.decoders import IncrementalDecoder, ScriptedDecoder
from onlinest_core.policy import Chunk
from onlinest_core.protocol import LineSocket, Message
from onlinest_core.tokens import TokenSequence

T = TypeVar("T")


class LoopThread:
    """An event loop running in a daemon thread, for hosting servers."""

    def __init__(self) -> None:
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(
            target=self.loop.run_forever, daemon=True
        )

    def start(self) -> None:
        self.thread.start()

    def call(self, coro: Coroutine[Any, Any, T], timeout: float = 10) -> T:
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(
            timeout
        )

    def stop(self) -> None:
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(timeout=10)
        self.loop.close()


def free_address() -> str:
    """An address nothing listens on."""
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return f"127.0.0.1:{sock.getsockname()[1]}"


def connect(address: tuple[str, int]) -> LineSocket:
    return LineSocket(f"{address[0]}:{address[1]}", timeout=10)


def receive_all(connection: LineSocket, n: int) -> list[Message]:
    return [connection.receive() for _ in range(n)]


class SlowDecoder(ScriptedDecoder):
    """Scripted decoder that takes its time."""

    delay_s = 0.3

    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        time.sleep(self.delay_s)
        return super().decode(chunks, committed, final)


class PrefixIgnoringDecoder(IncrementalDecoder):
    """Agrees on "Nurture" for two chunks, then changes its mind."""

    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        return TokenSequence(("Nurture",) if len(chunks) < 3 else ("Culture",))
