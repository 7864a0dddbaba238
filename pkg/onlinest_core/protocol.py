"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Newline-delimited JSON framing shared by the decoder wire protocol and the
stream session envelopes.
"""

import asyncio
import base64
import binascii
import json
import socket
from enum import Enum
from typing import Any, Optional, Union

Message = dict[str, Any]

# Requests carry every chunk seen so far, so lines can get long.
LINE_LIMIT = 2**24


class InputKind(Enum):
    """What a decoder consumes."""

    frames = "frames"
    tokens = "tokens"


class MalformedMessage(ValueError):
    """A line is not a JSON object."""


def encode(message: Message) -> bytes:
    """Serialize a message as one UTF-8 JSON line."""
    line = json.dumps(message, separators=(",", ":"), ensure_ascii=False)
    return (line + "\n").encode("utf-8")


def decode(line: Union[bytes, str]) -> Message:
    """Parse one JSON line into a message.

    Raises:
        MalformedMessage: The line is not valid JSON or not an object.
    """
    try:
        message = json.loads(line)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedMessage(f"invalid JSON line: {e}") from e
    if not isinstance(message, dict):
        raise MalformedMessage("message must be a JSON object")
    return message


def encode_payload(
    payload: Union[bytes, tuple[str, ...]]
) -> Union[str, list[str]]:
    """Frames travel as base64 text, tokens as a JSON list."""
    if isinstance(payload, bytes):
        return base64.b64encode(payload).decode("ascii")
    return list(payload)


def decode_payload(
    payload: Any, kind: InputKind
) -> Union[bytes, tuple[str, ...]]:
    """Inverse of encode_payload.

    Raises:
        MalformedMessage: The payload does not match kind.
    """
    if kind is InputKind.frames:
        if not isinstance(payload, str):
            raise MalformedMessage("frame payload must be base64 text")
        try:
            return base64.b64decode(payload, validate=True)
        except binascii.Error as e:
            raise MalformedMessage(f"invalid base64 payload: {e}") from e

    if not isinstance(payload, list) or not all(
        isinstance(token, str) and token for token in payload
    ):
        raise MalformedMessage("token payload must be a list of strings")
    return tuple(payload)


def payload_segments(payload: Any, kind: InputKind) -> list[Any]:
    """Split a decode request payload into per-chunk segments.

    Requests normally carry a list with one segment per chunk. A bare
    segment (base64 text for frames, a flat token list for tokens) is taken
    as the whole input in a single chunk.

    Raises:
        MalformedMessage: The payload is neither form.
    """
    if kind is InputKind.frames and isinstance(payload, str):
        return [payload]
    if not isinstance(payload, list):
        raise MalformedMessage("payload must be a list of chunk segments")
    if kind is InputKind.tokens and all(isinstance(p, str) for p in payload):
        return [payload]
    return payload


def parse_address(address: str) -> tuple[str, int]:
    """Split "host:port" into its parts.

    Raises:
        ValueError: The port is missing or not a number.
    """
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port: {address!r}")
    return host or "127.0.0.1", int(port)


async def read_message(reader: asyncio.StreamReader) -> Optional[Message]:
    """Read the next message, or None at end of stream."""
    line = await reader.readline()
    if not line:
        return None
    return decode(line)


async def write_message(
    writer: asyncio.StreamWriter, message: Message
) -> None:
    """Write one message and wait for the buffer to drain."""
    writer.write(encode(message))
    await writer.drain()


class LineSocket:
    """Blocking newline-delimited JSON client connection."""

    def __init__(self, address: str, timeout: Optional[float]) -> None:
        """Connect to address.

        Raises:
            OSError: The connection could not be established.
        """
        self.address = address
        self.sock = socket.create_connection(
            parse_address(address), timeout=timeout
        )
        self.buffer = b""

    def send(self, message: Message) -> None:
        """Send one message."""
        self.sock.sendall(encode(message))

    def receive(self) -> Message:
        """Block until one whole message has arrived.

        Raises:
            ConnectionError: The peer closed the connection.
            socket.timeout: Nothing arrived within the timeout.
        """
        while b"\n" not in self.buffer:
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError(f"{self.address} closed the connection")
            self.buffer += data
        line, self.buffer = self.buffer.split(b"\n", 1)
        return decode(line)

    def close(self) -> None:
        """Close the connection."""
        try:
            self.sock.close()
        except OSError:
            pass
