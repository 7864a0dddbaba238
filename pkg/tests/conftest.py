"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from pathlib import Path

import pytest

from onlinest_core.decoders import ScriptedDecoder, ScriptTranscript
from onlinest_core.policy import Chunk
from onlinest_core.protocol import InputKind

FILES = Path(__file__).parent / "files"

NATURE = [
    "Nature canned",
    "Nature can not",
    "Nature can tell a",
    "Nature can tell us",
]


@pytest.fixture
def files() -> Path:
    return FILES


@pytest.fixture
def nature_transcript() -> ScriptTranscript:
    return ScriptTranscript.from_yaml(FILES / "nature.yml")


@pytest.fixture
def nature_decoder(nature_transcript) -> ScriptedDecoder:
    return ScriptedDecoder(nature_transcript, InputKind.tokens)


@pytest.fixture
def nature_chunks() -> list[Chunk]:
    return [
        Chunk(i, payload)
        for i, payload in enumerate(
            [("la", "naturaleza"), ("nos",), ("puede",), ("decir",)], start=1
        )
    ]
