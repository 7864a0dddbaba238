"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Incremental decoder backends.

Every backend implements `decode(chunks, committed, final)`: given the whole
input seen so far and the committed prefix it returns a full hypothesis that
starts with that prefix.
"""

import logging
import random
import socket
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, Union

from box import Box
from typing_extensions import Self

from .config.models import BackendConfig, TailGuessMode, ToyConfig
from .errors import (
    ContractViolation,
    DecoderProtocolError,
    DecoderTimeout,
    DecoderTransportError,
    ScriptExhausted,
    VocabularyError,
)
from .policy import Chunk, longest_common_prefix
from .protocol import InputKind, LineSocket, MalformedMessage, encode_payload
from .tokens import WHITESPACE, TokenSequence

LOG = logging.getLogger(__name__)


class IncrementalDecoder(ABC):
    """A backend that re-decodes a growing input under a forced prefix."""

    kind: InputKind = InputKind.tokens
    deterministic: bool = True
    # False: create one instance per session.
    concurrent_safe: bool = False
    tokenizer_tag: str = WHITESPACE

    @abstractmethod
    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        """Return a full hypothesis for chunks that starts with committed.

        Args:
            chunks: Every chunk seen so far, in order.
            committed: Prefix the output is forced to begin with.
            final: True once the input is complete.

        Returns:
            TokenSequence: The full hypothesis.
        """

    def close(self) -> None:
        """Release any resources held by the backend."""


def source_tokens(chunks: Sequence[Chunk]) -> list[tuple[str, int]]:
    """Flatten token chunks into (token, arrival chunk index) pairs."""
    arrivals = []
    for chunk in chunks:
        if isinstance(chunk.payload, bytes):
            raise TypeError("expected token chunks, got frame chunks")
        arrivals.extend((token, chunk.index) for token in chunk.payload)
    return arrivals


def force_prefix(
    raw: Sequence[str], committed: TokenSequence
) -> TokenSequence:
    """Continue committed with whatever raw has past the committed length.

    This is how a decoder behaves when its first len(committed) steps are
    forced.
    """
    return committed.extend(raw[len(committed) :])


@dataclass
class ScriptTranscript:
    """Scripted full hypotheses keyed by the number of chunks seen."""

    hypotheses: dict[int, TokenSequence]

    def __post_init__(self) -> None:
        """Validate keys and forced prefixes."""
        self.validate()

    @classmethod
    def from_texts(
        cls, texts: Iterable[str], tokenizer_tag: str = WHITESPACE
    ) -> "ScriptTranscript":
        """Build a transcript whose nth text answers n chunks."""
        return cls(
            {
                n: TokenSequence.from_text(text, tokenizer_tag)
                for n, text in enumerate(texts, start=1)
            }
        )

    @classmethod
    def from_yaml(cls, path: Path) -> "ScriptTranscript":
        """Load a YAML file holding a `hypotheses` list."""
        spec = Box.from_yaml(filename=path)
        return cls.from_texts(spec.hypotheses)

    def __len__(self) -> int:
        """Number of scripted entries."""
        return len(self.hypotheses)

    def validate(self) -> None:
        """Check keys run 1..N and every entry extends any forced prefix.

        The prefix committed before step t is at most the agreement of
        steps t-2 and t-1, whatever the agreement depth, so replaying depth
        two bounds every legal forced prefix.

        Raises:
            ValueError: Keys have gaps or an entry breaks a forced prefix.
        """
        if not self.hypotheses:
            raise ValueError("transcript must not be empty")
        if sorted(self.hypotheses) != list(range(1, len(self) + 1)):
            raise ValueError("transcript keys must run 1..N without gaps")

        committed: Optional[TokenSequence] = None
        for n in range(2, len(self) + 1):
            previous, current = self.hypotheses[n - 1], self.hypotheses[n]
            if committed is not None and not current.startswith(committed):
                raise ValueError(
                    f"entry {n} {current.text()!r} does not extend the "
                    f"forced prefix {committed.text()!r}"
                )
            committed = longest_common_prefix(previous, current)

    def agreement(self) -> list[TokenSequence]:
        """Committed text after each step under depth-two agreement."""
        committed = [self.hypotheses[1][:0]]
        for n in range(2, len(self) + 1):
            committed.append(
                longest_common_prefix(
                    self.hypotheses[n - 1], self.hypotheses[n]
                )
            )
        return committed


def scripted_decode(
    transcript: ScriptTranscript, chunks_seen: int, committed: TokenSequence
) -> TokenSequence:
    """Return the scripted hypothesis for chunks_seen.

    Raises:
        ScriptExhausted: chunks_seen is outside the transcript.
        ContractViolation: The entry does not extend committed.
    """
    if chunks_seen not in transcript.hypotheses:
        raise ScriptExhausted(
            f"transcript has {len(transcript)} entries, "
            f"asked for {chunks_seen}"
        )
    hypothesis = transcript.hypotheses[chunks_seen]
    if not hypothesis.startswith(committed):
        raise ContractViolation(
            f"scripted entry {chunks_seen} {hypothesis.text()!r} does not "
            f"extend {committed.text()!r}"
        )
    return hypothesis


class ScriptedDecoder(IncrementalDecoder):
    """Replays a transcript; ignores chunk payloads."""

    concurrent_safe = True

    def __init__(
        self,
        transcript: ScriptTranscript,
        kind: InputKind,
        tokenizer_tag: str = WHITESPACE,
    ) -> None:
        """Constructor."""
        self.transcript = transcript
        self.kind = kind
        self.tokenizer_tag = tokenizer_tag

    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        """See scripted_decode."""
        return scripted_decode(self.transcript, len(chunks), committed)


@dataclass
class ToyTranslatorSpec:
    """A word-for-word translator with an unstable tail.

    A source token that arrived in chunk `a` is translated through
    `word_map` once `chunks_seen - a >= stability_horizon`. Younger tokens
    are dropped (`off`) or replaced by a guess that changes with the number
    of chunks seen (`cycling`, `random`).
    """

    word_map: dict[str, str]
    tail_guess_mode: TailGuessMode = TailGuessMode.off
    stability_horizon: int = 1
    seed: int = 0
    targets: list[str] = field(init=False)

    def __post_init__(self) -> None:
        """Index the target vocabulary."""
        if self.stability_horizon < 0:
            raise ValueError("stability horizon must be >= 0")
        if not self.word_map:
            raise ValueError("word map must not be empty")
        self.targets = sorted(set(self.word_map.values()))

    @classmethod
    def from_config(cls, config: ToyConfig) -> "ToyTranslatorSpec":
        """Build from its config model."""
        return cls(
            word_map=dict(config.word_map),
            tail_guess_mode=config.tail_guess_mode,
            stability_horizon=config.stability_horizon,
            seed=config.seed,
        )

    @cached_property
    def ranks(self) -> dict[str, int]:
        """Position of each source word in sorted order."""
        return {word: i for i, word in enumerate(sorted(self.word_map))}

    def guess(self, source: str, chunks_seen: int) -> str:
        """Unstable translation of source after chunks_seen chunks."""
        if self.tail_guess_mode is TailGuessMode.cycling:
            i = self.ranks[source] + chunks_seen
            return self.targets[i % len(self.targets)]
        rng = random.Random(f"{self.seed}:{source}:{chunks_seen}")
        return rng.choice(self.targets)


def toy_decode(
    spec: ToyTranslatorSpec,
    chunks: Sequence[Chunk],
    committed: TokenSequence,
    final: bool = False,
) -> TokenSequence:
    """Translate the token chunks seen so far with the toy translator.

    Raises:
        VocabularyError: A source token is not in the word map.
    """
    arrivals = source_tokens(chunks)
    unknown = [token for token, _ in arrivals if token not in spec.word_map]
    if unknown:
        raise VocabularyError(f"unknown source tokens: {unknown}")

    chunks_seen = len(chunks)
    raw = []
    for token, arrived in arrivals:
        if final or chunks_seen - arrived >= spec.stability_horizon:
            raw.append(spec.word_map[token])
        elif spec.tail_guess_mode is TailGuessMode.off:
            break
        else:
            raw.append(spec.guess(token, chunks_seen))
    return force_prefix(raw, committed)


class ToyDecoder(IncrementalDecoder):
    """Decoder backed by a ToyTranslatorSpec."""

    concurrent_safe = True

    def __init__(
        self, spec: ToyTranslatorSpec, tokenizer_tag: str = WHITESPACE
    ) -> None:
        """Constructor."""
        self.spec = spec
        self.tokenizer_tag = tokenizer_tag

    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        """See toy_decode."""
        return toy_decode(self.spec, chunks, committed, final)


class CascadeDecoder(IncrementalDecoder):
    """A recogniser stage feeding a translation stage.

    The recogniser decodes each input prefix without forcing. A transcript
    token is handed to the translator as having arrived in the earliest
    chunk since which the recogniser output up to and including it has not
    changed. The translator is forced on the committed target prefix.
    """

    def __init__(
        self, recogniser: IncrementalDecoder, translator: IncrementalDecoder
    ) -> None:
        """Constructor."""
        if translator.kind is not InputKind.tokens:
            raise ValueError("the translation stage must accept tokens")
        self.recogniser = recogniser
        self.translator = translator
        self.kind = recogniser.kind
        self.deterministic = (
            recogniser.deterministic and translator.deterministic
        )
        self.tokenizer_tag = translator.tokenizer_tag
        self.transcripts: dict[int, TokenSequence] = {}

    def transcript(
        self, chunks: Sequence[Chunk], final: bool = False
    ) -> TokenSequence:
        """Recogniser output for chunks, cached while not final."""
        n = len(chunks)
        if final:
            return self.recogniser.decode(
                chunks, TokenSequence((), self.recogniser.tokenizer_tag), True
            )
        if n not in self.transcripts:
            self.transcripts[n] = self.recogniser.decode(
                chunks, TokenSequence((), self.recogniser.tokenizer_tag)
            )
        return self.transcripts[n]

    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        """Recognise, then translate with arrival-stamped source chunks."""
        n = len(chunks)
        if any(k > n for k in self.transcripts):
            self.transcripts.clear()

        latest = self.transcript(chunks, final)
        arrivals = [n] * len(latest)
        for p in range(len(latest)):
            for k in range(n - 1, 0, -1):
                earlier = self.transcript(chunks[:k])
                if earlier.tokens[: p + 1] != latest.tokens[: p + 1]:
                    break
                arrivals[p] = k

        source = [
            Chunk(
                k,
                tuple(t for t, a in zip(latest.tokens, arrivals) if a == k),
                chunks[k - 1].duration_s,
            )
            for k in range(1, n + 1)
        ]
        return self.translator.decode(source, committed, final)

    def close(self) -> None:
        """Close both stages."""
        self.recogniser.close()
        self.translator.close()


def reconnect(fn: Callable[..., Any]) -> Any:
    """Retry a remote call on transport errors, reconnecting in between.

    Args:
        fn: Method of RemoteDecoder to wrap.

    Returns:
        Any: Return value from the decorated method.
    """

    def wrapped_function(self: Self, *args: Any, **kwargs: Any) -> Any:
        retry = 0
        while True:
            try:
                retry += 1
                return fn(self, *args, **kwargs)
            except DecoderTransportError as e:
                self.disconnect()
                if retry >= self.retries:
                    raise
                LOG.warning("%s; retrying (%d/%d)", e, retry, self.retries)

    return wrapped_function


class RemoteDecoder(IncrementalDecoder):
    """Client side of the decoder wire protocol.

    One request is in flight at a time; the forced-prefix contract is
    checked here rather than trusted to the server.
    """

    def __init__(
        self,
        endpoint: str,
        kind: InputKind = InputKind.tokens,
        timeout_s: float = 30.0,
        retries: int = 3,
        tokenizer_tag: str = WHITESPACE,
        key: str = "*",
    ) -> None:
        """Constructor.

        `key` tells the server which utterance or session this is.
        """
        self.endpoint = endpoint
        self.key = key
        self.kind = kind
        self.timeout_s = timeout_s
        self.retries = retries
        self.tokenizer_tag = tokenizer_tag
        self.deterministic = False
        self.connection: Optional[LineSocket] = None
        self.request_id = 0
        self.lock = threading.Lock()

    def _exchange(self, request: dict[str, Any]) -> dict[str, Any]:
        assert self.connection is not None
        try:
            self.connection.send(request)
            response = self.connection.receive()
        except socket.timeout as e:
            self.disconnect()
            raise DecoderTimeout(
                f"{self.endpoint} did not answer within {self.timeout_s}s"
            ) from e
        except MalformedMessage as e:
            self.disconnect()
            raise DecoderProtocolError(f"{self.endpoint}: {e}") from e
        except OSError as e:
            raise DecoderTransportError(
                f"decoder at {self.endpoint} unreachable: {e}"
            ) from e

        if response.get("id") != request["id"]:
            raise DecoderProtocolError(
                f"{self.endpoint} answered request {response.get('id')} "
                f"while {request['id']} was pending"
            )
        if "error" in response:
            raise DecoderProtocolError(
                f"{self.endpoint} failed: {response['error']}"
            )
        return response

    def connect(self) -> None:
        """Open the connection and complete the handshake.

        Raises:
            DecoderTransportError: The endpoint is unreachable.
            DecoderProtocolError: The server accepts another input kind.
        """
        if self.connection is not None:
            return
        try:
            self.connection = LineSocket(self.endpoint, self.timeout_s)
        except (OSError, ValueError) as e:
            raise DecoderTransportError(
                f"decoder at {self.endpoint} unreachable: {e}"
            ) from e

        response = self._exchange(
            {"id": 0, "hello": {"kind": self.kind.value, "key": self.key}}
        )
        capabilities = response.get("capabilities", {})
        if capabilities.get("kind") != self.kind.value:
            self.disconnect()
            raise DecoderProtocolError(
                f"{self.endpoint} accepts {capabilities.get('kind')}, "
                f"not {self.kind.value}"
            )
        self.deterministic = bool(capabilities.get("deterministic", False))
        LOG.info("connected to decoder at %s", self.endpoint)

    def disconnect(self) -> None:
        """Drop the connection, if any."""
        if self.connection is not None:
            self.connection.close()
            self.connection = None

    @reconnect
    def _request(
        self, chunks: Sequence[Chunk], committed: TokenSequence, final: bool
    ) -> list[str]:
        self.connect()
        self.request_id += 1
        response = self._exchange(
            {
                "id": self.request_id,
                "committed": list(committed.tokens),
                "input": {
                    "kind": self.kind.value,
                    "payload": [encode_payload(c.payload) for c in chunks],
                },
                "final": final,
            }
        )
        hypothesis = response.get("hypothesis")
        if not isinstance(hypothesis, list) or not all(
            isinstance(token, str) and token for token in hypothesis
        ):
            raise DecoderProtocolError(
                f"{self.endpoint} sent a malformed hypothesis: {hypothesis!r}"
            )
        return hypothesis

    def decode(
        self,
        chunks: Sequence[Chunk],
        committed: TokenSequence,
        final: bool = False,
    ) -> TokenSequence:
        """Send the input to the remote backend.

        Raises:
            DecoderTransportError: The endpoint stayed unreachable.
            DecoderTimeout: No answer within timeout_s.
            DecoderProtocolError: The server sent an error or bad data.
            ContractViolation: The hypothesis does not extend committed.
        """
        with self.lock:
            tokens = self._request(chunks, committed, final)
        hypothesis = TokenSequence(tuple(tokens), committed.tokenizer_tag)
        if not hypothesis.startswith(committed):
            raise ContractViolation(
                f"{self.endpoint} returned {hypothesis.text()!r}, which does "
                f"not extend {committed.text()!r}"
            )
        return hypothesis

    def close(self) -> None:
        """Close the connection."""
        self.disconnect()


def remote_decode(
    endpoint: str,
    chunks: Sequence[Chunk],
    committed: TokenSequence,
    kind: InputKind = InputKind.tokens,
    timeout_s: float = 30.0,
) -> TokenSequence:
    """One-shot remote decode over a fresh connection."""
    decoder = RemoteDecoder(endpoint, kind, timeout_s)
    try:
        return decoder.decode(chunks, committed)
    finally:
        decoder.close()


DecoderFactory = Callable[[str], IncrementalDecoder]


def parse_backend(
    spec: str, config: Optional[BackendConfig] = None
) -> BackendConfig:
    """Turn a CLI backend spec into a BackendConfig.

    `remote:<host:port>` names the endpoint inline; `scripted`, `toy` and
    `cascade` take the rest of their settings from config.
    """
    name, _, endpoint = spec.partition(":")
    values: dict[str, Any] = config.dict() if config is not None else {}
    values["name"] = name
    if endpoint:
        values["endpoint"] = endpoint
    return BackendConfig.parse_obj(values)


def backend_factory(
    config: BackendConfig,
    timeout_s: float = 30.0,
    retries: int = 3,
    tokenizer_tag: str = WHITESPACE,
) -> DecoderFactory:
    """Build a factory that makes one decoder per utterance or session.

    Scripted transcripts are looked up by utterance/session key, falling
    back to the `"*"` entry. Every decoder made segments its output under
    tokenizer_tag.

    Raises:
        ValueError: The config is incomplete for its backend.
    """
    kind = InputKind(config.kind)

    if config.name == "scripted":
        if not config.transcripts:
            raise ValueError("scripted backend needs transcripts")
        transcripts = {
            key: ScriptTranscript.from_texts(texts, tokenizer_tag)
            for key, texts in config.transcripts.items()
        }

        def scripted(key: str) -> IncrementalDecoder:
            try:
                transcript = transcripts.get(key) or transcripts["*"]
            except KeyError:
                raise ScriptExhausted(f"no transcript for {key!r}") from None
            return ScriptedDecoder(transcript, kind, tokenizer_tag)

        return scripted

    if config.name == "toy":
        if config.toy is None:
            raise ValueError("toy backend needs a toy section")
        spec = ToyTranslatorSpec.from_config(config.toy)
        return lambda key: ToyDecoder(spec, tokenizer_tag)

    if config.name == "remote":
        if not config.endpoint:
            raise ValueError("remote backend needs an endpoint")
        endpoint = config.endpoint
        return lambda key: RemoteDecoder(
            endpoint,
            kind,
            config.timeout_s or timeout_s,
            config.retries or retries,
            tokenizer_tag,
            key=key,
        )

    if len(config.stages) != 2:
        raise ValueError("cascade backend needs exactly two stages")
    recogniser, translator = (
        backend_factory(stage, timeout_s, retries, tokenizer_tag)
        for stage in config.stages
    )
    return lambda key: CascadeDecoder(recogniser(key), translator(key))


def load_backend_config(path: Union[str, Path]) -> BackendConfig:
    """Load a backend config from a YAML or JSON file."""
    return BackendConfig.parse_obj(Box.from_yaml(filename=path).to_dict())


class DecoderRegistry:
    """Named decoder factories offered by a server."""

    def __init__(self) -> None:
        """Constructor."""
        self.factories: dict[str, DecoderFactory] = {}

    def register(self, name: str, factory: DecoderFactory) -> None:
        """Offer factory under name."""
        self.factories[name] = factory

    @property
    def default(self) -> str:
        """The first registered backend."""
        return next(iter(self.factories))

    def create(self, name: Optional[str], key: str) -> IncrementalDecoder:
        """Create a decoder from the named (or default) factory.

        Raises:
            KeyError: No backend has that name.
        """
        return self.factories[name or self.default](key)

    def __contains__(self, name: object) -> bool:
        """Is a backend registered under name."""
        return name in self.factories

    def __len__(self) -> int:
        """Number of registered backends."""
        return len(self.factories)
