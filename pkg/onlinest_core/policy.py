"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Local agreement streaming policy.

A session re-decodes the growing input after every chunk, forcing the
decoder to continue the already committed prefix. Once the last
`agreement_depth` full hypotheses share a longer prefix than the committed
one, the extra tokens are committed for good.
"""

import logging
from dataclasses import dataclass, field
from functools import reduce
from typing import TYPE_CHECKING, Optional, Sequence, Union

from .errors import ContractViolation, EmptySessionError, SequencingError
from .tokens import WHITESPACE, TokenSequence

if TYPE_CHECKING:
    from .decoders import IncrementalDecoder

LOG = logging.getLogger(__name__)

DEFAULT_CHUNK_DURATION_S = 0.5
DEFAULT_AGREEMENT_DEPTH = 2

Payload = Union[bytes, tuple[str, ...]]


@dataclass(frozen=True)
class Chunk:
    """A fixed-duration slice of the input stream.

    `payload` is opaque: raw frame bytes for speech backends or a tuple of
    source tokens for text backends.
    """

    index: int
    payload: Payload
    duration_s: float = DEFAULT_CHUNK_DURATION_S

    def __post_init__(self) -> None:
        """Validate index and duration."""
        if self.index < 1:
            raise SequencingError(f"chunk index must be >= 1: {self.index}")
        if self.duration_s <= 0:
            raise ValueError(
                f"chunk duration must be positive: {self.duration_s}"
            )

    @property
    def end_s(self) -> float:
        """Stream time at which this chunk has fully arrived."""
        return self.index * self.duration_s


@dataclass(frozen=True)
class CommitEvent:
    """Tokens irrevocably appended to the output by one chunk.

    `sequence` is the event's position in its session's commit log.
    """

    tokens: TokenSequence
    chunk_index: int
    sequence: int = 0


def longest_common_prefix(
    a: TokenSequence, b: TokenSequence
) -> TokenSequence:
    """Return the longest sequence that is a prefix of both a and b.

    Args:
        a: First sequence.
        b: Second sequence, with the same tokenizer tag.

    Returns:
        TokenSequence: The shared prefix, possibly empty.

    Raises:
        ComparabilityError: The tokenizer tags differ.
    """
    a.check_comparable(b)
    n = 0
    for left, right in zip(a.tokens, b.tokens):
        if left != right:
            break
        n += 1
    return a[:n]


@dataclass
class StreamSession:
    """Per-utterance streaming state.

    Operations on one session must be serialized by the caller.
    """

    agreement_depth: int = DEFAULT_AGREEMENT_DEPTH
    chunk_duration_s: float = DEFAULT_CHUNK_DURATION_S
    tokenizer_tag: str = WHITESPACE
    chunks: list[Chunk] = field(default_factory=list)
    committed: TokenSequence = field(init=False)
    history: list[TokenSequence] = field(default_factory=list)
    commit_log: list[CommitEvent] = field(default_factory=list)
    finished: bool = False

    def __post_init__(self) -> None:
        """Validate configuration and start with nothing committed."""
        if self.agreement_depth < 2:
            raise ValueError(
                f"agreement depth must be >= 2: {self.agreement_depth}"
            )
        if self.chunk_duration_s <= 0:
            raise ValueError(
                f"chunk duration must be positive: {self.chunk_duration_s}"
            )
        self.committed = TokenSequence((), self.tokenizer_tag)

    @property
    def chunks_arrived(self) -> int:
        """Number of chunks ingested so far."""
        return len(self.chunks)

    @property
    def prev_hypothesis(self) -> Optional[TokenSequence]:
        """The most recent full hypothesis, if any."""
        return self.history[-1] if self.history else None

    def make_chunk(self, payload: Payload) -> Chunk:
        """Build the next chunk of this session around payload."""
        return Chunk(self.chunks_arrived + 1, payload, self.chunk_duration_s)

    def _check_open(self) -> None:
        if self.finished:
            raise SequencingError("session is finished")

    def _commit(
        self, hypothesis: TokenSequence, chunk_index: int
    ) -> Optional[CommitEvent]:
        new = hypothesis[len(self.committed) :]
        self.committed = hypothesis
        if not new:
            return None
        event = CommitEvent(new, chunk_index, len(self.commit_log))
        self.commit_log.append(event)
        return event

    def ingest(
        self, chunk: Chunk, decoder: "IncrementalDecoder"
    ) -> Optional[CommitEvent]:
        """See ingest_chunk."""
        self._check_open()
        if chunk.index != self.chunks_arrived + 1:
            raise SequencingError(
                f"expected chunk {self.chunks_arrived + 1}, "
                f"got chunk {chunk.index}"
            )
        if chunk.duration_s != self.chunk_duration_s:
            raise SequencingError(
                f"chunk duration {chunk.duration_s} differs from session "
                f"duration {self.chunk_duration_s}"
            )

        chunks = self.chunks + [chunk]
        hypothesis = forced_decode(decoder, chunks, self.committed)

        # Nothing is touched until the hypothesis passed the contract check.
        self.chunks = chunks
        self.history = (self.history + [hypothesis])[-self.agreement_depth :]

        if len(self.history) < self.agreement_depth:
            return None

        agreed = reduce(longest_common_prefix, self.history)
        event = self._commit(agreed, chunk.index)
        if event is not None:
            LOG.debug(
                "chunk %d committed %r", chunk.index, event.tokens.text()
            )
        return event

    def finish(self, decoder: "IncrementalDecoder") -> Optional[CommitEvent]:
        """See finish_stream."""
        self._check_open()
        if not self.chunks:
            raise EmptySessionError("no chunks were ingested")

        final = forced_decode(decoder, self.chunks, self.committed, final=True)
        self.history = (self.history + [final])[-self.agreement_depth :]
        event = self._commit(final, self.chunks[-1].index)
        self.finished = True
        return event


def forced_decode(
    decoder: "IncrementalDecoder",
    chunks: Sequence[Chunk],
    committed: TokenSequence,
    final: bool = False,
) -> TokenSequence:
    """Call the decoder and enforce that its output extends committed.

    Raises:
        ContractViolation: The hypothesis does not start with committed.
    """
    hypothesis = decoder.decode(chunks, committed, final=final)
    if hypothesis.tokenizer_tag != committed.tokenizer_tag or not (
        hypothesis.startswith(committed)
    ):
        raise ContractViolation(
            f"hypothesis {hypothesis.text()!r} does not extend committed "
            f"prefix {committed.text()!r}"
        )
    return hypothesis


def ingest_chunk(
    session: StreamSession, chunk: Chunk, decoder: "IncrementalDecoder"
) -> Optional[CommitEvent]:
    """Feed one chunk to a session and commit whatever the hypotheses agree.

    The decoder sees every chunk so far and the committed prefix. Until
    `agreement_depth` hypotheses exist nothing is committed; afterwards the
    committed text becomes the longest common prefix of the last
    `agreement_depth` hypotheses.

    Args:
        session: An unfinished session.
        chunk: The next chunk, index `session.chunks_arrived + 1`.
        decoder: Backend producing full hypotheses.

    Returns:
        Optional[CommitEvent]: The newly committed tokens, or None.

    Raises:
        SequencingError: Out-of-order chunk or finished session.
        ContractViolation: The decoder ignored the committed prefix; the
            session is left unchanged.
    """
    return session.ingest(chunk, decoder)


def finish_stream(
    session: StreamSession, decoder: "IncrementalDecoder"
) -> Optional[CommitEvent]:
    """Flush the session at end of input.

    The whole input is decoded once more with `final=True` and everything
    beyond the committed prefix is committed, stamped with the last chunk
    index.

    Raises:
        EmptySessionError: No chunk was ingested.
        SequencingError: The session is already finished.
    """
    return session.finish(decoder)


def offline_decode(
    chunks: Sequence[Chunk],
    decoder: "IncrementalDecoder",
    tokenizer_tag: str = WHITESPACE,
) -> tuple[TokenSequence, CommitEvent]:
    """Decode the complete input once, as an offline system would.

    Returns:
        tuple: The output and a single commit event at the last chunk.

    Raises:
        EmptySessionError: chunks is empty.
    """
    if not chunks:
        raise EmptySessionError("offline decoding needs at least one chunk")

    output = forced_decode(
        decoder, chunks, TokenSequence((), tokenizer_tag), final=True
    )
    return output, CommitEvent(output, chunks[-1].index)
