"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from traceback import format_exception_only


class OnlineSTError(Exception):
    """Base class for all errors raised by onlinest_core."""


class ComparabilityError(OnlineSTError):
    """Token sequences produced by different tokenizers were compared."""


class SequencingError(OnlineSTError):
    """A chunk arrived out of order, or the session is already finished."""


class EmptySessionError(OnlineSTError):
    """An operation needs at least one chunk but none were ingested."""


class ContractViolation(OnlineSTError):
    """A decoder hypothesis does not start with the committed prefix.

    Never retriable: the backend is faulty, not the transport.
    """


class ScriptExhausted(OnlineSTError):
    """A scripted transcript has no entry for the requested chunk count."""


class VocabularyError(OnlineSTError):
    """A source token is not in the toy translator vocabulary."""


class DecoderTransportError(OnlineSTError):
    """A remote decoder could not be reached; the call may be retried."""


class DecoderTimeout(OnlineSTError):
    """A remote decoder did not answer within the configured timeout."""


class DecoderProtocolError(OnlineSTError):
    """A remote decoder sent a malformed or unexpected response."""


class UndefinedLatencyError(OnlineSTError):
    """Latency of an empty output is undefined."""


class ManifestError(OnlineSTError):
    """A corpus or evaluation manifest is malformed."""


class PairingError(OnlineSTError):
    """System and baseline records do not cover the same utterances."""


def describe(e: BaseException) -> str:
    """One-line description of an exception for envelopes and records."""
    return "".join(format_exception_only(type(e), e)).strip()
