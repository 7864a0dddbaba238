"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Batch evaluation of offline and online decoding over a manifest.
"""

import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from box import Box
from pydantic import (
    BaseModel,
    PositiveFloat,
    ValidationError,
    confloat,
    conint,
    root_validator,
    validator,
)

from .config.models import BackendConfig
from .decoders import DecoderFactory, IncrementalDecoder
from .errors import (
    DecoderTransportError,
    ManifestError,
    OnlineSTError,
    PairingError,
    UndefinedLatencyError,
    describe,
)
from .metrics import (
    BleuConfig,
    LatencyLog,
    ReportRow,
    bleu,
    delta_bleu,
    delta_latency,
    latency_seconds,
    pooled_latency_seconds,
)
from .policy import (
    DEFAULT_CHUNK_DURATION_S,
    Chunk,
    CommitEvent,
    StreamSession,
    finish_stream,
    ingest_chunk,
    offline_decode,
)
from .tokens import WHITESPACE, TokenSequence

LOG = logging.getLogger(__name__)

AVERAGE = "Avg."


class Mode(Enum):
    """How an utterance is decoded."""

    offline = "offline"
    online = "online"


def parse_modes(mode: str) -> list[Mode]:
    """Turn `online`, `offline` or `both` into modes, offline first."""
    if mode == "both":
        return [Mode.offline, Mode.online]
    return [Mode(mode)]


def split_frames(
    data: bytes, chunk_duration_s: float, frame_rate: float, frame_bytes: int
) -> list[bytes]:
    """Cut raw frames into chunks of `chunk_duration_s` seconds each.

    The last chunk may be shorter.
    """
    size = max(1, round(chunk_duration_s * frame_rate)) * frame_bytes
    return [data[i : i + size] for i in range(0, len(data), size)]


class SourceSpec(BaseModel):
    """Where an utterance's input comes from.

    Exactly one of `tokens` (split every `tokens_per_chunk`), `chunks`
    (pre-chunked tokens) or `frames` (a raw frame file) is given.
    """

    tokens: Optional[list[str]]
    chunks: Optional[list[list[str]]]
    frames: Optional[str]
    offset: conint(ge=0) = 0  # type: ignore[valid-type]
    count: Optional[conint(ge=1)]  # type: ignore[valid-type]

    @root_validator
    def one_source(cls, values: dict[str, Any]) -> dict[str, Any]:
        """Exactly one kind of source is allowed."""
        given = [
            name
            for name in ("tokens", "chunks", "frames")
            if values.get(name) is not None
        ]
        if len(given) != 1:
            raise ValueError(
                "source needs exactly one of tokens, chunks or frames"
            )
        return values


class Utterance(BaseModel):
    """One evaluation item."""

    id: str
    direction: str = ""
    reference: str
    source: SourceSpec


class EvalManifest(BaseModel):
    """Utterances and the settings shared by every one of them."""

    chunk_duration_s: PositiveFloat = DEFAULT_CHUNK_DURATION_S
    agreement_depth: conint(ge=2) = 2  # type: ignore[valid-type]
    tokens_per_chunk: conint(ge=1) = 1  # type: ignore[valid-type]
    frame_rate: confloat(gt=0) = 100.0  # type: ignore[valid-type]
    frame_bytes: conint(ge=1) = 2  # type: ignore[valid-type]
    backend: Optional[BackendConfig]
    utterances: list[Utterance]
    base_dir: Path = Path(".")

    @validator("utterances")
    def unique_ids(cls, utterances: list[Utterance]) -> list[Utterance]:
        """Ids identify utterances across runs."""
        if not utterances:
            raise ValueError("manifest has no utterances")
        ids = [u.id for u in utterances]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"duplicate utterance ids: {duplicates}")
        return utterances

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalManifest":
        """Load a YAML or JSON manifest; frame paths are relative to it.

        Raises:
            ManifestError: The file is unreadable or does not validate.
        """
        path = Path(path)
        try:
            values = Box.from_yaml(filename=path).to_dict()
            values.setdefault("base_dir", path.parent)
            return cls.parse_obj(values)
        except ValidationError as e:
            raise ManifestError(f"{path}: {e}") from e
        except Exception as e:
            raise ManifestError(f"{path}: {describe(e)}") from e

    def override(self, **values: Any) -> "EvalManifest":
        """Return a copy with values replaced, validated like a fresh load.

        Raises:
            ManifestError: A replaced value is out of range.
        """
        try:
            return self.parse_obj({**self.dict(), **values})
        except ValidationError as e:
            raise ManifestError(str(e)) from e

    def chunks(self, utterance: Utterance) -> list[Chunk]:
        """Cut an utterance's input into chunks.

        Raises:
            ManifestError: The input is empty or its frames are unreadable.
        """
        source = utterance.source
        payloads: list[Union[bytes, tuple[str, ...]]]
        if source.chunks is not None:
            payloads = [tuple(chunk) for chunk in source.chunks]
        elif source.tokens is not None:
            n = self.tokens_per_chunk
            payloads = [
                tuple(source.tokens[i : i + n])
                for i in range(0, len(source.tokens), n)
            ]
        else:
            payloads = list(
                split_frames(
                    self.read_frames(source),
                    self.chunk_duration_s,
                    self.frame_rate,
                    self.frame_bytes,
                )
            )

        if not payloads:
            raise ManifestError(f"{utterance.id}: input is empty")
        return [
            Chunk(i, payload, self.chunk_duration_s)
            for i, payload in enumerate(payloads, start=1)
        ]

    def read_frames(self, source: SourceSpec) -> bytes:
        """Read the frames a source refers to."""
        assert source.frames is not None
        path = self.base_dir / source.frames
        try:
            with open(path, "rb") as f:
                f.seek(source.offset * self.frame_bytes)
                if source.count is None:
                    return f.read()
                return f.read(source.count * self.frame_bytes)
        except OSError as e:
            raise ManifestError(f"cannot read frames: {e}") from e


@dataclass
class EvalRecord:
    """Outcome of decoding one utterance in one mode."""

    id: str
    direction: str
    mode: Mode
    output: TokenSequence
    reference: str
    commit_log: list[CommitEvent] = field(default_factory=list)
    chunk_duration_s: float = DEFAULT_CHUNK_DURATION_S
    total_chunks: int = 0
    wall_time_s: float = 0.0
    error: Optional[str] = None

    @property
    def latency_log(self) -> LatencyLog:
        """Per-token emission log."""
        return LatencyLog.from_commits(
            self.commit_log, self.chunk_duration_s, self.total_chunks
        )

    @property
    def latency_s(self) -> Optional[float]:
        """Mean token output time, None when nothing was output."""
        try:
            return latency_seconds(self.latency_log)
        except UndefinedLatencyError:
            return None

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready form."""
        return {
            "id": self.id,
            "direction": self.direction,
            "mode": self.mode.value,
            "output": self.output.text(),
            "tokenizer_tag": self.output.tokenizer_tag,
            "reference": self.reference,
            "commits": [
                {"tokens": list(event.tokens), "chunk": event.chunk_index}
                for event in self.commit_log
            ],
            "chunk_duration_s": self.chunk_duration_s,
            "total_chunks": self.total_chunks,
            "latency_s": self.latency_s,
            "wall_time_s": self.wall_time_s,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "EvalRecord":
        """Inverse of to_dict."""
        tag = values.get("tokenizer_tag", WHITESPACE)
        return cls(
            id=values["id"],
            direction=values.get("direction", ""),
            mode=Mode(values["mode"]),
            output=TokenSequence.from_text(values["output"], tag),
            reference=values["reference"],
            commit_log=[
                CommitEvent(
                    TokenSequence(tuple(c["tokens"]), tag), c["chunk"], i
                )
                for i, c in enumerate(values.get("commits", []))
            ],
            chunk_duration_s=values["chunk_duration_s"],
            total_chunks=values["total_chunks"],
            wall_time_s=values.get("wall_time_s", 0.0),
            error=values.get("error"),
        )


def decode_utterance(
    manifest: EvalManifest,
    utterance: Utterance,
    mode: Mode,
    decoder: IncrementalDecoder,
) -> EvalRecord:
    """Decode one utterance in one mode.

    Per-utterance failures are folded into the record's error field.

    Raises:
        DecoderTransportError: The backend is unreachable.
    """
    record = EvalRecord(
        id=utterance.id,
        direction=utterance.direction,
        mode=mode,
        output=TokenSequence((), decoder.tokenizer_tag),
        reference=utterance.reference,
        chunk_duration_s=manifest.chunk_duration_s,
    )
    start = time.perf_counter()
    try:
        chunks = manifest.chunks(utterance)
        record.total_chunks = len(chunks)
        if mode is Mode.offline:
            output, event = offline_decode(
                chunks, decoder, decoder.tokenizer_tag
            )
            record.output = output
            record.commit_log = [event] if output else []
        else:
            session = StreamSession(
                manifest.agreement_depth,
                manifest.chunk_duration_s,
                decoder.tokenizer_tag,
            )
            for chunk in chunks:
                ingest_chunk(session, chunk, decoder)
            finish_stream(session, decoder)
            record.output = session.committed
            record.commit_log = session.commit_log
    except DecoderTransportError:
        raise
    except (OnlineSTError, ValueError, TypeError) as e:
        record.error = describe(e)
        LOG.warning("%s (%s): %s", utterance.id, mode.value, record.error)
    record.wall_time_s = time.perf_counter() - start
    return record


def run_eval(
    manifest: EvalManifest,
    modes: Iterable[Mode],
    factory: DecoderFactory,
    parallelism: int = 4,
) -> list[EvalRecord]:
    """Decode every utterance in every mode.

    Utterances are decoded concurrently, each with its own decoder.

    Args:
        manifest: Utterances and shared settings.
        modes: Offline, online or both.
        factory: Makes a decoder for an utterance id.
        parallelism: Utterances decoded at once.

    Returns:
        list[EvalRecord]: Sorted by mode, then utterance id.

    Raises:
        DecoderTransportError: The backend could not be reached; the run
            is abandoned.
    """

    def job(utterance: Utterance, mode: Mode) -> EvalRecord:
        try:
            decoder = factory(utterance.id)
        except DecoderTransportError:
            raise
        except (OnlineSTError, ValueError) as e:
            record = EvalRecord(
                id=utterance.id,
                direction=utterance.direction,
                mode=mode,
                output=TokenSequence(()),
                reference=utterance.reference,
                chunk_duration_s=manifest.chunk_duration_s,
                error=describe(e),
            )
            LOG.warning("%s (%s): %s", utterance.id, mode.value, record.error)
            return record
        try:
            return decode_utterance(manifest, utterance, mode, decoder)
        finally:
            decoder.close()

    executor = ThreadPoolExecutor(max_workers=parallelism)
    try:
        futures = [
            executor.submit(job, utterance, mode)
            for mode in modes
            for utterance in manifest.utterances
        ]
        records = [future.result() for future in futures]
    finally:
        executor.shutdown(wait=True, cancel_futures=True)

    return sorted(records, key=lambda r: (r.mode.value, r.id))


def write_records(records: Sequence[EvalRecord], out_dir: Path) -> list[Path]:
    """Write `<out_dir>/<mode>.jsonl`, one record per line."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for mode in Mode:
        selected = [r for r in records if r.mode is mode]
        if not selected:
            continue
        path = out_dir / f"{mode.value}.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for record in sorted(selected, key=lambda r: r.id):
                f.write(json.dumps(record.to_dict(), ensure_ascii=False))
                f.write("\n")
        paths.append(path)
    return paths


def read_records(
    path: Path, prefer: Mode = Mode.online
) -> list[EvalRecord]:
    """Read records from a JSONL file or an eval output directory.

    A directory holding both modes yields the `prefer` mode.

    Raises:
        ManifestError: Nothing to read, or a line is malformed.
    """
    if path.is_dir():
        candidates = [path / f"{mode.value}.jsonl" for mode in Mode]
        present = [p for p in candidates if p.is_file()]
        if not present:
            raise ManifestError(f"{path} holds no records")
        preferred = path / f"{prefer.value}.jsonl"
        path = preferred if preferred in present else present[0]

    records = []
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(EvalRecord.from_dict(json.loads(line)))
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise ManifestError(f"cannot read records from {path}: {e}") from e
    return records


@dataclass
class DirectionScore:
    """BLEU and mean latency of one direction."""

    direction: str
    bleu: float
    latency_s: Optional[float]
    utterances: int
    tokens: int


def score_records(
    direction: str,
    records: Sequence[EvalRecord],
    config: BleuConfig = BleuConfig(),
    pooling: str = "utterance",
) -> DirectionScore:
    """Corpus BLEU and latency of the records of one direction.

    Latency is the mean of per-utterance latencies, or with `token`
    pooling the mean over every output token of the direction. Utterances
    with no output have no latency and are left out of it.
    """
    logs = [r.latency_log for r in records]
    latency: Optional[float]
    try:
        if pooling == "token":
            latency = pooled_latency_seconds(logs)
        else:
            latency = statistics.fmean(
                latency_seconds(log) for log in logs if len(log)
            )
    except (UndefinedLatencyError, statistics.StatisticsError):
        latency = None

    return DirectionScore(
        direction=direction,
        bleu=bleu(
            [r.output.text() for r in records],
            [r.reference for r in records],
            config,
        ),
        latency_s=latency,
        utterances=len(records),
        tokens=sum(len(log) for log in logs),
    )


def summarize(
    records: Sequence[EvalRecord],
    config: BleuConfig = BleuConfig(),
    pooling: str = "utterance",
) -> list[DirectionScore]:
    """Score each direction; failed records are skipped."""
    by_direction: dict[str, list[EvalRecord]] = {}
    for record in records:
        if record.error is None:
            by_direction.setdefault(record.direction, []).append(record)
    return [
        score_records(direction, by_direction[direction], config, pooling)
        for direction in sorted(by_direction)
    ]


def compare(
    label: str, system: DirectionScore, baseline: Optional[DirectionScore]
) -> ReportRow:
    """Report row of system, with deltas when a baseline exists."""
    row = ReportRow(
        system=label,
        direction=system.direction,
        bleu=system.bleu,
        latency_s=system.latency_s,
    )
    if baseline is None:
        return row

    row.baseline_bleu = baseline.bleu
    row.delta_bleu, row.bleu_loss_pct = delta_bleu(system.bleu, baseline.bleu)
    row.baseline_latency_s = baseline.latency_s
    if system.latency_s is not None and baseline.latency_s:
        row.delta_latency_s, row.latency_gain_pct = delta_latency(
            system.latency_s, baseline.latency_s
        )
    return row


REPORT_AVERAGED = (
    "bleu",
    "baseline_bleu",
    "delta_bleu",
    "bleu_loss_pct",
    "latency_s",
    "baseline_latency_s",
    "delta_latency_s",
    "latency_gain_pct",
)


def average_rows(
    label: str,
    direction: str,
    rows: Sequence[ReportRow],
    weights: Optional[Sequence[float]] = None,
) -> ReportRow:
    """Mean of every numeric column over rows.

    Unweighted unless weights are given; columns undefined in some rows
    are averaged over the rows that define them.
    """
    weights = weights or [1.0] * len(rows)
    values: dict[str, Optional[float]] = {}
    for column in REPORT_AVERAGED:
        pairs = [
            (getattr(row, column), w)
            for row, w in zip(rows, weights)
            if getattr(row, column) is not None
        ]
        total = sum(w for _, w in pairs)
        values[column] = (
            sum(v * w for v, w in pairs) / total if total else None
        )
    average = ReportRow(label, direction, bleu=0.0, latency_s=None)
    for column, value in values.items():
        setattr(average, column, value)
    return average


def build_report(
    system: Sequence[EvalRecord],
    baseline: Optional[Sequence[EvalRecord]] = None,
    label: str = "system",
    config: BleuConfig = BleuConfig(),
    average: str = "direction",
    pooling: str = "utterance",
    groups: Optional[dict[str, list[str]]] = None,
) -> list[ReportRow]:
    """Per-direction rows of system against baseline, then averages.

    The `Avg.` row is the unweighted mean of the per-direction rows, or
    weighted by utterance count with `average="utterance"`. Each entry of
    groups adds an `Avg. <group>` row over the named directions.

    Raises:
        PairingError: system and baseline cover different utterances.
    """
    if baseline is not None:
        ids = {r.id for r in system}
        baseline_ids = {r.id for r in baseline}
        if ids != baseline_ids:
            missing = sorted(ids ^ baseline_ids)
            raise PairingError(
                f"system and baseline differ on {len(missing)} utterances, "
                f"e.g. {missing[:5]}"
            )
        failed = {r.id for r in [*system, *baseline] if r.error is not None}
        if failed:
            LOG.warning("%d utterances failed; left out", len(failed))
        system = [r for r in system if r.id not in failed]
        baseline = [r for r in baseline if r.id not in failed]

    scores = summarize(system, config, pooling)
    baseline_scores = {
        s.direction: s for s in summarize(baseline or [], config, pooling)
    }
    rows = [
        compare(label, score, baseline_scores.get(score.direction))
        for score in scores
    ]
    if not rows:
        return rows

    def weights(selected: Sequence[DirectionScore]) -> Optional[list[float]]:
        if average == "utterance":
            return [float(s.utterances) for s in selected]
        return None

    report = list(rows)
    report.append(average_rows(label, AVERAGE, rows, weights(scores)))
    for group, directions in (groups or {}).items():
        members = [
            (row, score)
            for row, score in zip(rows, scores)
            if score.direction in directions
        ]
        if members:
            report.append(
                average_rows(
                    label,
                    f"{AVERAGE} {group}",
                    [row for row, _ in members],
                    weights([score for _, score in members]),
                )
            )
    return report


def count_failures(records: Iterable[EvalRecord]) -> int:
    """Number of records that carry an error."""
    return sum(1 for r in records if r.error is not None)
