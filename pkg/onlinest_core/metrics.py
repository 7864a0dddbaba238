"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Quality and latency metrics.

Latency is the mean, over output tokens, of the time at which the chunk
that committed the token ended. When a token was spoken is unknown without
word alignments and is the same for every system, so only differences
between systems are meaningful.

BLEU follows the sacreBLEU signature
`BLEU+case.mixed+numrefs.1+smooth.exp+tok.13a`.
"""

import json
import math
import re
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, NamedTuple, Optional, Sequence

from .errors import UndefinedLatencyError
from .policy import CommitEvent


class Emission(NamedTuple):
    """One output token and the chunk that committed it."""

    token: str
    chunk_index: int


@dataclass
class LatencyLog:
    """Per-token emission records of one finished stream."""

    emissions: list[Emission]
    chunk_duration_s: float
    total_chunks: int

    def __post_init__(self) -> None:
        """Check every chunk index lies within the stream."""
        if self.chunk_duration_s <= 0:
            raise ValueError("chunk duration must be positive")
        for emission in self.emissions:
            if not 1 <= emission.chunk_index <= self.total_chunks:
                raise ValueError(
                    f"chunk index {emission.chunk_index} outside "
                    f"1..{self.total_chunks}"
                )

    @classmethod
    def from_commits(
        cls,
        commit_log: Iterable[CommitEvent],
        chunk_duration_s: float,
        total_chunks: int,
    ) -> "LatencyLog":
        """Expand each commit event into one record per token."""
        return cls(
            [
                Emission(token, event.chunk_index)
                for event in commit_log
                for token in event.tokens
            ],
            chunk_duration_s,
            total_chunks,
        )

    def timestamps(self) -> list[float]:
        """Output time of every token, in seconds."""
        return [e.chunk_index * self.chunk_duration_s for e in self.emissions]

    def __len__(self) -> int:
        """Number of output tokens."""
        return len(self.emissions)


def latency_seconds(log: LatencyLog) -> float:
    """Mean output time of the tokens in log.

    Raises:
        UndefinedLatencyError: log has no tokens.
    """
    if not log.emissions:
        raise UndefinedLatencyError("latency of an empty output is undefined")
    return statistics.fmean(log.timestamps())


def pooled_latency_seconds(logs: Iterable[LatencyLog]) -> float:
    """Mean output time over the tokens of several logs pooled together.

    Raises:
        UndefinedLatencyError: No log has any token.
    """
    timestamps = [t for log in logs for t in log.timestamps()]
    if not timestamps:
        raise UndefinedLatencyError("latency of an empty output is undefined")
    return statistics.fmean(timestamps)


class Delta(NamedTuple):
    """Baseline minus system, absolute and as a percentage of baseline."""

    absolute: float
    percent: Optional[float]


def delta_latency(system: float, baseline: float) -> Delta:
    """Latency gain of system over baseline.

    Raises:
        ValueError: baseline is not positive.
    """
    if baseline <= 0:
        raise ValueError(f"baseline latency must be positive: {baseline}")
    gain = baseline - system
    return Delta(gain, 100 * gain / baseline)


def delta_bleu(system: float, baseline: float) -> Delta:
    """BLEU loss of system against baseline.

    The percentage is None when baseline is zero.

    Raises:
        ValueError: A score lies outside [0, 100].
    """
    for score in (system, baseline):
        if not 0 <= score <= 100:
            raise ValueError(f"BLEU must lie in [0, 100]: {score}")
    loss = baseline - system
    return Delta(loss, 100 * loss / baseline if baseline else None)


@dataclass(frozen=True)
class BleuConfig:
    """Corpus BLEU settings; defaults match the sacreBLEU signature."""

    max_order: int = 4
    smooth_method: str = "exp"
    smooth_value: Optional[float] = None
    lowercase: bool = False
    tokenize: str = "13a"

    def __post_init__(self) -> None:
        """Reject unsupported options."""
        if self.smooth_method not in ("exp", "floor", "none"):
            raise ValueError(f"unknown smoothing: {self.smooth_method}")
        if self.tokenize not in TOKENIZERS:
            raise ValueError(f"unknown tokenizer: {self.tokenize}")
        if self.max_order < 1:
            raise ValueError("max order must be >= 1")

    def signature(self) -> str:
        """sacreBLEU style signature of these settings."""
        return "+".join(
            [
                "BLEU",
                f"case.{'lc' if self.lowercase else 'mixed'}",
                "numrefs.1",
                f"smooth.{self.smooth_method}",
                f"tok.{self.tokenize}",
            ]
        )


_13A_RULES = [
    # language-dependent part (assuming Western languages)
    (re.compile(r'([\{-\~\[-\` -\&\(-\+\:-\@\/])'), r" \1 "),
    # period and comma unless preceded by a digit
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    # period and comma unless followed by a digit
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    # dash when preceded by a digit
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> str:
    """Tokenize like mteval-v13a, the WMT reference tokenizer.

    Args:
        line: A detokenized segment.

    Returns:
        str: Space-separated tokens.
    """
    line = line.replace("<skipped>", "")
    line = line.replace("-\n", "")
    line = line.replace("\n", " ")
    if "&" in line:
        line = line.replace('&quot;', '"')
        line = line.replace("&amp;", "&")
        line = line.replace("&lt;", "<")
        line = line.replace("&gt;", ">")

    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return " ".join(line.split())


def tokenize_none(line: str) -> str:
    """Leave the segment as it is, apart from whitespace."""
    return " ".join(line.split())


TOKENIZERS = {"13a": tokenize_13a, "none": tokenize_none}


def _log(value: float) -> float:
    return math.log(value) if value > 0 else -9999999999.0


def extract_ngrams(tokens: Sequence[str], max_order: int) -> Counter:
    """Count every n-gram of tokens with 1 <= n <= max_order."""
    ngrams: Counter = Counter()
    for n in range(1, max_order + 1):
        for i in range(len(tokens) - n + 1):
            ngrams[tuple(tokens[i : i + n])] += 1
    return ngrams


@dataclass
class BleuScore:
    """A corpus BLEU score with its sufficient statistics."""

    score: float
    counts: list[int]
    totals: list[int]
    precisions: list[float]
    bp: float
    sys_len: int
    ref_len: int
    signature: str = field(default="")

    def format(self, width: int = 2) -> str:
        """One-line summary in the sacreBLEU layout."""
        precisions = "/".join(f"{p:.1f}" for p in self.precisions)
        ratio = self.sys_len / self.ref_len if self.ref_len else 0.0
        return (
            f"BLEU = {self.score:.{width}f} {precisions} "
            f"(BP = {self.bp:.3f} ratio = {ratio:.3f} "
            f"hyp_len = {self.sys_len:d} ref_len = {self.ref_len:d})"
        )


def bleu_stats(
    hypotheses: Sequence[str],
    references: Sequence[str],
    config: BleuConfig = BleuConfig(),
) -> BleuScore:
    """Corpus BLEU with one reference per hypothesis.

    Raises:
        ValueError: The lists are empty or of different lengths.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"{len(hypotheses)} hypotheses but {len(references)} references"
        )
    if not hypotheses:
        raise ValueError("BLEU needs at least one segment")

    order = config.max_order
    tokenize = TOKENIZERS[config.tokenize]
    correct = [0] * order
    total = [0] * order
    sys_len = ref_len = 0

    for hypothesis, reference in zip(hypotheses, references):
        if config.lowercase:
            hypothesis, reference = hypothesis.lower(), reference.lower()
        hyp = tokenize(hypothesis.rstrip()).split()
        ref = tokenize(reference.rstrip()).split()
        sys_len += len(hyp)
        ref_len += len(ref)

        hyp_ngrams = extract_ngrams(hyp, order)
        ref_ngrams = extract_ngrams(ref, order)
        for ngram, count in hyp_ngrams.items():
            correct[len(ngram) - 1] += min(count, ref_ngrams[ngram])
            total[len(ngram) - 1] += count

    return compute_bleu(correct, total, sys_len, ref_len, config)


def compute_bleu(
    correct: list[int],
    total: list[int],
    sys_len: int,
    ref_len: int,
    config: BleuConfig = BleuConfig(),
) -> BleuScore:
    """Turn n-gram statistics into a BLEU score.

    `exp` smoothing halves the credit of each successive order with no
    match; orders with no n-grams at all end the product early, which
    scores such corpora as zero.
    """
    order = config.max_order
    precisions = [0.0] * order
    signature = config.signature()

    bp = 1.0
    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0

    if not any(correct):
        return BleuScore(
            0.0, correct, total, precisions, bp, sys_len, ref_len, signature
        )

    smooth_value = config.smooth_value
    if smooth_value is None:
        smooth_value = 0.1
    smooth_mteval = 1.0
    for n in range(order):
        if total[n] == 0:
            break
        if correct[n] == 0:
            if config.smooth_method == "exp":
                smooth_mteval *= 2
                precisions[n] = 100.0 / (smooth_mteval * total[n])
            elif config.smooth_method == "floor":
                precisions[n] = 100.0 * smooth_value / total[n]
        else:
            precisions[n] = 100.0 * correct[n] / total[n]

    # exp of the mean log can land a hair above 100 on exact matches
    score = min(100.0, bp * math.exp(sum(map(_log, precisions)) / order))
    return BleuScore(
        score, correct, total, precisions, bp, sys_len, ref_len, signature
    )


def bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    config: BleuConfig = BleuConfig(),
) -> float:
    """Corpus BLEU score in [0, 100]. See bleu_stats."""
    return bleu_stats(hypotheses, references, config).score


REPORT_COLUMNS = (
    "system",
    "direction",
    "bleu",
    "baseline_bleu",
    "delta_bleu",
    "bleu_loss_pct",
    "latency_s",
    "baseline_latency_s",
    "delta_latency_s",
    "latency_gain_pct",
)


@dataclass
class ReportRow:
    """One line of a quality/latency comparison table."""

    system: str
    direction: str
    bleu: float
    latency_s: Optional[float]
    baseline_bleu: Optional[float] = None
    baseline_latency_s: Optional[float] = None
    delta_bleu: Optional[float] = None
    bleu_loss_pct: Optional[float] = None
    delta_latency_s: Optional[float] = None
    latency_gain_pct: Optional[float] = None

    def values(self) -> dict[str, Any]:
        """Column values in report order, numbers rounded to 2 places."""
        row = asdict(self)
        return {
            column: round(row[column], 2)
            if isinstance(row[column], float)
            else row[column]
            for column in REPORT_COLUMNS
        }

    def to_tsv(self) -> str:
        """Tab-separated line; undefined values are empty cells."""
        cells = []
        for value in self.values().values():
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(f"{value:.2f}")
            else:
                cells.append(str(value))
        return "\t".join(cells)

    def to_json(self) -> str:
        """One JSON object; undefined values are null."""
        return json.dumps(self.values(), ensure_ascii=False)


def format_report(rows: Iterable[ReportRow], fmt: str = "tsv") -> str:
    """Render rows as TSV (with header) or JSON Lines.

    Raises:
        ValueError: Unknown format.
    """
    if fmt == "tsv":
        lines = ["\t".join(REPORT_COLUMNS)]
        lines.extend(row.to_tsv() for row in rows)
    elif fmt == "json":
        lines = [row.to_json() for row in rows]
    else:
        raise ValueError(f"unknown report format: {fmt}")
    return "\n".join(lines) + "\n"
