"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.

Partial-input training mixes.

Every full example is paired with a copy whose target keeps only a leading
fraction of its tokens, and whose source keeps the same fraction of its
frames (or tokens). Frames are referenced by path and offset, never copied.
"""

import json
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .errors import ManifestError
from .tokens import TokenSequence

LOG = logging.getLogger(__name__)

RATIO_LO = 0.10
RATIO_HI = 0.40
HISTOGRAM_BINS = 6
PARTIAL_SUFFIX = "#partial"

# floor(0.29 * 100) must be 29, not 28.
_EPSILON = 1e-9


class ExampleKind(Enum):
    """Whether an example is complete or a truncated copy."""

    full = "full"
    partial = "partial"


@dataclass(frozen=True)
class FrameSource:
    """`count` frames starting at frame `offset` of the file at `path`."""

    path: str
    count: int
    offset: int = 0

    def __post_init__(self) -> None:
        """Validate the frame range."""
        if self.count < 1:
            raise ValueError(f"frame count must be >= 1: {self.count}")
        if self.offset < 0:
            raise ValueError(f"frame offset must be >= 0: {self.offset}")

    def __len__(self) -> int:
        """Number of frames."""
        return self.count


Source = Union[FrameSource, TokenSequence]


@dataclass(frozen=True)
class CorpusExample:
    """One training pair."""

    id: str
    source: Source
    target: TokenSequence
    kind: ExampleKind = ExampleKind.full
    ratio: Optional[float] = None

    def __post_init__(self) -> None:
        """Partial examples carry a ratio, full ones do not."""
        if not self.target:
            raise ValueError(f"{self.id}: target must not be empty")
        if (self.kind is ExampleKind.partial) != (self.ratio is not None):
            raise ValueError(
                f"{self.id}: only partial examples carry a ratio"
            )

    def to_dict(self) -> dict[str, Any]:
        """Manifest line for this example."""
        source: dict[str, Any]
        if isinstance(self.source, FrameSource):
            source = {"frames": self.source.path, "count": self.source.count}
            if self.source.offset:
                source["offset"] = self.source.offset
        else:
            source = {"tokens": list(self.source.tokens)}
        line: dict[str, Any] = {
            "id": self.id,
            "source": source,
            "target": list(self.target.tokens),
            "kind": self.kind.value,
        }
        if self.ratio is not None:
            line["ratio"] = self.ratio
        return line

    @classmethod
    def from_dict(cls, line: dict[str, Any]) -> "CorpusExample":
        """Parse a manifest line.

        Raises:
            ManifestError: Required fields are missing or malformed.
        """
        try:
            source_spec = line["source"]
            source: Source
            if "tokens" in source_spec:
                source = TokenSequence(tuple(source_spec["tokens"]))
            else:
                source = FrameSource(
                    str(source_spec["frames"]),
                    int(source_spec["count"]),
                    int(source_spec.get("offset", 0)),
                )
            return cls(
                id=str(line["id"]),
                source=source,
                target=TokenSequence(tuple(line["target"])),
                kind=ExampleKind(line.get("kind", "full")),
                ratio=line.get("ratio"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed example: {e}") from e


def truncated_length(length: int, ratio: float) -> int:
    """Leading items kept from length items: floor(ratio * length), >= 1."""
    return max(1, math.floor(ratio * length + _EPSILON))


def make_partial(
    example: CorpusExample,
    ratio: float,
    lo: float = RATIO_LO,
    hi: float = RATIO_HI,
) -> CorpusExample:
    """Truncate source and target of a full example to the same fraction.

    Args:
        example: A full example.
        ratio: Fraction of tokens and frames to keep, in [lo, hi].
        lo: Smallest allowed ratio.
        hi: Largest allowed ratio.

    Returns:
        CorpusExample: The partial copy, id suffixed with "#partial".

    Raises:
        ValueError: ratio is out of range or example is already partial.
    """
    if example.kind is not ExampleKind.full:
        raise ValueError(f"{example.id}: only full examples can be cut")
    if not lo <= ratio <= hi:
        raise ValueError(f"ratio {ratio} outside [{lo}, {hi}]")

    source: Source
    if isinstance(example.source, FrameSource):
        source = FrameSource(
            example.source.path,
            truncated_length(example.source.count, ratio),
            example.source.offset,
        )
    else:
        source = example.source[
            : truncated_length(len(example.source), ratio)
        ]

    return CorpusExample(
        id=example.id + PARTIAL_SUFFIX,
        source=source,
        target=example.target[: truncated_length(len(example.target), ratio)],
        kind=ExampleKind.partial,
        ratio=ratio,
    )


def draw_ratio(rng: random.Random, lo: float, hi: float) -> float:
    """Draw one truncation ratio uniformly from [lo, hi]."""
    return rng.uniform(lo, hi)


@dataclass
class MixStats:
    """Counts per kind and a histogram of partial ratios."""

    counts: dict[str, int]
    edges: list[float]
    histogram: list[int]

    @classmethod
    def compute(
        cls,
        examples: Iterable[CorpusExample],
        lo: float,
        hi: float,
        bins: int = HISTOGRAM_BINS,
    ) -> "MixStats":
        """Tally examples; ratios fall into `bins` equal bins of [lo, hi]."""
        counts = {kind.value: 0 for kind in ExampleKind}
        histogram = [0] * bins
        width = (hi - lo) / bins
        for example in examples:
            counts[example.kind.value] += 1
            if example.ratio is None:
                continue
            i = int((example.ratio - lo) / width) if width > 0 else 0
            histogram[min(max(i, 0), bins - 1)] += 1
        edges = [lo + i * width for i in range(bins + 1)]
        return cls(counts, edges, histogram)

    def to_dict(self) -> dict[str, Any]:
        """Sidecar contents."""
        return {
            "counts": self.counts,
            "histogram": {"edges": self.edges, "counts": self.histogram},
        }


@dataclass
class MixManifest:
    """An ordered training mix and the seed that produced it."""

    examples: list[CorpusExample]
    seed: int
    lo: float = RATIO_LO
    hi: float = RATIO_HI
    stats: MixStats = field(init=False)

    def __post_init__(self) -> None:
        """Populate stats."""
        self.stats = MixStats.compute(self.examples, self.lo, self.hi)

    def __len__(self) -> int:
        """Number of examples."""
        return len(self.examples)

    def to_jsonl(self) -> str:
        """One JSON object per example, in manifest order."""
        return "".join(
            json.dumps(example.to_dict(), ensure_ascii=False) + "\n"
            for example in self.examples
        )

    def stats_json(self) -> str:
        """Statistics sidecar, including the seed and ratio range."""
        sidecar = {"seed": self.seed, "lo": self.lo, "hi": self.hi}
        sidecar.update(self.stats.to_dict())
        return json.dumps(sidecar, indent=2) + "\n"

    def write(self, path: Path) -> Path:
        """Write the manifest to path and stats next to it.

        Returns:
            Path: The stats sidecar, `<path>.stats.json`.
        """
        path.write_text(self.to_jsonl(), encoding="utf-8")
        sidecar = stats_path(path)
        sidecar.write_text(self.stats_json(), encoding="utf-8")
        LOG.info("wrote %d examples to %s", len(self), path)
        return sidecar


def stats_path(path: Path) -> Path:
    """Where the stats sidecar of the manifest at path lives."""
    return path.with_name(path.name + ".stats.json")


def read_examples(path: Path) -> list[CorpusExample]:
    """Read a JSON Lines corpus or manifest.

    Raises:
        ManifestError: A line is not a valid example.
    """
    examples = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                examples.append(CorpusExample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ManifestError) as e:
                raise ManifestError(f"{path}:{number}: {e}") from e
    return examples


def build_mix(
    corpus: list[CorpusExample],
    seed: int,
    lo: float = RATIO_LO,
    hi: float = RATIO_HI,
) -> MixManifest:
    """Pair every full example with a partial copy and shuffle.

    One seeded generator draws every ratio in corpus order and then
    shuffles, so the same corpus and seed always give the same manifest.

    Raises:
        ManifestError: The corpus is empty, has duplicate ids or holds
            partial examples.
        ValueError: lo and hi do not describe a range within [0, 1].
    """
    if not 0 <= lo <= hi <= 1:
        raise ValueError(f"invalid ratio range [{lo}, {hi}]")
    if not corpus:
        raise ManifestError("corpus is empty")

    seen: set[str] = set()
    for example in corpus:
        if example.id in seen:
            raise ManifestError(f"duplicate id: {example.id}")
        if example.kind is not ExampleKind.full:
            raise ManifestError(f"{example.id}: input must be full examples")
        seen.add(example.id)

    rng = random.Random(seed)
    examples = []
    for example in corpus:
        examples.append(example)
        examples.append(make_partial(example, draw_ratio(rng, lo, hi), lo, hi))
    rng.shuffle(examples)
    return MixManifest(examples, seed, lo, hi)
