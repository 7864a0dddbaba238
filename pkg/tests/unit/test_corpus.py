"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

import json
import random

import pytest

from onlinest_core.corpus import (
    HISTOGRAM_BINS,
    PARTIAL_SUFFIX,
    RATIO_HI,
    RATIO_LO,
    CorpusExample,
    ExampleKind,
    FrameSource,
    MixManifest,
    MixStats,
    build_mix,
    draw_ratio,
    make_partial,
    read_examples,
    stats_path,
    truncated_length,
)
from onlinest_core.errors import ManifestError
from onlinest_core.tokens import TokenSequence


def text_example(id: str, n_source: int, n_target: int) -> CorpusExample:
    return CorpusExample(
        id,
        TokenSequence(tuple(f"s{i}" for i in range(n_source))),
        TokenSequence(tuple(f"t{i}" for i in range(n_target))),
    )


def corpus(n: int) -> list[CorpusExample]:
    rng = random.Random(n)
    return [
        text_example(f"ex{i}", rng.randint(1, 40), rng.randint(1, 40))
        for i in range(n)
    ]


@pytest.mark.parametrize(
    "length,ratio,expected",
    [
        (10, 0.30, 3),
        (1000, 0.10, 100),
        (3, 0.10, 1),
        (100, 0.29, 29),
        (1, 0.40, 1),
    ],
)
def test_truncated_length(length, ratio, expected) -> None:
    assert truncated_length(length, ratio) == expected


def test_make_partial_text() -> None:
    partial = make_partial(text_example("a", 20, 10), 0.30)
    assert partial.id == "a" + PARTIAL_SUFFIX
    assert partial.kind is ExampleKind.partial
    assert partial.ratio == 0.30
    assert partial.target.tokens == ("t0", "t1", "t2")
    assert partial.source.tokens == tuple(f"s{i}" for i in range(6))


def test_make_partial_frames() -> None:
    full = CorpusExample(
        "talk1",
        FrameSource("audio/talk1.raw", 1000, offset=5),
        TokenSequence.from_text("a b c"),
    )
    partial = make_partial(full, 0.10)
    assert partial.source == FrameSource("audio/talk1.raw", 100, offset=5)
    assert partial.target == TokenSequence.from_text("a")


@pytest.mark.parametrize("ratio", [0.05, 0.41, 1.0])
def test_make_partial_ratio_out_of_range(ratio) -> None:
    with pytest.raises(ValueError):
        make_partial(text_example("a", 5, 5), ratio)


def test_make_partial_needs_full_example() -> None:
    partial = make_partial(text_example("a", 5, 5), 0.2)
    with pytest.raises(ValueError):
        make_partial(partial, 0.2)


def test_example_invariants() -> None:
    with pytest.raises(ValueError):
        CorpusExample("a", TokenSequence(("x",)), TokenSequence())
    with pytest.raises(ValueError):
        CorpusExample(
            "a", TokenSequence(("x",)), TokenSequence(("y",)), ratio=0.2
        )
    with pytest.raises(ValueError):
        CorpusExample(
            "a",
            TokenSequence(("x",)),
            TokenSequence(("y",)),
            ExampleKind.partial,
        )
    with pytest.raises(ValueError):
        FrameSource("f", 0)


def test_example_dict_schema() -> None:
    example = CorpusExample(
        "a",
        FrameSource("f.raw", 50, offset=10),
        TokenSequence(("x", "y")),
        ExampleKind.partial,
        0.25,
    )
    assert example.to_dict() == {
        "id": "a",
        "source": {"frames": "f.raw", "count": 50, "offset": 10},
        "target": ["x", "y"],
        "kind": "partial",
        "ratio": 0.25,
    }
    assert CorpusExample.from_dict(example.to_dict()) == example

    with pytest.raises(ManifestError):
        CorpusExample.from_dict({"id": "a", "target": ["x"]})


def test_build_mix_is_one_to_one() -> None:
    full = corpus(10_000)
    manifest = build_mix(full, seed=42)

    assert len(manifest) == 20_000
    assert manifest.stats.counts == {"full": 10_000, "partial": 10_000}
    assert sum(manifest.stats.histogram) == 10_000

    by_id = {example.id: example for example in manifest.examples}
    for example in manifest.examples:
        if example.kind is ExampleKind.full:
            continue
        assert example.ratio is not None
        assert RATIO_LO <= example.ratio <= RATIO_HI
        stem = example.id[: -len(PARTIAL_SUFFIX)]
        counterpart = by_id[stem]
        assert counterpart.kind is ExampleKind.full
        assert counterpart.target.startswith(example.target)
        if len(counterpart.target) >= 2:
            assert len(example.target) < len(counterpart.target)


def test_build_mix_shuffles() -> None:
    manifest = build_mix(corpus(50), seed=1)
    kinds = [example.kind for example in manifest.examples]
    assert kinds != [ExampleKind.full, ExampleKind.partial] * 50


def test_build_mix_is_reproducible(tmp_path) -> None:
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    build_mix(corpus(500), seed=7).write(first)
    build_mix(corpus(500), seed=7).write(second)
    assert first.read_bytes() == second.read_bytes()
    assert stats_path(first).read_bytes() == stats_path(second).read_bytes()

    third = tmp_path / "c.jsonl"
    build_mix(corpus(500), seed=8).write(third)
    assert first.read_bytes() != third.read_bytes()


def test_build_mix_rejects_bad_input() -> None:
    with pytest.raises(ManifestError):
        build_mix([], seed=0)
    with pytest.raises(ManifestError):
        build_mix([text_example("a", 2, 2), text_example("a", 3, 3)], 0)
    partial = make_partial(text_example("a", 5, 5), 0.2)
    with pytest.raises(ManifestError):
        build_mix([partial], seed=0)
    with pytest.raises(ValueError):
        build_mix(corpus(3), seed=0, lo=0.5, hi=0.2)


def test_ratios_are_uniform() -> None:
    stats = pytest.importorskip("scipy.stats")
    rng = random.Random(2024)
    n = 100_000
    width = (RATIO_HI - RATIO_LO) / HISTOGRAM_BINS
    observed = [0] * HISTOGRAM_BINS
    for _ in range(n):
        ratio = draw_ratio(rng, RATIO_LO, RATIO_HI)
        assert RATIO_LO <= ratio <= RATIO_HI
        i = min(int((ratio - RATIO_LO) / width), HISTOGRAM_BINS - 1)
        observed[i] += 1

    result = stats.chisquare(observed)
    assert result.pvalue > 0.01


def test_write_and_read_manifest(tmp_path) -> None:
    manifest = build_mix(corpus(20), seed=3)
    path = tmp_path / "mix.jsonl"
    sidecar = manifest.write(path)

    assert sidecar == tmp_path / "mix.jsonl.stats.json"
    assert read_examples(path) == manifest.examples

    stats = json.loads(sidecar.read_text())
    assert stats["seed"] == 3
    assert stats["lo"] == RATIO_LO and stats["hi"] == RATIO_HI
    assert stats["counts"] == {"full": 20, "partial": 20}
    assert len(stats["histogram"]["edges"]) == HISTOGRAM_BINS + 1
    assert sum(stats["histogram"]["counts"]) == 20


def test_read_examples_reports_line(tmp_path) -> None:
    path = tmp_path / "corpus.jsonl"
    path.write_text(
        '{"id": "a", "source": {"tokens": ["x"]}, "target": ["y"]}\n'
        "\n"
        "not json\n"
    )
    with pytest.raises(ManifestError, match="corpus.jsonl:3"):
        read_examples(path)


def test_stats_histogram_bins() -> None:
    examples = [
        make_partial(text_example(f"e{i}", 10, 10), ratio)
        for i, ratio in enumerate([0.10, 0.149, 0.151, 0.27, 0.40])
    ]
    stats = MixStats.compute(examples, RATIO_LO, RATIO_HI)
    assert stats.counts == {"full": 0, "partial": 5}
    assert stats.histogram == [2, 1, 0, 1, 0, 1]
    assert stats.edges[0] == pytest.approx(0.10)
    assert stats.edges[-1] == pytest.approx(0.40)


def test_manifest_stats_from_examples() -> None:
    full = corpus(4)
    manifest = MixManifest(full, seed=0)
    assert manifest.stats.counts == {"full": 4, "partial": 0}
    assert manifest.stats.histogram == [0] * HISTOGRAM_BINS
