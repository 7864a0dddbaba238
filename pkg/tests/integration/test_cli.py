"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

import json
from pathlib import Path

import pytest
import yaml
from typer.testing import CliRunner

from onlinest_core.api import EXIT_FATAL, EXIT_PARTIAL
from onlinest_core.app import app
from onlinest_core.evaluation import EvalAPI
from onlinest_core.main import main  # noqa: F401
from onlinest_core.metrics import REPORT_COLUMNS
from onlinest_core.mixing import CorpusAPI
from onlinest_core.streaming import StreamAPI, format_envelope

runner = CliRunner()


def invoke(*args: str):
    return runner.invoke(app.commands, list(args))


@pytest.fixture
def eval_out(files, tmp_path) -> Path:
    out = tmp_path / "run"
    result = invoke(
        *EvalAPI.command(
            "run",
            "--manifest",
            str(files / "eval_nature.yml"),
            "--out",
            str(out),
        )
    )
    assert result.exit_code == 0, result.output
    return out


def test_eval_run(eval_out) -> None:
    assert (eval_out / "online.jsonl").is_file()
    assert (eval_out / "offline.jsonl").is_file()

    summary = (eval_out / "summary.tsv").read_text().splitlines()
    assert summary[0].split("\t") == list(REPORT_COLUMNS)
    row = dict(zip(REPORT_COLUMNS, summary[1].split("\t")))
    assert row["system"] == "online"
    assert row["direction"] == "es-en"
    assert row["bleu"] == "100.00"
    assert row["baseline_latency_s"] == "2.00"
    assert float(row["latency_gain_pct"]) == pytest.approx(18.75, abs=0.01)

    (online,) = [
        json.loads(line)
        for line in (eval_out / "online.jsonl").read_text().splitlines()
    ]
    assert online["output"] == "Nature can tell us"
    assert online["latency_s"] == pytest.approx(1.625)
    assert [c["chunk"] for c in online["commits"]] == [2, 3, 4, 4]


def test_eval_run_single_mode(files, tmp_path) -> None:
    result = invoke(
        *EvalAPI.command(
            "run",
            "--manifest",
            str(files / "eval_nature.yml"),
            "--out",
            str(tmp_path),
            "--mode",
            "online",
            "--depth",
            "3",
        )
    )
    assert result.exit_code == 0, result.output
    assert not (tmp_path / "offline.jsonl").exists()
    (online,) = (tmp_path / "online.jsonl").read_text().splitlines()
    commits = json.loads(online)["commits"]
    assert [c["tokens"] for c in commits] == [
        ["Nature"],
        ["can"],
        ["tell", "us"],
    ]


@pytest.mark.parametrize("option,value", [("--depth", "1"), ("--chunk", "0")])
def test_eval_run_rejects_bad_overrides(
    files, tmp_path, option, value
) -> None:
    result = invoke(
        *EvalAPI.command(
            "run",
            "--manifest",
            str(files / "eval_nature.yml"),
            "--out",
            str(tmp_path / "out"),
            "--mode",
            "online",
            option,
            value,
        )
    )
    assert result.exit_code == EXIT_FATAL, result.output
    assert "error:" in result.output
    assert not (tmp_path / "out" / "online.jsonl").exists()


def test_eval_run_with_failures(files, tmp_path) -> None:
    manifest = yaml.safe_load((files / "eval_nature.yml").read_text())
    manifest["backend"]["transcripts"]["*"] = ["Nature", "Nature can"]
    path = tmp_path / "eval.yml"
    path.write_text(yaml.safe_dump(manifest))

    result = invoke(
        *EvalAPI.command(
            "run", "--manifest", str(path), "--out", str(tmp_path / "out")
        )
    )
    assert result.exit_code == EXIT_PARTIAL
    assert "2 utterances failed" in result.output
    record = json.loads((tmp_path / "out" / "online.jsonl").read_text())
    assert "ScriptExhausted" in record["error"]


def test_eval_run_without_manifest(tmp_path) -> None:
    result = invoke(
        *EvalAPI.command(
            "run",
            "--manifest",
            str(tmp_path / "missing.yml"),
            "--out",
            str(tmp_path),
        )
    )
    assert result.exit_code == EXIT_FATAL
    assert "error:" in result.output


def test_eval_report(eval_out, tmp_path) -> None:
    report = tmp_path / "report.tsv"
    result = invoke(
        *EvalAPI.command(
            "report",
            "--system",
            f"agree2={eval_out}",
            "--baseline",
            str(eval_out),
            "--group",
            "EU=es-en",
            "--out",
            str(report),
        )
    )
    assert result.exit_code == 0, result.output
    lines = report.read_text().splitlines()
    assert [line.split("\t")[:2] for line in lines[1:]] == [
        ["agree2", "es-en"],
        ["agree2", "Avg."],
        ["agree2", "Avg. EU"],
    ]


def test_eval_report_json(eval_out) -> None:
    result = invoke(
        *EvalAPI.command(
            "report", "--system", str(eval_out), "--format", "json"
        )
    )
    assert result.exit_code == 0, result.output
    rows = [json.loads(line) for line in result.output.splitlines()]
    assert rows[0]["system"] == "run"
    assert rows[0]["baseline_bleu"] is None
    assert rows[0]["latency_s"] == pytest.approx(1.62, abs=0.01)


def test_eval_report_pairing_error(eval_out, tmp_path, files) -> None:
    manifest = yaml.safe_load((files / "eval_nature.yml").read_text())
    manifest["utterances"][0]["id"] = "other"
    path = tmp_path / "other.yml"
    path.write_text(yaml.safe_dump(manifest))
    other = tmp_path / "other"
    invoke(
        *EvalAPI.command("run", "--manifest", str(path), "--out", str(other))
    )

    result = invoke(
        *EvalAPI.command(
            "report", "--system", str(other), "--baseline", str(eval_out)
        )
    )
    assert result.exit_code == EXIT_FATAL
    assert "differ on 2 utterances" in result.output


def write_corpus(path: Path, ids: list[str]) -> None:
    path.write_text(
        "".join(
            json.dumps(
                {
                    "id": id,
                    "source": {"frames": f"{id}.raw", "count": 300},
                    "target": ["w"] * 20,
                }
            )
            + "\n"
            for id in ids
        )
    )


def test_corpus_mix_and_stats(tmp_path) -> None:
    corpus, out = tmp_path / "corpus.jsonl", tmp_path / "mix.jsonl"
    write_corpus(corpus, [f"talk{i}" for i in range(10)])

    result = invoke(
        *CorpusAPI.command(
            "mix", "--in", str(corpus), "--out", str(out), "--seed", "9"
        )
    )
    assert result.exit_code == 0, result.output
    assert "10 full, 10 partial" in result.output
    sidecar = json.loads((tmp_path / "mix.jsonl.stats.json").read_text())
    assert sidecar["seed"] == 9

    result = invoke(*CorpusAPI.command("stats", "--in", str(out)))
    assert result.exit_code == 0, result.output
    stats = json.loads(result.output)
    assert stats["counts"] == {"full": 10, "partial": 10}
    assert sum(stats["histogram"]["counts"]) == 10


def test_corpus_mix_rejects_duplicates(tmp_path) -> None:
    corpus = tmp_path / "corpus.jsonl"
    write_corpus(corpus, ["a", "a"])
    result = invoke(
        *CorpusAPI.command(
            "mix", "--in", str(corpus), "--out", str(tmp_path / "mix.jsonl")
        )
    )
    assert result.exit_code == EXIT_FATAL
    assert "duplicate id: a" in result.output


def test_stream_replay(stream_server, tmp_path) -> None:
    tokens = tmp_path / "tokens.txt"
    tokens.write_text("la naturaleza\nnos\npuede\ndecir\n")
    host, port = stream_server.address

    result = invoke(
        *StreamAPI.command(
            "replay", "--connect", f"{host}:{port}", "--tokens", str(tokens)
        )
    )
    assert result.exit_code == 0, result.output
    assert result.output.splitlines() == [
        "1\t",
        "2\tNature",
        "3\tcan",
        "4\ttell",
        "4\tus\t[final]",
        "latency 1.62s over 4 tokens in 4 chunks",
    ]


def test_stream_replay_needs_one_source(tmp_path) -> None:
    result = invoke(*StreamAPI.command("replay", "--connect", ":1"))
    assert result.exit_code == EXIT_FATAL
    assert "exactly one of --frames or --tokens" in result.output


def test_format_envelope() -> None:
    assert format_envelope({"type": "rejected", "error": "full"}) == (
        "rejected: full"
    )
    assert format_envelope(
        {"type": "summary", "latency_s": None, "tokens": 0, "chunks": 2}
    ) == ("latency undefined over 0 tokens in 2 chunks")


@pytest.mark.parametrize("option", ["--frames", "--wav-frames"])
def test_stream_replay_frame_options(tmp_path, option) -> None:
    (tmp_path / "talk.raw").write_bytes(bytes(400))
    result = invoke(
        *StreamAPI.command(
            "replay",
            "--connect",
            ":1",
            option,
            str(tmp_path / "talk.raw"),
            "--tokens",
            str(tmp_path / "talk.raw"),
        )
    )
    assert result.exit_code == EXIT_FATAL
    assert "exactly one of --frames or --tokens" in result.output
