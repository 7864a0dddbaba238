"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from pathlib import Path
from typing import Any, List, Optional

import typer
from typer import Typer
from typing_extensions import Annotated

from .api import EXIT_PARTIAL, API
from .app import app
from .config.models import BackendConfig
from .decoders import backend_factory, load_backend_config, parse_backend
from .errors import OnlineSTError
from .harness import (
    EvalManifest,
    EvalRecord,
    Mode,
    build_report,
    count_failures,
    parse_modes,
    read_records,
    run_eval,
    write_records,
)
from .metrics import BleuConfig, ReportRow, format_report


def parse_labelled(value: str) -> tuple[str, Path]:
    """Split "label=path"; a bare path is labelled by its name."""
    label, sep, path = value.partition("=")
    if not sep:
        return Path(value).name, Path(value)
    return label, Path(path)


def parse_groups(values: list[str]) -> dict[str, list[str]]:
    """Parse "label=dir1,dir2" direction groups."""
    groups = {}
    for value in values:
        label, sep, directions = value.partition("=")
        if not sep or not label:
            raise ValueError(f"group must look like label=a-b,c-d: {value}")
        groups[label] = [d for d in directions.split(",") if d]
    return groups


def summary_rows(records: list[EvalRecord]) -> list[ReportRow]:
    """Online against offline when both ran, otherwise the one mode."""
    online = [r for r in records if r.mode is Mode.online]
    offline = [r for r in records if r.mode is Mode.offline]
    if online and offline:
        return build_report(
            online,
            offline,
            label=Mode.online.value,
            average=app.settings.evaluation.average,
            pooling=app.settings.evaluation.latency_pooling,
        )
    mode = Mode.online if online else Mode.offline
    return build_report(
        online or offline,
        label=mode.value,
        average=app.settings.evaluation.average,
        pooling=app.settings.evaluation.latency_pooling,
    )


class EvalAPI(API):
    """Evaluation module."""

    prefix = "/eval"
    commands = Typer(help="Evaluate offline and online decoding.")

    @staticmethod
    @commands.command(help="Decode every utterance of a manifest.")
    def run(
        manifest: Annotated[
            Path,
            typer.Option(
                "--manifest", help="YAML or JSON evaluation manifest."
            ),
        ],
        out: Annotated[
            Path,
            typer.Option("--out", help="Directory for records and summary."),
        ],
        backend: Annotated[
            Optional[str],
            typer.Option(
                "--backend",
                help="scripted, toy, cascade or remote:<host:port>; "
                "defaults to the manifest's backend.",
            ),
        ] = None,
        backend_config: Annotated[
            Optional[Path],
            typer.Option(
                "--backend-config",
                help="YAML file with transcripts, toy or stage settings.",
            ),
        ] = None,
        chunk: Annotated[
            Optional[float],
            typer.Option("--chunk", help="Chunk duration in seconds."),
        ] = None,
        depth: Annotated[
            Optional[int],
            typer.Option("--depth", help="Agreement depth."),
        ] = None,
        mode: Annotated[
            str,
            typer.Option("--mode", help="online, offline or both."),
        ] = "both",
        parallelism: Annotated[
            Optional[int],
            typer.Option("--parallelism", help="Utterances at once."),
        ] = None,
    ) -> None:
        """Run an evaluation and write `<out>/<mode>.jsonl`.

        Exits 2 when some utterances failed and 1 when the run could not
        be carried out.
        """
        try:
            overrides: dict[str, Any] = {}
            if chunk is not None:
                overrides["chunk_duration_s"] = chunk
            if depth is not None:
                overrides["agreement_depth"] = depth
            loaded = EvalManifest.load(manifest).override(**overrides)

            base: Optional[BackendConfig] = loaded.backend
            if backend_config is not None:
                base = load_backend_config(backend_config)
            if backend is not None:
                config = parse_backend(backend, base)
            elif base is not None:
                config = base
            else:
                raise ValueError("no backend given and none in the manifest")

            factory = backend_factory(
                config,
                app.settings.decoder.timeout_s,
                app.settings.decoder.retries,
                app.settings.policy.tokenizer_tag,
            )
            records = run_eval(
                loaded,
                parse_modes(mode),
                factory,
                parallelism or app.settings.evaluation.parallelism,
            )
            write_records(records, out)
            summary = format_report(summary_rows(records))
        except (OnlineSTError, ValueError, OSError) as e:
            raise API.fail(str(e))

        (out / "summary.tsv").write_text(summary, encoding="utf-8")
        app.echo(summary, nl=False)

        failures = count_failures(records)
        if failures:
            app.echo(f"{failures} utterances failed", err=True)
            raise typer.Exit(code=EXIT_PARTIAL)

    @staticmethod
    @commands.command(help="Compare systems against a baseline.")
    def report(
        system: Annotated[
            List[str],
            typer.Option(
                "--system",
                help="label=<dir or jsonl>; repeat for several systems.",
            ),
        ],
        baseline: Annotated[
            Optional[Path],
            typer.Option("--baseline", help="Baseline records."),
        ] = None,
        fmt: Annotated[
            str, typer.Option("--format", help="tsv or json.")
        ] = "tsv",
        group: Annotated[
            Optional[List[str]],
            typer.Option(
                "--group",
                help="label=dir1,dir2: extra average over those directions.",
            ),
        ] = None,
        average: Annotated[
            Optional[str],
            typer.Option("--average", help="direction or utterance."),
        ] = None,
        pooling: Annotated[
            Optional[str],
            typer.Option("--latency-pooling", help="utterance or token."),
        ] = None,
        lowercase: Annotated[
            bool, typer.Option("--lowercase", help="Case-insensitive BLEU.")
        ] = False,
        tokenize: Annotated[
            str, typer.Option("--tokenize", help="13a or none.")
        ] = "13a",
        smooth: Annotated[
            str, typer.Option("--smooth", help="exp, floor or none.")
        ] = "exp",
        out: Annotated[
            Optional[Path],
            typer.Option("--out", help="Write the report here."),
        ] = None,
    ) -> None:
        """Build a quality/latency report.

        System directories default to their online records and the
        baseline directory to its offline records.
        """
        evaluation = app.settings.evaluation
        try:
            config = BleuConfig(
                smooth_method=smooth, lowercase=lowercase, tokenize=tokenize
            )
            groups = parse_groups(group or [])
            baseline_records = (
                read_records(baseline, prefer=Mode.offline)
                if baseline is not None
                else None
            )
            rows: list[ReportRow] = []
            failures = count_failures(baseline_records or [])
            for value in system:
                label, path = parse_labelled(value)
                records = read_records(path, prefer=Mode.online)
                failures += count_failures(records)
                rows.extend(
                    build_report(
                        records,
                        baseline_records,
                        label=label,
                        config=config,
                        average=average or evaluation.average,
                        pooling=pooling or evaluation.latency_pooling,
                        groups=groups,
                    )
                )
            report = format_report(rows, fmt)
        except (OnlineSTError, ValueError) as e:
            raise API.fail(str(e))

        if out is not None:
            out.write_text(report, encoding="utf-8")
        else:
            app.echo(report, nl=False)

        if failures:
            app.echo(f"{failures} failed records left out", err=True)
            raise typer.Exit(code=EXIT_PARTIAL)
