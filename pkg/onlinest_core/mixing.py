"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from pathlib import Path
from typing import Optional

import typer
from typer import Typer
from typing_extensions import Annotated

from .api import API
from .app import app
from .corpus import (
    MixManifest,
    build_mix,
    read_examples,
    stats_path,
)
from .errors import ManifestError


class CorpusAPI(API):
    """Corpus module."""

    prefix = "/corpus"
    commands = Typer(help="Build partial-input training mixes.")

    @staticmethod
    @commands.command(help="Pair every example with a truncated copy.")
    def mix(
        source: Annotated[
            Path, typer.Option("--in", help="JSONL corpus of full examples.")
        ],
        out: Annotated[Path, typer.Option("--out", help="JSONL manifest.")],
        seed: Annotated[
            Optional[int], typer.Option("--seed", help="RNG seed.")
        ] = None,
        lo: Annotated[
            Optional[float],
            typer.Option("--lo", help="Smallest fraction kept."),
        ] = None,
        hi: Annotated[
            Optional[float],
            typer.Option("--hi", help="Largest fraction kept."),
        ] = None,
    ) -> None:
        """Write the mix to `out` and its stats to `<out>.stats.json`."""
        config = app.settings.corpus
        try:
            manifest = build_mix(
                read_examples(source),
                config.seed if seed is None else seed,
                config.lo if lo is None else lo,
                config.hi if hi is None else hi,
            )
            sidecar = manifest.write(out)
        except (ManifestError, ValueError, OSError) as e:
            raise API.fail(str(e))

        counts = manifest.stats.counts
        app.echo(
            f"{counts['full']} full, {counts['partial']} partial "
            f"examples written to {out} (stats in {sidecar})"
        )

    @staticmethod
    @commands.command(help="Recompute the statistics of a manifest.")
    def stats(
        source: Annotated[
            Path, typer.Option("--in", help="JSONL mix manifest.")
        ],
        lo: Annotated[
            Optional[float],
            typer.Option("--lo", help="Histogram lower bound."),
        ] = None,
        hi: Annotated[
            Optional[float],
            typer.Option("--hi", help="Histogram upper bound."),
        ] = None,
        seed: Annotated[
            Optional[int],
            typer.Option("--seed", help="Seed recorded in the sidecar."),
        ] = None,
        write: Annotated[
            bool,
            typer.Option("--write", help="Rewrite the stats sidecar."),
        ] = False,
    ) -> None:
        """Print the counts and ratio histogram of a manifest."""
        config = app.settings.corpus
        try:
            manifest = MixManifest(
                read_examples(source),
                config.seed if seed is None else seed,
                config.lo if lo is None else lo,
                config.hi if hi is None else hi,
            )
        except (ManifestError, OSError) as e:
            raise API.fail(str(e))

        if write:
            stats_path(source).write_text(
                manifest.stats_json(), encoding="utf-8"
            )
        app.echo(manifest.stats_json(), nl=False)

