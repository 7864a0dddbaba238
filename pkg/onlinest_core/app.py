"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import TYPE_CHECKING, Any, NoReturn, Optional

import typer
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from singleton_decorator import singleton
from typer import Typer

from onlinest_core import __version__

from .config.settings import Settings

if TYPE_CHECKING:
    from .server import StreamServer


@singleton
class Application:
    """Application class."""

    commands = Typer(help="Online speech translation toolkit.")
    router = FastAPI()

    @staticmethod
    @router.get("/")
    def status() -> dict[str, Any]:
        """HTTP GET handler for / route.

        Returns:
            dict: Application status and session counters.
        """
        return {
            "time": str(datetime.now()),
            "onlinest": {"core": {"version": __version__}},
            "sessions": app.sessions(),
        }

    def __init__(self) -> None:
        """Constructor."""
        self.settings = Settings.parse_obj({})
        self.stream_server: Optional["StreamServer"] = None

        http = self.settings.server.http
        self.router.add_middleware(
            CORSMiddleware,
            allow_origins=http.header.origins if http else [],
            allow_credentials=True,
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def sessions(self) -> dict[str, int]:
        """Counters of the stream server running in this process."""
        if self.stream_server is None:
            return {"active": 0, "served": 0, "rejected": 0}
        return self.stream_server.status()

    def register_api(self, api: Any) -> None:
        """Register an API with the application.

        Args:
            api: An API class to register.

        Returns:
            None.
        """

        def include_router() -> None:
            return self.router.include_router(api.router)

        def add_typer() -> None:
            name = Path(api.prefix).name
            return self.commands.add_typer(api.commands, name=name)

        for registry_func in [add_typer, include_router]:
            try:
                registry_func()
            except AttributeError as e:
                if registry_func is add_typer:
                    typer.echo(e)

    def echo(self, *args: Any, **kwargs: Any) -> Any:
        """Print a message using Typer/Click echo.

        Args:
            *args: Positional arguments.
            **kwargs: Keyword arguments.

        Returns:
            Any: The return value from Typer.echo.
        """
        return typer.echo(*args, **kwargs)

    def configure_logging(self) -> None:
        """Set up the root logger from the logging settings."""
        config = self.settings.logging
        logging.basicConfig(
            level=logging.DEBUG if self.settings.debug else config.level,
            format=config.format,
            filename=config.file,
        )

    def main(self) -> NoReturn:
        """Main command line entrypoint."""
        self.configure_logging()
        self.commands()
        assert False  # self.commands() does not return


app = Application()
