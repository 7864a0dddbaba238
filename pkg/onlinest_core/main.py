"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from typing import Any

from .app import app
from .evaluation import EvalAPI
from .mixing import CorpusAPI
from .streaming import DecoderAPI, StreamAPI

for api in (EvalAPI, StreamAPI, CorpusAPI, DecoderAPI):
    api.register()


def main() -> Any:
    """Main entrypoint."""
    return app.main()


if __name__ == "__main__":
    main()
