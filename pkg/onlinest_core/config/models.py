"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import AnyHttpUrl, BaseModel, confloat, conint, validator


class ServerConfig(BaseModel):
    """Stream server config model."""

    class HTTPConfig(BaseModel):
        """Status endpoint config."""

        class HeaderConfig(BaseModel):
            """Header config."""

            origins: list[AnyHttpUrl] = []

        host: str = "127.0.0.1"
        port: int = 0
        header: HeaderConfig = HeaderConfig()

    host: str
    port: int
    max_sessions: conint(ge=1) = 64  # type: ignore[valid-type]
    max_chunk_bytes: conint(ge=1) = 1 << 20  # type: ignore[valid-type]
    workers: conint(ge=1) = 8  # type: ignore[valid-type]
    http: Optional[HTTPConfig]


class PolicyConfig(BaseModel):
    """Streaming policy config model."""

    chunk_duration_s: confloat(gt=0) = 0.5  # type: ignore[valid-type]
    agreement_depth: conint(ge=2) = 2  # type: ignore[valid-type]
    tokenizer_tag: str = "whitespace"


class DecoderConfig(BaseModel):
    """Remote decoder defaults."""

    timeout_s: confloat(gt=0) = 30.0  # type: ignore[valid-type]
    retries: conint(ge=1) = 3  # type: ignore[valid-type]


class TailGuessMode(Enum):
    """How the toy translator fills in words it is not yet sure about."""

    off = "off"
    cycling = "cycling"
    random = "random"


class ToyConfig(BaseModel):
    """Toy translator config model."""

    word_map: dict[str, str]
    tail_guess_mode: TailGuessMode = TailGuessMode.off
    stability_horizon: conint(ge=0) = 1  # type: ignore[valid-type]
    seed: int = 0


class BackendConfig(BaseModel):
    """Decoder backend selection.

    `name` is one of scripted, toy, remote or cascade.
    """

    name: str
    kind: str = "tokens"
    transcripts: dict[str, list[str]] = {}
    toy: Optional[ToyConfig]
    endpoint: Optional[str]
    timeout_s: Optional[float]
    retries: Optional[int]
    stages: list["BackendConfig"] = []

    @validator("name")
    def known_backend(cls, name: str) -> str:
        """Only the four built-in backends exist."""
        if name not in ("scripted", "toy", "remote", "cascade"):
            raise ValueError(f"unknown backend: {name}")
        return name

    @validator("kind")
    def known_kind(cls, kind: str) -> str:
        """Inputs are either frames or tokens."""
        if kind not in ("frames", "tokens"):
            raise ValueError(f"unknown input kind: {kind}")
        return kind


BackendConfig.update_forward_refs()


class EvaluationConfig(BaseModel):
    """Evaluation harness config model."""

    parallelism: conint(ge=1) = 4  # type: ignore[valid-type]
    average: str = "direction"
    latency_pooling: str = "utterance"

    @validator("average")
    def known_average(cls, average: str) -> str:
        """Averages are per direction or per utterance."""
        if average not in ("direction", "utterance"):
            raise ValueError(f"unknown average: {average}")
        return average

    @validator("latency_pooling")
    def known_pooling(cls, pooling: str) -> str:
        """Latency is averaged per utterance or pooled over tokens."""
        if pooling not in ("utterance", "token"):
            raise ValueError(f"unknown latency pooling: {pooling}")
        return pooling


class CorpusConfig(BaseModel):
    """Partial-input corpus config model."""

    lo: confloat(ge=0, le=1) = 0.10  # type: ignore[valid-type]
    hi: confloat(ge=0, le=1) = 0.40  # type: ignore[valid-type]
    seed: int = 0


class LoggingConfig(BaseModel):
    """Logging config model."""

    level: str = "INFO"
    format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    file: Optional[Path]
