"""Copyright (c) 2024 onlinest developers.

This source code is licensed under the MIT license found in the
LICENSE file in the root directory of this source tree.
"""

from dataclasses import dataclass
from typing import Iterable, Iterator, Union, overload

from .errors import ComparabilityError

WHITESPACE = "whitespace"


@dataclass(frozen=True)
class TokenSequence:
    """An ordered run of tokens tagged with the tokenizer that produced it.

    Two sequences may only be compared when their tags match.
    """

    tokens: tuple[str, ...] = ()
    tokenizer_tag: str = WHITESPACE

    def __post_init__(self) -> None:
        """Freeze tokens into a tuple and reject empty strings."""
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if any(token == "" for token in self.tokens):
            raise ValueError("tokens must not contain empty strings")

    @classmethod
    def from_text(
        cls, text: str, tokenizer_tag: str = WHITESPACE
    ) -> "TokenSequence":
        """Split text on whitespace.

        Args:
            text: Text to split.
            tokenizer_tag: Tag recorded on the new sequence.

        Returns:
            TokenSequence: The tokens of text.
        """
        return cls(tuple(text.split()), tokenizer_tag)

    def text(self) -> str:
        """Join the tokens with single spaces."""
        return " ".join(self.tokens)

    def check_comparable(self, other: "TokenSequence") -> None:
        """Raise ComparabilityError unless both tags match."""
        if self.tokenizer_tag != other.tokenizer_tag:
            raise ComparabilityError(
                f"cannot compare {self.tokenizer_tag!r} tokens "
                f"with {other.tokenizer_tag!r} tokens"
            )

    def startswith(self, prefix: "TokenSequence") -> bool:
        """Is prefix a prefix of this sequence."""
        self.check_comparable(prefix)
        return self.tokens[: len(prefix)] == prefix.tokens

    def extend(self, tokens: Iterable[str]) -> "TokenSequence":
        """Return a new sequence with tokens appended."""
        return TokenSequence(
            self.tokens + tuple(tokens), self.tokenizer_tag
        )

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        """Concatenate two comparable sequences."""
        self.check_comparable(other)
        return self.extend(other.tokens)

    def __len__(self) -> int:
        """Number of tokens."""
        return len(self.tokens)

    def __iter__(self) -> Iterator[str]:
        """Iterate over tokens."""
        return iter(self.tokens)

    def __bool__(self) -> bool:
        """True when there is at least one token."""
        return bool(self.tokens)

    @overload
    def __getitem__(self, index: int) -> str:
        ...

    @overload
    def __getitem__(self, index: slice) -> "TokenSequence":
        ...

    def __getitem__(
        self, index: Union[int, slice]
    ) -> Union[str, "TokenSequence"]:
        """Index a token, or slice into a new sequence."""
        if isinstance(index, slice):
            return TokenSequence(self.tokens[index], self.tokenizer_tag)
        return self.tokens[index]
