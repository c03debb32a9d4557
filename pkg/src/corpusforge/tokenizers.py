"""Token counting rules used for budget accounting and chunking.

The default splits on Unicode whitespace, which is reproducible with no
external assets. Encoder vocabularies can be plugged in through the registry
when budgets should be counted in model tokens instead.
"""

from __future__ import annotations

from typing import Callable, Protocol


class Tokenizer(Protocol):
    name: str

    def tokenize(self, text: str) -> list[str]: ...

    def count(self, text: str) -> int: ...


class WhitespaceTokenizer:
    """Splits on runs of Unicode whitespace; empty text yields zero tokens."""

    name = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def count(self, text: str) -> int:
        return len(text.split())


class CallableTokenizer:
    """Adapts any text -> token-list callable (e.g. an encoder vocabulary)."""

    def __init__(self, name: str, fn: Callable[[str], list[str]]):
        self.name = name
        self._fn = fn

    def tokenize(self, text: str) -> list[str]:
        return self._fn(text)

    def count(self, text: str) -> int:
        return len(self._fn(text))


_REGISTRY: dict[str, Callable[[], Tokenizer]] = {
    "whitespace": WhitespaceTokenizer,
}


def register_tokenizer(name: str, factory: Callable[[], Tokenizer]) -> None:
    _REGISTRY[name] = factory


def get_tokenizer(name: str = "whitespace") -> Tokenizer:
    try:
        return _REGISTRY[name]()
    except KeyError:
        known = ", ".join(sorted(_REGISTRY))
        raise KeyError(f"unknown tokenizer {name!r} (registered: {known})") from None
