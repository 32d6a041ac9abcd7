"""Prompt rendering for the connection queries and verdict parsing."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from .connectome import RegionPair

TEMPLATE_NAMES = (
    "minimal",
    "reasoning",
    "verdict",
    "cot",
    "uncertainty",
    "rag_system",
    "rag_user",
    "region_summary",
)


class Base(str, enum.Enum):
    MINIMAL = "minimal"
    REASONING = "reasoning"
    CHAIN_OF_THOUGHT = "chain_of_thought"
    RAG_CITATION = "rag_citation"


class Ordering(str, enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class Verdict(str, enum.Enum):
    TRUE = "True"
    FALSE = "False"
    DONT_KNOW = "DontKnow"


class ParseError(ValueError):
    """Model text holds no recognisable verdict."""


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptStrategy:
    base: Base
    uncertainty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "base", Base(self.base))
        # the citation prompt always allows "don't know"
        if self.base is Base.RAG_CITATION and not self.uncertainty:
            object.__setattr__(self, "uncertainty", True)

    @property
    def label(self) -> str:
        return f"{self.base.value}+upv" if self.uncertainty else self.base.value

    @classmethod
    def parse(cls, label: str) -> "PromptStrategy":
        base, _, suffix = label.partition("+")
        return cls(Base(base), suffix == "upv")


@dataclass(frozen=True)
class Message:
    role: Role
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role.value, "content": self.content}

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(Role(d["role"]), d["content"])


@dataclass(frozen=True)
class MessageSequence:
    messages: tuple[Message, ...]

    def __post_init__(self):
        roles = [m.role for m in self.messages]
        if Role.USER not in roles:
            raise PromptError("a message sequence needs at least one user message")
        seen_other = False
        for r in roles:
            if r is Role.SYSTEM and seen_other:
                raise PromptError("system messages must come first")
            seen_other |= r is not Role.SYSTEM

    def __iter__(self):
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)

    @property
    def user_turns(self) -> list[str]:
        return [m.content for m in self.messages if m.role is Role.USER]

    @property
    def system(self) -> list[Message]:
        return [m for m in self.messages if m.role is Role.SYSTEM]


class Templates:
    """Prompt wording, loaded from a directory with packaged defaults as fallback."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name not in TEMPLATE_NAMES:
            raise KeyError(name)
        if name not in self._cache:
            path = self.directory / f"{name}.txt" if self.directory else None
            if path is not None and path.exists():
                text = path.read_text(encoding="utf-8")
            else:
                text = _default_template(name)
            self._cache[name] = text.rstrip("\n")
        return self._cache[name]

    def fill(self, name: str, region1: str = "", region2: str = "", context: str = "") -> str:
        # plain substitution so literal braces in wording survive
        return (
            self.get(name)
            .replace("{region1}", region1)
            .replace("{region2}", region2)
            .replace("{context}", context)
        )


@lru_cache(maxsize=None)
def _default_template(name: str) -> str:
    return resources.files("tractprior").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


DEFAULT_TEMPLATES = Templates()


def _ordered_names(pair: RegionPair, ordering: Ordering) -> tuple[str, str]:
    if Ordering(ordering) is Ordering.FORWARD:
        return pair.a.name, pair.b.name
    return pair.b.name, pair.a.name


def render(
    strategy: PromptStrategy,
    pair: RegionPair,
    ordering: Ordering = Ordering.FORWARD,
    system_context: str | None = None,
    templates: Templates = DEFAULT_TEMPLATES,
) -> MessageSequence:
    """Render the user turns for one query.

    Multi-turn strategies return several user messages; the caller sends them
    one at a time, carrying the assistant replies forward in the same session.
    """
    if strategy.base is Base.RAG_CITATION:
        raise PromptError("use render_rag_citation for citation-grounded prompts")
    r1, r2 = _ordered_names(pair, ordering)
    upv = " " + templates.fill("uncertainty") if strategy.uncertainty else ""
    turns = []
    if strategy.base is Base.MINIMAL:
        turns.append(templates.fill("minimal", r1, r2) + upv)
    else:
        if strategy.base is Base.CHAIN_OF_THOUGHT:
            turns.append(templates.fill("cot", r1, r2))
        turns.append(templates.fill("reasoning", r1, r2))
        turns.append(templates.fill("verdict", r1, r2) + upv)
    msgs = []
    if system_context:
        msgs.append(Message(Role.SYSTEM, system_context))
    msgs.extend(Message(Role.USER, t) for t in turns)
    return MessageSequence(tuple(msgs))


@dataclass(frozen=True)
class ContextChunk:
    text: str
    title: str
    pmcid: str


def format_context(chunks: Sequence[ContextChunk]) -> str:
    parts = []
    for i, c in enumerate(chunks, 1):
        parts.append(f'<snippet id="{i}" title="{c.title}" pmcid="{c.pmcid}">\n{c.text}\n</snippet>')
    return "\n".join(parts)


def render_rag_citation(
    pair: RegionPair,
    context_chunks: Sequence[ContextChunk | tuple[str, str, str]],
    ordering: Ordering = Ordering.FORWARD,
    templates: Templates = DEFAULT_TEMPLATES,
) -> MessageSequence:
    chunks = [c if isinstance(c, ContextChunk) else ContextChunk(*c) for c in context_chunks]
    if not 1 <= len(chunks) <= 5:
        raise PromptError(f"citation prompt takes 1 to 5 context chunks, got {len(chunks)}")
    r1, r2 = _ordered_names(pair, ordering)
    user = templates.fill("rag_user", r1, r2, format_context(chunks))
    return MessageSequence((Message(Role.SYSTEM, templates.fill("rag_system")), Message(Role.USER, user)))


def render_region_summary(region_name: str, context: str, templates: Templates = DEFAULT_TEMPLATES) -> MessageSequence:
    return MessageSequence((Message(Role.USER, templates.fill("region_summary", region_name, context=context)),))


_VERDICT_RE = re.compile(r"\b(?:(true)|(false)|(don[’'‘`]?t\s+know))\b", re.IGNORECASE)


def parse_classification(text: str, upv: bool = False) -> Verdict:
    """Return the last verdict word in ``text``.

    "don't know" only counts when the uncertainty variant was requested.
    """
    found = None
    for m in _VERDICT_RE.finditer(text):
        if m.group(1):
            found = Verdict.TRUE
        elif m.group(2):
            found = Verdict.FALSE
        elif upv:
            found = Verdict.DONT_KNOW
    if found is None:
        raise ParseError(f"no verdict found in {text[-80:]!r}")
    return found
