"""Radical-decomposition caption grammar.

A caption is a whitespace-separated string like ``"stl { r1 r2 }"``: a
structure operator followed by a brace-delimited list of two or more
sub-captions, or a bare radical token. This module parses captions into
trees, serializes trees back to canonical text, and builds the token
vocabulary the decoder predicts over.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union


class CaptionError(ValueError):
    """Base class for all caption grammar errors."""


class EmptyCaption(CaptionError):
    pass


class UnbalancedBraces(CaptionError):
    pass


class MalformedStructure(CaptionError):
    pass


class ArityError(CaptionError):
    pass


class TrailingInput(CaptionError):
    pass


class InvalidRadical(CaptionError):
    pass


class OutOfVocabulary(CaptionError):
    pass


class StructureOp(Enum):
    """The ten spatial structure operators between radicals."""

    LEFT_RIGHT = "a"
    TOP_BOTTOM = "d"
    TOP_LEFT_SURROUND = "stl"
    TOP_RIGHT_SURROUND = "str"
    BOTTOM_LEFT_SURROUND = "sbl"
    LEFT_SURROUND = "sl"
    BOTTOM_SURROUND = "sb"
    TOP_SURROUND = "st"
    FULL_SURROUND = "s"
    WITHIN = "w"

    @property
    def code(self) -> str:
        return self.value


STRUCTURE_CODES = tuple(op.value for op in StructureOp)
OPEN_BRACE = "{"
CLOSE_BRACE = "}"
START_TOKEN = "<sos>"
END_TOKEN = "<eos>"
CONTROL_TOKENS = (START_TOKEN, END_TOKEN)

_STRUCT_BY_CODE = {op.value: op for op in StructureOp}


@dataclass(frozen=True)
class Leaf:
    radical_id: str

    def __post_init__(self):
        if not self.radical_id:
            raise InvalidRadical("radical token must be non-empty")
        if any(c.isspace() or c in "{}" for c in self.radical_id):
            raise InvalidRadical(
                f"radical token {self.radical_id!r} contains whitespace or braces"
            )


@dataclass(frozen=True)
class Internal:
    op: StructureOp
    children: tuple["DecompositionTree", ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ArityError(
                f"structure {self.op.code!r} needs at least 2 children, "
                f"got {len(self.children)}"
            )


DecompositionTree = Union[Leaf, Internal]


@dataclass(frozen=True)
class CaptionToken:
    """One lexical unit of a caption.

    kind is one of "radical", "struct", "open", "close", "start", "end";
    value holds the radical string or StructureOp where applicable.
    """

    kind: str
    value: object = None

    @property
    def text(self) -> str:
        if self.kind == "radical":
            return self.value
        if self.kind == "struct":
            return self.value.code
        return {
            "open": OPEN_BRACE,
            "close": CLOSE_BRACE,
            "start": START_TOKEN,
            "end": END_TOKEN,
        }[self.kind]


TOK_OPEN = CaptionToken("open")
TOK_CLOSE = CaptionToken("close")
TOK_START = CaptionToken("start")
TOK_END = CaptionToken("end")


def radical_token(radical_id: str) -> CaptionToken:
    Leaf(radical_id)  # reuse the leaf validation
    return CaptionToken("radical", radical_id)


def struct_token(op: StructureOp) -> CaptionToken:
    return CaptionToken("struct", op)


def tokenize(caption: str) -> list[CaptionToken]:
    """Split a caption into tokens: brace, structure code, otherwise radical."""
    words = caption.split()
    if not words:
        raise EmptyCaption("caption contains no tokens")
    tokens = []
    for word in words:
        if word == OPEN_BRACE:
            tokens.append(TOK_OPEN)
        elif word == CLOSE_BRACE:
            tokens.append(TOK_CLOSE)
        elif word in _STRUCT_BY_CODE:
            tokens.append(struct_token(_STRUCT_BY_CODE[word]))
        else:
            tokens.append(radical_token(word))
    return tokens


def parse(tokens: Sequence[CaptionToken]) -> DecompositionTree:
    """Parse a token list: tree ::= radical | struct "{" tree tree+ "}"."""
    if not tokens:
        raise EmptyCaption("no tokens to parse")
    tree, pos = _parse_tree(tokens, 0)
    if pos != len(tokens):
        raise TrailingInput(
            f"caption continues after a complete tree at token {pos}"
        )
    return tree


def _parse_tree(tokens, pos):
    if pos >= len(tokens):
        raise UnbalancedBraces("caption ended where a sub-caption was expected")
    tok = tokens[pos]
    if tok.kind == "radical":
        return Leaf(tok.value), pos + 1
    if tok.kind == "struct":
        if pos + 1 >= len(tokens) or tokens[pos + 1].kind != "open":
            raise MalformedStructure(
                f"structure {tok.value.code!r} must be followed by {OPEN_BRACE!r}"
            )
        pos += 2
        children = []
        while True:
            if pos >= len(tokens):
                raise UnbalancedBraces("missing closing brace")
            if tokens[pos].kind == "close":
                if len(children) < 2:
                    raise ArityError(
                        f"structure {tok.value.code!r} closed with "
                        f"{len(children)} children"
                    )
                return Internal(tok.value, tuple(children)), pos + 1
            child, pos = _parse_tree(tokens, pos)
            children.append(child)
    if tok.kind == "close":
        raise UnbalancedBraces("closing brace without matching open")
    if tok.kind == "open":
        raise MalformedStructure("open brace not preceded by a structure code")
    raise MalformedStructure(f"control token {tok.text!r} inside caption body")


def parse_caption(caption: str) -> DecompositionTree:
    return parse(tokenize(caption))


def serialize(tree: DecompositionTree) -> str:
    """Canonical single-space caption text for a tree."""
    if isinstance(tree, Leaf):
        return tree.radical_id
    inner = " ".join(serialize(c) for c in tree.children)
    return f"{tree.op.code} {OPEN_BRACE} {inner} {CLOSE_BRACE}"


def canonical(caption: str) -> str:
    """Round a caption through parse/serialize to normalize whitespace."""
    return serialize(parse_caption(caption))


def tree_radicals(tree: DecompositionTree) -> set[str]:
    if isinstance(tree, Leaf):
        return {tree.radical_id}
    out = set()
    for c in tree.children:
        out |= tree_radicals(c)
    return out


def tree_structures(tree: DecompositionTree) -> set[StructureOp]:
    if isinstance(tree, Leaf):
        return set()
    out = {tree.op}
    for c in tree.children:
        out |= tree_structures(c)
    return out


class Vocabulary:
    """Bijective token<->index map over radicals, structures, and braces."""

    def __init__(self, tokens: Sequence[str]):
        self.index_to_token = list(tokens)
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        for control in CONTROL_TOKENS:
            if control not in self.token_to_index:
                raise ValueError(f"vocabulary must contain {control!r}")

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    @property
    def start_index(self) -> int:
        return self.token_to_index[START_TOKEN]

    @property
    def end_index(self) -> int:
        return self.token_to_index[END_TOKEN]

    def index(self, token: str) -> int:
        try:
            return self.token_to_index[token]
        except KeyError:
            raise OutOfVocabulary(f"token {token!r} not in vocabulary") from None

    def token(self, index: int) -> str:
        if not 0 <= index < self.size:
            raise IndexError(f"index {index} outside [0, {self.size})")
        return self.index_to_token[index]

    def save(self, path) -> None:
        lines = [f"{i}\t{t}" for i, t in enumerate(self.index_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        for lineno, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines()
        ):
            if not line:
                continue
            idx_str, _, token = line.partition("\t")
            if int(idx_str) != len(tokens):
                raise ValueError(f"non-contiguous vocabulary index on line {lineno + 1}")
            tokens.append(token)
        return cls(tokens)

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.index_to_token == other.index_to_token
        )

    def __repr__(self):
        return f"Vocabulary(K={self.size})"


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Vocabulary over a caption corpus.

    Always contains the ten structure codes, both braces, and the start/end
    control tokens; radicals come from the corpus. Indices are deterministic:
    control tokens first, then every other token in sorted order.
    """
    radicals = set()
    for caption in corpus:
        for tok in tokenize(caption):
            if tok.kind == "radical":
                radicals.add(tok.value)
    body = sorted(set(STRUCTURE_CODES) | {OPEN_BRACE, CLOSE_BRACE} | radicals)
    return Vocabulary(list(CONTROL_TOKENS) + body)


def encode_caption(caption: str, vocab: Vocabulary) -> list[int]:
    """Indices for start + caption tokens + end."""
    tokens = tokenize(caption)
    return (
        [vocab.start_index]
        + [vocab.index(tok.text) for tok in tokens]
        + [vocab.end_index]
    )


@dataclass(frozen=True)
class ZeroShotReport:
    ok: bool
    missing_tokens: frozenset[str]


def zero_shot_check(
    train_captions: Iterable[str], test_captions: Iterable[str]
) -> ZeroShotReport:
    """Whether every radical and structure in test also occurs in train."""

    def content_tokens(captions):
        seen = set()
        for caption in captions:
            tree = parse_caption(caption)
            seen |= tree_radicals(tree)
            seen |= {op.code for op in tree_structures(tree)}
        return seen

    missing = content_tokens(test_captions) - content_tokens(train_captions)
    return ZeroShotReport(ok=not missing, missing_tokens=frozenset(missing))


def load_corpus(path) -> list[str]:
    """Captions from a text file, one per line; '#' lines and blanks skipped."""
    captions = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        captions.append(stripped)
    return captions
