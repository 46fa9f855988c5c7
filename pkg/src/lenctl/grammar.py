"""Length-control grammar: canonical prompts, utterance templates, and parsing.

Five constraint kinds (more-than / less-than / equal-to / between / none) with
integer token bounds. A shipped template set expands a constraint plus a
document into a natural-language utterance; `parse_utterance` inverts that
expansion exactly for in-grammar text and degrades to the unconstrained kind
otherwise. Everything here is pure and reentrant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

LENGTH_MIN = 50
LENGTH_MAX = 150


class GrammarError(ValueError):
    pass


class InvalidPromptError(GrammarError):
    """A constraint whose bounds violate its kind's shape."""


class TemplateArityError(GrammarError):
    """Bound count does not match the template's placeholder count."""


class AmbiguousConstraintError(GrammarError):
    """An utterance carries conflicting length constraints."""


class ControlKind(str, Enum):
    MORE_THAN = "more_than"
    LESS_THAN = "less_than"
    EQUAL_TO = "equal_to"
    BETWEEN = "between"
    NONE = "none"

    @property
    def arity(self) -> int:
        if self is ControlKind.NONE:
            return 0
        if self is ControlKind.BETWEEN:
            return 2
        return 1


BOUNDED_KINDS = (
    ControlKind.MORE_THAN,
    ControlKind.LESS_THAN,
    ControlKind.EQUAL_TO,
    ControlKind.BETWEEN,
)


@dataclass(frozen=True)
class StandardControlPrompt:
    kind: ControlKind
    l_min: int | None = None
    l_max: int | None = None

    def __post_init__(self):
        k, lo, hi = self.kind, self.l_min, self.l_max
        shapes = {
            ControlKind.MORE_THAN: (True, False),
            ControlKind.LESS_THAN: (False, True),
            ControlKind.EQUAL_TO: (True, True),
            ControlKind.BETWEEN: (True, True),
            ControlKind.NONE: (False, False),
        }
        want_lo, want_hi = shapes[k]
        if (lo is not None) != want_lo or (hi is not None) != want_hi:
            raise InvalidPromptError(f"{k.value} prompt with bounds ({lo}, {hi})")
        for b in (lo, hi):
            if b is not None and (int(b) != b or b <= 0):
                raise InvalidPromptError(f"bound {b!r} is not a positive integer")
        if k is ControlKind.EQUAL_TO and lo != hi:
            raise InvalidPromptError(f"equal_to with {lo} != {hi}")
        if k is ControlKind.BETWEEN and lo > hi:
            raise InvalidPromptError(f"between with {lo} > {hi}")

    @classmethod
    def more_than(cls, n: int) -> "StandardControlPrompt":
        return cls(ControlKind.MORE_THAN, l_min=n)

    @classmethod
    def less_than(cls, n: int) -> "StandardControlPrompt":
        return cls(ControlKind.LESS_THAN, l_max=n)

    @classmethod
    def equal_to(cls, n: int) -> "StandardControlPrompt":
        return cls(ControlKind.EQUAL_TO, l_min=n, l_max=n)

    @classmethod
    def between(cls, lo: int, hi: int) -> "StandardControlPrompt":
        return cls(ControlKind.BETWEEN, l_min=lo, l_max=hi)

    @classmethod
    def none(cls) -> "StandardControlPrompt":
        return cls(ControlKind.NONE)

    def bounds(self) -> list[int]:
        """The bound values in template order (empty for the none kind)."""
        if self.kind is ControlKind.NONE:
            return []
        if self.kind is ControlKind.MORE_THAN:
            return [self.l_min]
        if self.kind is ControlKind.LESS_THAN:
            return [self.l_max]
        if self.kind is ControlKind.EQUAL_TO:
            return [self.l_min]
        return [self.l_min, self.l_max]

    def satisfied_by(self, length: int) -> bool:
        if self.kind is ControlKind.NONE:
            return True
        lo = self.l_min if self.l_min is not None else 0
        hi = self.l_max if self.l_max is not None else float("inf")
        return lo <= length <= hi

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "l_min": self.l_min, "l_max": self.l_max}

    @classmethod
    def from_json(cls, d: dict) -> "StandardControlPrompt":
        return cls(ControlKind(d["kind"]), d.get("l_min"), d.get("l_max"))


def render_standard_prompt(p: StandardControlPrompt) -> str:
    """Canonical text form, e.g. ``equal to 100 tokens`` or ``none``."""
    if p.kind is ControlKind.NONE:
        return "none"
    if p.kind is ControlKind.MORE_THAN:
        return f"more than {p.l_min} tokens"
    if p.kind is ControlKind.LESS_THAN:
        return f"less than {p.l_max} tokens"
    if p.kind is ControlKind.EQUAL_TO:
        return f"equal to {p.l_min} tokens"
    return f"between {p.l_min} and {p.l_max} tokens"


_CANONICAL = [
    (re.compile(r"more than (\d+) tokens", re.I), ControlKind.MORE_THAN),
    (re.compile(r"less than (\d+) tokens", re.I), ControlKind.LESS_THAN),
    (re.compile(r"equal to (\d+) tokens", re.I), ControlKind.EQUAL_TO),
    (re.compile(r"between (\d+) and (\d+) tokens", re.I), ControlKind.BETWEEN),
]


def parse_standard_prompt(text: str) -> StandardControlPrompt:
    """Parse a canonical rendering back to its prompt (exact inverse of render)."""
    s = text.strip()
    if s.lower() == "none":
        return StandardControlPrompt.none()
    for rx, kind in _CANONICAL:
        m = rx.fullmatch(s)
        if m:
            vals = [int(g) for g in m.groups()]
            return _prompt_from(kind, vals)
    raise InvalidPromptError(f"not a canonical control prompt: {text!r}")


def _prompt_from(kind: ControlKind, vals: list[int]) -> StandardControlPrompt:
    if kind is ControlKind.NONE:
        return StandardControlPrompt.none()
    if kind is ControlKind.MORE_THAN:
        return StandardControlPrompt.more_than(vals[0])
    if kind is ControlKind.LESS_THAN:
        return StandardControlPrompt.less_than(vals[0])
    if kind is ControlKind.EQUAL_TO:
        return StandardControlPrompt.equal_to(vals[0])
    return StandardControlPrompt.between(vals[0], vals[1])


# -- templates ----------------------------------------------------------------

# Words that may never appear inside a matched document span. Keeps a
# document capture from swallowing part of a neighbouring constraint phrase.
_CUE_WORDS = frozenset(
    """more less least most fewer greater shorter longer minimum maximum
    under over within between equal exactly length token tokens""".split()
)

_DIGITS = re.compile(r"\d+")


def _is_cue_word(word: str) -> bool:
    w = word.lower().strip(".,:;!?\"'")
    return w in _CUE_WORDS or w.isdigit()


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    kind: ControlKind
    pattern: str
    # (is_slot, literal-or-regex) items before and after the document slot
    _prefix: tuple = field(repr=False, default=())
    _suffix: tuple = field(repr=False, default=())

    def __post_init__(self):
        words = self.pattern.split()
        if words.count("*") != 1:
            raise TemplateArityError(f"template {self.template_id}: need exactly one document slot")
        n_len = sum(w.count("?") for w in words)
        if n_len != self.kind.arity:
            raise TemplateArityError(
                f"template {self.template_id}: {n_len} length slots for kind {self.kind.value}"
            )
        star = words.index("*")

        def compile_word(w: str):
            if "?" in w:
                rx = re.escape(w).replace(r"\?", r"(\d+)")
                return (True, re.compile(rx, re.I))
            return (False, w.lower())

        object.__setattr__(self, "_prefix", tuple(compile_word(w) for w in words[:star]))
        object.__setattr__(self, "_suffix", tuple(compile_word(w) for w in words[star + 1 :]))

    @property
    def arity(self) -> int:
        return self.kind.arity

    def render_words(self, bounds: list[int], doc_words: list[str]) -> tuple[list[str], tuple[int, int]]:
        words = []
        span = None
        it = iter(bounds)
        for w in self.pattern.split():
            if w == "*":
                span = (len(words), len(words) + len(doc_words))
                words.extend(doc_words)
            elif "?" in w:
                out = w
                while "?" in out:
                    out = out.replace("?", str(next(it)), 1)
                words.append(out)
            else:
                words.append(w)
        return words, span

    def match_words(self, words: list[str]) -> tuple[list[int], tuple[int, int]] | None:
        """Match a tokenized utterance; returns (bounds, doc span) or None."""
        np_, ns = len(self._prefix), len(self._suffix)
        if len(words) < np_ + ns + 1:
            return None
        vals: list[int] = []
        for (is_slot, item), word in zip(self._prefix, words[:np_]):
            if is_slot:
                m = item.fullmatch(word)
                if not m:
                    return None
                vals.extend(int(g) for g in m.groups())
            elif word.lower() != item:
                return None
        tail = words[len(words) - ns :] if ns else []
        for (is_slot, item), word in zip(self._suffix, tail):
            if is_slot:
                m = item.fullmatch(word)
                if not m:
                    return None
                vals.extend(int(g) for g in m.groups())
            elif word.lower() != item:
                return None
        doc = words[np_ : len(words) - ns]
        if not doc or any(_is_cue_word(w) for w in doc):
            return None
        return vals, (np_, len(words) - ns)


@dataclass(frozen=True)
class AugmentedUtterance:
    text: tuple[str, ...]
    document_span: tuple[int, int]
    truth: StandardControlPrompt
    template_id: int

    def as_text(self) -> str:
        return " ".join(self.text)

    @property
    def document_words(self) -> tuple[str, ...]:
        return self.text[self.document_span[0] : self.document_span[1]]


def expand_template(
    t: PromptTemplate, bounds: list[int], doc_words: list[str]
) -> AugmentedUtterance:
    if len(bounds) != t.arity:
        raise TemplateArityError(
            f"template {t.template_id} takes {t.arity} bounds, got {len(bounds)}"
        )
    if t.kind is ControlKind.BETWEEN and bounds[0] > bounds[1]:
        raise TemplateArityError("between bounds must be sorted ascending")
    words, span = t.render_words(bounds, list(doc_words))
    return AugmentedUtterance(
        text=tuple(words),
        document_span=span,
        truth=_prompt_from(t.kind, bounds),
        template_id=t.template_id,
    )


def load_templates(path=None) -> list[PromptTemplate]:
    """Read the tab-separated template file (kind<TAB>pattern, one per line)."""
    if path is None:
        text = resources.files("lenctl.data").joinpath("templates.txt").read_text()
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, pattern = line.split("\t", 1)
        out.append(PromptTemplate(len(out), ControlKind(kind), pattern.strip()))
    return out


_DEFAULT_TEMPLATES: list[PromptTemplate] | None = None


def default_templates() -> list[PromptTemplate]:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = load_templates()
    return _DEFAULT_TEMPLATES


# -- parsing ------------------------------------------------------------------

# Generic length-phrase cues, used only after template matching fails: they
# detect conflicting constraints and count unparseable length phrases.
_CUE_PATTERNS = [
    (ControlKind.BETWEEN, re.compile(r"\bbetween\s+(\d+)\s+and\s+(\d+)\b", re.I)),
    (ControlKind.BETWEEN, re.compile(r"\b(\d+)\s+to\s+(\d+)\s+tokens?\b", re.I)),
    (
        ControlKind.MORE_THAN,
        re.compile(
            r"\b(?:more\s+than|at\s+least|longer\s+than|greater\s+than|over"
            r"|no\s+fewer\s+than|minimum\s+(?:length\s+)?(?:of\s+)?)\s*(\d+)\b",
            re.I,
        ),
    ),
    (
        ControlKind.LESS_THAN,
        re.compile(
            r"\b(?:less\s+than|at\s+most|shorter\s+than|fewer\s+than|under|within"
            r"|no\s+more\s+than|maximum\s+(?:length\s+)?(?:of\s+)?)\s*(\d+)\b",
            re.I,
        ),
    ),
    (
        ControlKind.EQUAL_TO,
        re.compile(r"\b(?:equal\s+to|exactly|with\s+length|length)\s+(\d+)\b", re.I),
    ),
    (ControlKind.EQUAL_TO, re.compile(r"\b(\d+)\s+tokens?\b", re.I)),
]


@dataclass
class ParserStats:
    """Counters for the cases the grammar cannot or will not resolve."""

    in_grammar: int = 0
    canonical: int = 0
    plain_none: int = 0
    unmatched_length_phrases: int = 0


def _scan_cues(text: str) -> list[tuple[ControlKind, tuple[int, ...]]]:
    taken: list[tuple[int, int]] = []
    found = []
    for kind, rx in _CUE_PATTERNS:
        for m in rx.finditer(text):
            span = m.span()
            if any(span[0] < e and span[1] > s for s, e in taken):
                continue
            taken.append(span)
            vals = tuple(sorted(int(g) for g in m.groups()))
            found.append((kind, vals))
    return found


def parse_utterance(u: str, stats: ParserStats | None = None) -> StandardControlPrompt:
    """Recover the length constraint from an utterance.

    In-grammar text (produced by `expand_template` over the shipped set, or a
    canonical rendering) parses to its exact truth prompt. Text with no
    recognizable length phrase, or with a length phrase outside the template
    grammar, maps to the none kind; the latter case increments
    ``stats.unmatched_length_phrases``. Conflicting phrases raise
    AmbiguousConstraintError rather than guessing.
    """
    try:
        p = parse_standard_prompt(u)
        if stats:
            stats.canonical += 1
        return p
    except InvalidPromptError:
        pass

    words = u.split()
    candidates: list[StandardControlPrompt] = []
    for t in default_templates():
        m = t.match_words(words)
        if m is None:
            continue
        vals, _span = m
        try:
            candidates.append(_prompt_from(t.kind, vals))
        except InvalidPromptError:
            continue
    if candidates:
        first = candidates[0]
        if any(c != first for c in candidates[1:]):
            raise AmbiguousConstraintError(f"conflicting template matches in: {u!r}")
        if stats:
            stats.in_grammar += 1
        return first

    cues = _scan_cues(u)
    distinct = {c for c in cues}
    if len(distinct) > 1:
        raise AmbiguousConstraintError(f"conflicting length phrases in: {u!r}")
    if stats:
        if cues:
            stats.unmatched_length_phrases += 1
        else:
            stats.plain_none += 1
    return StandardControlPrompt.none()


def sample_control_prompt(rng_seed, kinds) -> StandardControlPrompt:
    """Draw a random constraint: kind uniform over `kinds`, bounds uniform
    integers in [LENGTH_MIN, LENGTH_MAX], the between pair sorted."""
    kinds = sorted(set(kinds), key=lambda k: k.value)
    if not kinds:
        raise GrammarError("kinds must be non-empty")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind.arity == 0:
        return StandardControlPrompt.none()
    draws = sorted(int(v) for v in rng.integers(LENGTH_MIN, LENGTH_MAX + 1, size=kind.arity))
    if kind is ControlKind.EQUAL_TO:
        return StandardControlPrompt.equal_to(draws[0])
    if kind is ControlKind.MORE_THAN:
        return StandardControlPrompt.more_than(draws[0])
    if kind is ControlKind.LESS_THAN:
        return StandardControlPrompt.less_than(draws[0])
    return StandardControlPrompt.between(draws[0], draws[1])
