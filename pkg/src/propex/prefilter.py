"""Cheap numeric prefilter: drop sentences that cannot hold a datapoint.

Values to extract are numbers, so a sentence without any numeric token can be
discarded before spending an LLM call on it. The token definition errs on the
side of keeping: a false keep costs one cheap classification prompt, a false
drop loses a datapoint forever.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .corpus import Document

# ASCII digits, superscript/subscript digits (exponents, stoichiometry), and
# vulgar fractions all count as numeric tokens.
_NUMERIC_RE = re.compile(
    "[0-9"
    "⁰¹²³⁴-⁹"  # superscript 0-9
    "₀-₉"  # subscript 0-9
    "¼-¾⅐-⅞"  # vulgar fractions
    "]"
)


@dataclass(frozen=True)
class CandidateSentence:
    doc_id: str
    sentence_index: int
    text: str


def contains_number(sentence: str) -> bool:
    """True iff the sentence contains a numeric token."""
    return _NUMERIC_RE.search(sentence) is not None


def prefilter_stream(doc: Document) -> list[CandidateSentence]:
    """Sentences of ``doc`` that contain a number, in source order."""
    return [
        CandidateSentence(doc.doc_id, index, text)
        for index, text in enumerate(doc.sentences)
        if contains_number(text)
    ]
