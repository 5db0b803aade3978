"""Evaluation against hand-extracted ground truth.

Matching is per passage: extracted triplets are compared to the passage's
ground-truth triplets in extraction order, each ground-truth triplet is
consumed by its first match, surplus or non-matching extractions are false
positives, unconsumed ground truth are false negatives. Scores are reported
for single-valued and multi-valued passages (passages that have data) and
overall (every passage, including no-data ones).

Triplet equivalence is deliberately unforgiving: units must be textually
identical up to whitespace/case (and encoding of the minus sign), values
must agree exactly including inequality/range/approximation markers, and
materials must identify the same unique system, either by equal normalized
text, by equal parsed compositions, or through an explicit human-curated
equivalence pair.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dbbuild import (
    NonDiscreteValue,
    NotUniquelyIdentifiable,
    _normalize_value_text,
    _parse_plain_number,
    compositions_equivalent,
    parse_composition,
)
from .engine import ExtractionRecord, Triplet

CATEGORIES = ("single", "multi", "none")
REPORT_ROWS = ("single", "multi", "overall")


class UnresolvedProvenance(Exception):
    """Extraction records point at passages absent from the ground truth."""

    def __init__(self, keys: Sequence[tuple[str, object]]) -> None:
        self.keys = list(keys)
        preview = ", ".join(f"{d}#{i}" for d, i in self.keys[:5])
        super().__init__(
            f"{len(self.keys)} record passage(s) not in ground truth: {preview}"
        )


# ---------------------------------------------------------------------------
# Equivalence rules
# ---------------------------------------------------------------------------

_DASHES = {"−": "-", "–": "-", "—": "-"}


def _norm_text(text: str) -> str:
    out = " ".join(text.split()).casefold()
    for src, dst in _DASHES.items():
        out = out.replace(src, dst)
    return out


def units_equivalent(a: str, b: str) -> bool:
    """Textual unit equality after whitespace/case/dash-encoding folding."""
    return _norm_text(a) == _norm_text(b)


@dataclass(frozen=True)
class _ValueShape:
    marker: str  # "" | "<" | ">" | "<=" | ">=" | "~"
    numbers: tuple[float, ...]  # one number, or two for a range
    uncertainty: float | None


_MARKERS = (
    ("<=", "<="),
    (">=", ">="),
    ("≤", "<="),
    ("≥", ">="),
    ("≲", "<="),
    ("≳", ">="),
    ("<", "<"),
    (">", ">"),
    ("~", "~"),
    ("≈", "~"),
    ("∼", "~"),
)
_RANGE_SPLIT_RE = re.compile(
    r"^\s*(?P<lo>\S.*?)\s*(?:\bto\b|(?<=[0-9.\s])-(?=[0-9+]))\s*(?P<hi>\S.*)$",
    re.IGNORECASE,
)


def _value_shape(text: str) -> _ValueShape | None:
    t = _normalize_value_text(text)
    marker = ""
    for token, canon in _MARKERS:
        if t.startswith(token):
            marker = canon
            t = t[len(token) :].strip()
            break
    uncertainty = None
    if "±" in t:
        t, _, unc_part = t.partition("±")
        t = t.strip()
        try:
            uncertainty = _parse_plain_number(unc_part)
        except NonDiscreteValue:
            return None
    try:
        return _ValueShape(marker, (_parse_plain_number(t),), uncertainty)
    except NonDiscreteValue:
        pass
    split = _RANGE_SPLIT_RE.match(t)
    if split:
        try:
            lo = _parse_plain_number(split.group("lo"))
            hi = _parse_plain_number(split.group("hi"))
            return _ValueShape(marker, (lo, hi), uncertainty)
        except NonDiscreteValue:
            return None
    return None


def values_equivalent(ground: str, extracted: str) -> bool:
    """Value equality including inequality/range/approximation markers.

    Uncertainty present in the extraction must match the ground truth;
    ground-truth uncertainty that was not extracted is forgiven.
    """
    if _norm_text(ground) == _norm_text(extracted):
        return True
    gs, es = _value_shape(ground), _value_shape(extracted)
    if gs is None or es is None:
        return False
    if gs.marker != es.marker or gs.numbers != es.numbers:
        return False
    if es.uncertainty is not None and es.uncertainty != gs.uncertainty:
        return False
    return True


class EquivalenceOverrides:
    """Human-curated pairs of material names that denote the same system."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()) -> None:
        self.pairs = {frozenset((_norm_text(a), _norm_text(b))) for a, b in pairs}

    @classmethod
    def load(cls, path: str | Path) -> "EquivalenceOverrides":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        pairs = obj["pairs"] if isinstance(obj, dict) else obj
        return cls((a, b) for a, b in pairs)

    def asserts_equal(self, a: str, b: str) -> bool:
        return frozenset((_norm_text(a), _norm_text(b))) in self.pairs


def materials_equivalent(
    ground: str, extracted: str, overrides: EquivalenceOverrides | None = None
) -> bool:
    if _norm_text(ground) == _norm_text(extracted):
        return True
    if overrides is not None and overrides.asserts_equal(ground, extracted):
        return True
    try:
        cg = parse_composition(ground)
        ce = parse_composition(extracted)
    except NotUniquelyIdentifiable:
        return False
    return compositions_equivalent(cg, ce)


def triplets_equivalent(
    ground: Triplet,
    extracted: Triplet,
    overrides: EquivalenceOverrides | None = None,
) -> bool:
    """The full equivalence rule; arguments are (ground truth, extracted)."""
    return (
        units_equivalent(ground.unit, extracted.unit)
        and values_equivalent(ground.value, extracted.value)
        and materials_equivalent(ground.material, extracted.material, overrides)
    )


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


def match_passage(
    ground: Sequence[Triplet],
    extracted: Sequence[Triplet],
    overrides: EquivalenceOverrides | None = None,
) -> tuple[int, int, int]:
    """Greedy one-match-per-ground-truth accounting for one passage.

    Extracted triplets are processed in order; each one either consumes the
    first still-unconsumed equivalent ground triplet (a true positive) or
    counts as a false positive. Leftover ground triplets are false
    negatives. Zero ground and zero extracted is a clean true negative.
    """
    consumed = [False] * len(ground)
    tp = fp = 0
    for ext in extracted:
        hit = None
        for gi, g in enumerate(ground):
            if not consumed[gi] and triplets_equivalent(g, ext, overrides):
                hit = gi
                break
        if hit is None:
            fp += 1
        else:
            consumed[hit] = True
            tp += 1
    return tp, fp, len(ground) - tp


def optimal_match_tp(
    ground: Sequence[Triplet],
    extracted: Sequence[Triplet],
    overrides: EquivalenceOverrides | None = None,
) -> int:
    """Maximum-bipartite-matching TP count (augmenting-path search).

    Independent of the greedy order; used to flag passages where greedy
    matching is order-sensitive because one extracted triplet is equivalent
    to several distinct ground triplets.
    """
    adjacency = [
        [
            gi
            for gi, g in enumerate(ground)
            if triplets_equivalent(g, ext, overrides)
        ]
        for ext in extracted
    ]
    owner: list[int | None] = [None] * len(ground)

    def assign(ei: int, visited: set[int]) -> bool:
        for gi in adjacency[ei]:
            if gi in visited:
                continue
            visited.add(gi)
            if owner[gi] is None or assign(owner[gi], visited):
                owner[gi] = ei
                return True
        return False

    return sum(1 for ei in range(len(extracted)) if assign(ei, set()))


# ---------------------------------------------------------------------------
# Ground truth and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthPassage:
    doc_id: str
    sentence_index: int
    category: str  # "single" | "multi" | "none"
    triplets: tuple[Triplet, ...]

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"bad category {self.category!r}")
        if (self.category == "none") != (len(self.triplets) == 0):
            raise ValueError(
                f"{self.doc_id}#{self.sentence_index}: category {self.category!r} "
                f"inconsistent with {len(self.triplets)} triplet(s)"
            )


class GroundTruthSet:
    def __init__(self, passages: Iterable[GroundTruthPassage] = ()) -> None:
        self.passages: dict[tuple[str, int], GroundTruthPassage] = {}
        for p in passages:
            self.add(p)

    def add(self, passage: GroundTruthPassage) -> None:
        key = (passage.doc_id, passage.sentence_index)
        if key in self.passages:
            raise ValueError(f"duplicate ground-truth passage {key}")
        self.passages[key] = passage

    def __len__(self) -> int:
        return len(self.passages)

    def total_triplets(self) -> int:
        return sum(len(p.triplets) for p in self.passages.values())

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruthSet":
        gt = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                gt.add(
                    GroundTruthPassage(
                        doc_id=obj["doc_id"],
                        sentence_index=obj["sentence_index"],
                        category=obj["category"],
                        triplets=tuple(
                            Triplet(t["material"], t["value"], t["unit"])
                            for t in obj.get("triplets", [])
                        ),
                    )
                )
        return gt

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (doc_id, idx), p in sorted(self.passages.items()):
                obj = {
                    "doc_id": doc_id,
                    "sentence_index": idx,
                    "category": p.category,
                    "triplets": [
                        {"material": t.material, "value": t.value, "unit": t.unit}
                        for t in p.triplets
                    ],
                }
                fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True))
                fh.write("\n")

    @classmethod
    def from_extraction(cls, records: Iterable[ExtractionRecord]) -> "GroundTruthSet":
        """Treat an extraction as its own ground truth (self-check runs)."""
        by_passage: dict[tuple[str, int], list[Triplet]] = {}
        for rec in records:
            if rec.sentence_index is None:
                continue
            by_passage.setdefault((rec.doc_id, rec.sentence_index), []).append(
                rec.triplet
            )
        return cls(
            GroundTruthPassage(
                doc_id,
                idx,
                "single" if len(triplets) == 1 else "multi",
                tuple(triplets),
            )
            for (doc_id, idx), triplets in sorted(by_passage.items())
        )


@dataclass
class CategoryScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    precision_defined: bool = False
    recall_defined: bool = False

    def finish(self) -> "CategoryScore":
        if self.tp + self.fp > 0:
            self.precision = self.tp / (self.tp + self.fp)
            self.precision_defined = True
        if self.tp + self.fn > 0:
            self.recall = self.tp / (self.tp + self.fn)
            self.recall_defined = True
        return self

    def to_obj(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
        }


@dataclass(frozen=True)
class PassageDecision:
    doc_id: str
    sentence_index: int
    category: str
    tp: int
    fp: int
    fn: int
    order_sensitive: bool  # greedy TP differs from optimal-matching TP

    def to_obj(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "sentence_index": self.sentence_index,
            "category": self.category,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "order_sensitive": self.order_sensitive,
        }


@dataclass
class MatchReport:
    categories: dict[str, CategoryScore]
    ledger: list[PassageDecision] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "categories": {k: v.to_obj() for k, v in self.categories.items()},
            "ledger": [d.to_obj() for d in self.ledger],
        }

    def render_table(self) -> str:
        lines = [
            f"{'':>10} {'TP':>6} {'FP':>6} {'FN':>6} {'Precision':>10} {'Recall':>8}"
        ]
        for row in REPORT_ROWS:
            score = self.categories[row]
            prec = f"{100.0 * score.precision:.1f}%"
            if not score.precision_defined:
                prec += "*"
            rec = f"{100.0 * score.recall:.1f}%"
            if not score.recall_defined:
                rec += "*"
            lines.append(
                f"{row:>10} {score.tp:>6} {score.fp:>6} {score.fn:>6} "
                f"{prec:>10} {rec:>8}"
            )
        if any(
            not (s.precision_defined and s.recall_defined)
            for s in self.categories.values()
        ):
            lines.append("* undefined (zero denominator), reported as 0")
        return "\n".join(lines)


def evaluate(
    gt: GroundTruthSet,
    records: Iterable[ExtractionRecord],
    overrides: EquivalenceOverrides | None = None,
) -> MatchReport:
    """Score an extraction run against ground truth, per category.

    Every record must resolve to a ground-truth passage by
    (doc_id, sentence_index); otherwise UnresolvedProvenance is raised with
    the offending keys.
    """
    extracted: dict[tuple[str, int], list[Triplet]] = {}
    unresolved: list[tuple[str, object]] = []
    for rec in records:
        key = (rec.doc_id, rec.sentence_index)
        if rec.sentence_index is None or key not in gt.passages:
            unresolved.append(key)
            continue
        extracted.setdefault(key, []).append(rec.triplet)
    if unresolved:
        raise UnresolvedProvenance(unresolved)

    scores = {row: CategoryScore() for row in REPORT_ROWS}
    ledger: list[PassageDecision] = []
    for key in sorted(gt.passages):
        passage = gt.passages[key]
        ext = extracted.get(key, [])
        tp, fp, fn = match_passage(passage.triplets, ext, overrides)
        optimal = optimal_match_tp(passage.triplets, ext, overrides)
        ledger.append(
            PassageDecision(
                doc_id=passage.doc_id,
                sentence_index=passage.sentence_index,
                category=passage.category,
                tp=tp,
                fp=fp,
                fn=fn,
                order_sensitive=optimal != tp,
            )
        )
        for row in ("overall", passage.category):
            if row in scores:
                scores[row].tp += tp
                scores[row].fp += fp
                scores[row].fn += fn
    for score in scores.values():
        score.finish()
    return MatchReport(categories=scores, ledger=ledger)
