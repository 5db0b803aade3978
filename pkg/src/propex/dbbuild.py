"""Database tiers built from extraction records.

raw: every extracted mention, as written. cleaned: raw minus exact duplicate
triplets repeated within one paper (cross-paper duplicates stay; they carry
frequency information). standardized: the machine-readable subset, where the
material parses to a unique elemental composition, the value is one discrete
number, and the unit converts to the property's canonical unit. Entries that
do not qualify are excluded with a single machine-readable reason, never
silently dropped. Composition-rule filters (element count, excluded
elements) carve domain-specific databases out of the standardized tier.

Everything here is deterministic: what the parser cannot resolve is
rejected, and a human-editable override file can map stubborn material
strings to compositions without code changes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .engine import ExtractionRecord


class NotUniquelyIdentifiable(Exception):
    """Material text does not pin down one elemental composition."""


class NonDiscreteValue(Exception):
    """Value is a range, limit, approximation, or not a number at all."""


class UnknownUnit(Exception):
    """Unit spelling missing from the property's unit table."""


REASON_MATERIAL = "material_not_unique"
REASON_VALUE = "value_not_discrete"
REASON_UNIT = "unknown_unit"


ELEMENTS = frozenset(
    """
    H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni
    Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I
    Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt
    Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr
    Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og
    """.split()
)

_SUPERSCRIPTS = "⁰¹²³⁴⁵⁶⁷⁸⁹"
_SUBSCRIPTS = "".join(chr(0x2080 + d) for d in range(10))
_DIGIT_TRANSLATION = str.maketrans(
    _SUPERSCRIPTS + _SUBSCRIPTS,
    "0123456789" * 2,
)
_DASH_TRANSLATION = str.maketrans({"−": "-", "–": "-", "—": "-"})


# ---------------------------------------------------------------------------
# Compositions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Composition:
    """Element -> mole fraction mapping, in standard AXBYCZ form."""

    fractions: tuple[tuple[str, float], ...]  # sorted by element symbol

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "Composition":
        items = tuple(sorted(mapping.items()))
        if not items:
            raise ValueError("composition needs at least one element")
        for symbol, amount in items:
            if symbol not in ELEMENTS:
                raise ValueError(f"not an element: {symbol!r}")
            if amount <= 0:
                raise ValueError(f"non-positive amount for {symbol}: {amount}")
        return cls(items)

    def as_dict(self) -> dict[str, float]:
        return dict(self.fractions)

    @property
    def n_elements(self) -> int:
        return len(self.fractions)

    def contains(self, symbol: str) -> bool:
        return any(el == symbol for el, _ in self.fractions)

    def normalized(self, total: float = 100.0) -> "Composition":
        scale = total / sum(amount for _, amount in self.fractions)
        return Composition(
            tuple((el, amount * scale) for el, amount in self.fractions)
        )

    def formula(self) -> str:
        return "".join(
            f"{el}{format(amount, '.10g')}" for el, amount in self.fractions
        )

    def canonical_key(self) -> str:
        """Stable text key for uniqueness counts (normalized, 8 sig figs)."""
        return "".join(
            f"{el}{format(amount, '.8g')}"
            for el, amount in self.normalized().fractions
        )


def compositions_equivalent(
    a: Composition, b: Composition, rel_tol: float = 1e-6
) -> bool:
    """Equality of compositions after normalizing both to sum 100."""
    na, nb = a.normalized(), b.normalized()
    if [el for el, _ in na.fractions] != [el for el, _ in nb.fractions]:
        return False
    return all(
        abs(x - y) <= rel_tol * max(abs(x), abs(y))
        for (_, x), (_, y) in zip(na.fractions, nb.fractions)
    )


_BINDING_RE = re.compile(
    r"\(\s*([a-z])\s*=\s*([0-9]+(?:\.[0-9]+)?)\s*"
    r"(?:[,;]\s*([a-z])\s*=\s*([0-9]+(?:\.[0-9]+)?)\s*)*\)"
)
_BINDING_PAIR_RE = re.compile(r"([a-z])\s*=\s*([0-9]+(?:\.[0-9]+)?)")
_SUBSCRIPT_CHARS = "0123456789.+-xyz"
_EXPR_TOKEN_RE = re.compile(r"([0-9]+(?:\.[0-9]+)?|[xyz]|[+\-])")


def _eval_subscript(expr: str, bindings: Mapping[str, float], source: str) -> float:
    tokens = _EXPR_TOKEN_RE.findall(expr)
    if not tokens or "".join(tokens) != expr:
        raise NotUniquelyIdentifiable(f"bad stoichiometry {expr!r} in {source!r}")

    def term(tok: str) -> float:
        if tok in ("x", "y", "z"):
            if tok not in bindings:
                raise NotUniquelyIdentifiable(
                    f"unresolved variable {tok!r} in {source!r}"
                )
            return bindings[tok]
        return float(tok)

    if tokens[0] in "+-":
        raise NotUniquelyIdentifiable(f"bad stoichiometry {expr!r} in {source!r}")
    value = term(tokens[0])
    i = 1
    while i < len(tokens):
        op = tokens[i]
        if op not in "+-" or i + 1 >= len(tokens) or tokens[i + 1] in "+-":
            raise NotUniquelyIdentifiable(
                f"bad stoichiometry {expr!r} in {source!r}"
            )
        nxt = term(tokens[i + 1])
        value = value + nxt if op == "+" else value - nxt
        i += 2
    return value


def parse_composition(
    material: str, overrides: Mapping[str, str] | None = None
) -> Composition:
    """Parse a material string into an elemental composition.

    Handles element sequences with optional decimal subscripts (absent
    subscript means 1, as in "CuZr2") and subscript arithmetic with
    variables bound in a trailing parenthetical, e.g.
    "Mg100-xCuxGd10 (x=15)". Family or group names, qualitative
    descriptors, and unresolved variables raise NotUniquelyIdentifiable:
    those entries do not belong in the standardized tier.

    ``overrides`` maps verbatim material text to a formula string, letting a
    human supply the composition for strings the parser rejects.
    """
    cleaned = " ".join(material.split())
    if overrides:
        target = overrides.get(cleaned) or overrides.get(material)
        if target is not None:
            return parse_composition(target)
    if not cleaned:
        raise NotUniquelyIdentifiable("empty material text")

    text = cleaned.translate(_DIGIT_TRANSLATION).translate(_DASH_TRANSLATION)

    bindings: dict[str, float] = {}

    def grab_binding(match: re.Match) -> str:
        for var, number in _BINDING_PAIR_RE.findall(match.group(0)):
            bindings[var] = float(number)
        return ""

    text = _BINDING_RE.sub(grab_binding, text)
    text = "".join(text.split())

    amounts: dict[str, float] = {}
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if not ch.isupper():
            raise NotUniquelyIdentifiable(
                f"not a unique composition: {material!r}"
            )
        symbol = None
        if i + 1 < n and text[i + 1].islower() and text[i : i + 2] in ELEMENTS:
            symbol = text[i : i + 2]
            i += 2
        elif ch in ELEMENTS:
            symbol = ch
            i += 1
        else:
            raise NotUniquelyIdentifiable(
                f"not a unique composition: {material!r}"
            )
        if i < n and text[i] == "(":
            depth = text.find(")", i + 1)
            if depth == -1:
                raise NotUniquelyIdentifiable(
                    f"unbalanced parentheses in {material!r}"
                )
            amount = _eval_subscript(text[i + 1 : depth], bindings, material)
            i = depth + 1
        else:
            j = i
            while j < n and text[j] in _SUBSCRIPT_CHARS:
                j += 1
            sub = text[i:j]
            i = j
            amount = 1.0 if sub == "" else _eval_subscript(sub, bindings, material)
        if amount < 0:
            raise NotUniquelyIdentifiable(
                f"negative amount for {symbol} in {material!r}"
            )
        if amount > 0:
            amounts[symbol] = amounts.get(symbol, 0.0) + amount
    if not amounts:
        raise NotUniquelyIdentifiable(f"no elements found in {material!r}")
    return Composition.from_mapping(amounts)


# ---------------------------------------------------------------------------
# Values and units
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParsedValue:
    value: float
    uncertainty: float | None = None


_NUM = r"[+-]?[0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?"
_POW10 = r"10\^[({]?([+-]?[0-9]+(?:\.[0-9]+)?)[)}]?"
_SCI_RE = re.compile(rf"({_NUM})\s*[·×x*]\s*{_POW10}$")
_POW10_RE = re.compile(rf"{_POW10}$")
_NUM_RE = re.compile(rf"({_NUM})$")
_RANGE_RE = re.compile(rf"({_NUM})\s*(?:-|\bto\b)\s*({_NUM})", re.IGNORECASE)
_INEQUALITY_CHARS = "<>≤≥≲≳"
_APPROX_CHARS = "~≈∼"


def _normalize_value_text(text: str) -> str:
    text = text.strip().translate(_DASH_TRANSLATION)
    # superscript exponents: "10¹³" -> "10^13"
    return re.sub(
        r"10([⁰¹²³⁴-⁹⁺⁻]+)",
        lambda m: "10^"
        + m.group(1)
        .replace("⁻", "-")
        .replace("⁺", "+")
        .translate(_DIGIT_TRANSLATION),
        text,
    )


def _parse_plain_number(text: str) -> float:
    text = text.strip()
    match = _SCI_RE.fullmatch(text)
    if match:
        return float(match.group(1)) * 10.0 ** float(match.group(2))
    match = _POW10_RE.fullmatch(text)
    if match:
        return 10.0 ** float(match.group(1))
    match = _NUM_RE.fullmatch(text)
    if match:
        return float(match.group(1))
    raise NonDiscreteValue(f"not a discrete numeric literal: {text!r}")


def parse_discrete_value(value_text: str) -> ParsedValue:
    """Parse a value string that must denote one discrete number.

    Inequality markers, approximation markers, and ranges are rejected:
    they do not qualify for the standardized tier. "a ± b" keeps the
    central value and carries the uncertainty alongside.
    """
    text = _normalize_value_text(value_text)
    if not text:
        raise NonDiscreteValue("empty value")
    if text[0] in _INEQUALITY_CHARS or text.startswith(("<=", ">=")):
        raise NonDiscreteValue(f"inequality-marked value: {value_text!r}")
    if any(c in _APPROX_CHARS for c in text):
        raise NonDiscreteValue(f"approximate value: {value_text!r}")
    uncertainty = None
    if "±" in text:
        central, _, unc = text.partition("±")
        uncertainty = _parse_plain_number(unc)
        text = central.strip()
    try:
        return ParsedValue(_parse_plain_number(text), uncertainty)
    except NonDiscreteValue:
        if _RANGE_RE.fullmatch(text):
            raise NonDiscreteValue(f"range value: {value_text!r}") from None
        raise


def normalize_unit_spelling(unit: str) -> str:
    """Collapse a unit spelling to the lookup key form.

    Spaces and dot operators vanish, unicode minus becomes "-", superscript
    exponents become "^n", and bracketed exponents lose their brackets, so
    "K s⁻¹", "Ks^(-1)" and "Ks^-1" share one key. Spellings that differ
    beyond that ("Ks-1", "K/s") are distinct keys and each needs its own
    unit-table entry.
    """
    text = "".join(unit.split()).translate(_DASH_TRANSLATION)
    text = text.replace("·", "").replace("⋅", "")
    text = re.sub(
        r"([⁰¹²³⁴-⁹⁻⁺]+)",
        lambda m: "^"
        + m.group(1)
        .replace("⁻", "-")
        .replace("⁺", "+")
        .translate(_DIGIT_TRANSLATION),
        text,
    )
    text = re.sub(r"\^[({]([+-]?[0-9]+)[)}]", r"^\1", text)
    return text


@dataclass(frozen=True)
class CanonicalValue:
    value: float
    unit: str
    uncertainty: float | None = None


class UnitTable:
    """Canonical unit plus multiplicative factors for known spellings."""

    def __init__(
        self, property_name: str, canonical: str, factors: Mapping[str, float]
    ) -> None:
        self.property_name = property_name
        self.canonical = canonical
        self.factors = {
            normalize_unit_spelling(spelling): float(factor)
            for spelling, factor in factors.items()
        }

    @staticmethod
    def _factor(raw: float | int | str) -> float:
        # "1/60" in a config file stays an exact float via Fraction
        if isinstance(raw, str):
            return float(Fraction(raw))
        return float(raw)

    @classmethod
    def from_obj(cls, obj: dict) -> "UnitTable":
        factors = {k: cls._factor(v) for k, v in obj["units"].items()}
        return cls(obj["property"], obj["canonical"], factors)

    @classmethod
    def load(cls, path: str | Path) -> "UnitTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))

    @classmethod
    def bundled(cls, name: str) -> "UnitTable":
        data = resources.files("propex.data").joinpath(f"units_{name}.json")
        return cls.from_obj(json.loads(data.read_text(encoding="utf-8")))

    def factor_for(self, unit_text: str) -> float:
        key = normalize_unit_spelling(unit_text)
        try:
            return self.factors[key]
        except KeyError:
            raise UnknownUnit(
                f"{unit_text!r} not in unit table for {self.property_name!r}"
            ) from None


def normalize_value_unit(
    value: str, unit: str, unit_table: UnitTable
) -> CanonicalValue:
    """Convert a (value, unit) pair to the property's canonical unit."""
    parsed = parse_discrete_value(value)
    factor = unit_table.factor_for(unit)
    return CanonicalValue(
        value=parsed.value * factor,
        unit=unit_table.canonical,
        uncertainty=None if parsed.uncertainty is None else parsed.uncertainty * factor,
    )


# ---------------------------------------------------------------------------
# Tiers
# ---------------------------------------------------------------------------


def _ws(text: str) -> str:
    return " ".join(text.split())


def clean(records: Sequence[ExtractionRecord]) -> list[ExtractionRecord]:
    """Drop exact duplicate triplets repeated within a single paper.

    Input order is provenance order, so the earliest occurrence survives.
    Identical triplets from different papers all stay.
    """
    seen: set[tuple[str, str, str, str]] = set()
    kept: list[ExtractionRecord] = []
    for rec in records:
        key = (
            rec.doc_id,
            _ws(rec.triplet.material),
            _ws(rec.triplet.value),
            _ws(rec.triplet.unit),
        )
        if key in seen:
            continue
        seen.add(key)
        kept.append(rec)
    return kept


@dataclass(frozen=True)
class StandardizedEntry:
    record: ExtractionRecord
    composition: Composition
    canonical_value: float
    canonical_unit: str
    canonical_uncertainty: float | None = None


@dataclass(frozen=True)
class Exclusion:
    record: ExtractionRecord
    reason: str
    detail: str = ""


@dataclass
class StandardizedDB:
    entries: list[StandardizedEntry]
    exclusions: list[Exclusion]


def standardize(
    cleaned: Sequence[ExtractionRecord],
    unit_table: UnitTable,
    composition_overrides: Mapping[str, str] | None = None,
) -> StandardizedDB:
    """Keep entries with a unique composition, discrete value, known unit.

    Each rejected entry carries exactly one reason code, checked in the
    order material, value, unit.
    """
    entries: list[StandardizedEntry] = []
    exclusions: list[Exclusion] = []
    for rec in cleaned:
        try:
            composition = parse_composition(
                rec.triplet.material, composition_overrides
            )
        except NotUniquelyIdentifiable as exc:
            exclusions.append(Exclusion(rec, REASON_MATERIAL, str(exc)))
            continue
        try:
            parsed = parse_discrete_value(rec.triplet.value)
        except NonDiscreteValue as exc:
            exclusions.append(Exclusion(rec, REASON_VALUE, str(exc)))
            continue
        try:
            factor = unit_table.factor_for(rec.triplet.unit)
        except UnknownUnit as exc:
            exclusions.append(Exclusion(rec, REASON_UNIT, str(exc)))
            continue
        entries.append(
            StandardizedEntry(
                record=rec,
                composition=composition,
                canonical_value=parsed.value * factor,
                canonical_unit=unit_table.canonical,
                canonical_uncertainty=(
                    None if parsed.uncertainty is None else parsed.uncertainty * factor
                ),
            )
        )
    return StandardizedDB(entries, exclusions)


def filter_domain(
    entries: Iterable[StandardizedEntry],
    min_elements: int | None = None,
    exclude_elements: Iterable[str] | None = None,
) -> list[StandardizedEntry]:
    """Composition-predicate filter; provenance is untouched."""
    excluded = frozenset(exclude_elements or ())
    kept = []
    for entry in entries:
        if min_elements is not None and entry.composition.n_elements < min_elements:
            continue
        if excluded and any(entry.composition.contains(el) for el in excluded):
            continue
        kept.append(entry)
    return kept


def unique_datapoints(entries: Iterable[StandardizedEntry]) -> int:
    """Distinct (composition, value, unit) combinations."""
    return len(
        {
            (
                e.composition.canonical_key(),
                format(e.canonical_value, ".10g"),
                e.canonical_unit,
            )
            for e in entries
        }
    )


def unique_compositions(entries: Iterable[StandardizedEntry]) -> int:
    return len({e.composition.canonical_key() for e in entries})
