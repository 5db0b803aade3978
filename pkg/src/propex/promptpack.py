"""Prompt templates as versioned data, plus strict response parsers.

Templates live in a pack file, not in code: wording gets tuned per model and
swapping a pack must not require a rebuild. Slots are written ``[name]`` and
filled at render time. The parsers enforce the strict answer formats the
prompts demand (bare Yes/No, bare scalar or "None", three-column table);
anything else is malformed and handled by the caller's re-ask policy.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping


class UnboundSlot(Exception):
    """A template slot had no binding at render time."""


class MalformedScalar(Exception):
    """Scalar reply broke the no-full-sentence contract."""


class MalformedTable(Exception):
    """Table reply contained no parsable rows."""


SLOT_NAMES = ("property", "sentence", "text", "material", "value", "unit")
_SLOT_RE = re.compile(r"\[(%s)\]" % "|".join(SLOT_NAMES))

# Every workflow node a pack must provide a template for.
REQUIRED_NODES = (
    "stageA_classify",
    "multi_detect",
    "single_value",
    "single_unit",
    "single_material",
    "multi_table",
    "followup_value",
    "followup_unit",
    "followup_material",
    "table_classify",
    "table_extract",
    "figure_classify",
)


@dataclass(frozen=True)
class PromptTemplate:
    node_id: str
    template: str

    def slots(self) -> frozenset[str]:
        return frozenset(m.group(1) for m in _SLOT_RE.finditer(self.template))


class PromptPack:
    """A named, versioned set of templates keyed by workflow node."""

    def __init__(
        self, name: str, version: str, nodes: Mapping[str, PromptTemplate]
    ) -> None:
        missing = [n for n in REQUIRED_NODES if n not in nodes]
        if missing:
            raise ValueError(f"prompt pack {name!r} missing nodes: {missing}")
        self.name = name
        self.version = version
        self.nodes = dict(nodes)

    @property
    def version_tag(self) -> str:
        return f"{self.name}/{self.version}"

    def get(self, node_id: str) -> PromptTemplate:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"pack {self.version_tag} has no node {node_id!r}") from None

    @classmethod
    def from_obj(cls, obj: dict) -> "PromptPack":
        nodes = {
            node_id: PromptTemplate(node_id, spec["template"])
            for node_id, spec in obj["nodes"].items()
        }
        return cls(obj["name"], str(obj["version"]), nodes)

    @classmethod
    def load(cls, path: str | Path) -> "PromptPack":
        with open(path, encoding="utf-8") as fh:
            return cls.from_obj(json.load(fh))

    @classmethod
    def default(cls) -> "PromptPack":
        data = resources.files("propex.data").joinpath("prompt_pack_v1.json")
        return cls.from_obj(json.loads(data.read_text(encoding="utf-8")))


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every slot of ``template``; no other text is touched."""

    def fill(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise UnboundSlot(f"{template.node_id}: no binding for [{name}]")
        return bindings[name]

    return _SLOT_RE.sub(fill, template.template)


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------


class YesNo(enum.Enum):
    YES = "yes"
    NO = "no"
    MALFORMED = "malformed"


_TOKEN_STRIP = " \t\r\n.,;:!?'\"()[]"


def parse_yes_no(response: str) -> YesNo:
    """Classify a reply under the strict Yes/No contract.

    Only the first token counts, case-insensitive, punctuation trimmed.
    Full-sentence answers come out as MALFORMED so the caller can re-ask.
    """
    tokens = response.strip().split()
    if not tokens:
        return YesNo.MALFORMED
    first = tokens[0].strip(_TOKEN_STRIP).lower()
    if first == "yes":
        return YesNo.YES
    if first == "no":
        return YesNo.NO
    return YesNo.MALFORMED


def _is_none_literal(text: str) -> bool:
    return text.strip().rstrip(".").strip().lower() == "none"


def parse_scalar(response: str) -> str | None:
    """Parse a bare-scalar reply; the literal "None" becomes ``None``.

    Raises MalformedScalar for empty or sentence-shaped replies (internal
    sentence break, or five-plus words ending in terminal punctuation).
    """
    text = response.strip()
    if not text:
        raise MalformedScalar("empty reply")
    if _is_none_literal(text):
        return None
    if re.search(r"[.!?]\s+\S", text):
        raise MalformedScalar(f"multi-sentence reply: {text[:80]!r}")
    if len(text.split()) >= 5 and text[-1] in ".!?":
        raise MalformedScalar(f"full-sentence reply: {text[:80]!r}")
    return text


_DIVIDER_RE = re.compile(r"^[-:\s|+=]+$")


def _split_row(line: str) -> list[str] | None:
    if "|" in line:
        cells = [c.strip() for c in line.split("|")]
        # markdown-style borders leave empty outer cells
        while cells and cells[0] == "":
            cells.pop(0)
        while cells and cells[-1] == "":
            cells.pop()
        return cells
    if "\t" in line:
        return [c.strip() for c in line.split("\t")]
    return None


def parse_table(response: str) -> list[tuple[str, str, str]]:
    """Parse a three-column (material, value, unit) table reply.

    Accepts pipe- or tab-delimited rows; header and divider rows are
    skipped; "None" or empty cells become empty strings. A bare "None"
    reply is an explicit no-data answer (empty list); a reply with no
    parsable rows at all raises MalformedTable.
    """
    text = response.strip()
    if _is_none_literal(text):
        return []
    rows: list[tuple[str, str, str]] = []
    for line in text.splitlines():
        line = line.strip()
        if not line or _DIVIDER_RE.match(line):
            continue
        cells = _split_row(line)
        if cells is None or len(cells) < 3:
            continue
        lowered = [c.lower() for c in cells[:3]]
        if lowered[0] == "material" and lowered[1] == "value":
            continue
        rows.append(
            tuple("" if _is_none_literal(c) or not c else c for c in cells[:3])
        )
    if not rows:
        raise MalformedTable(f"no parsable rows in: {text[:120]!r}")
    return rows
