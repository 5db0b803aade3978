"""Document ingestion: markup stripping, sentence segmentation, passage assembly.

A Document is the unit the rest of the pipeline operates on: an ordered list
of body sentences plus the tables and figure captions harvested from the same
file. A Passage is the three-part context (title, preceding sentence, target
sentence) handed to the extraction prompts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable, Iterator
from xml.etree import ElementTree as ET


class UnparsableMarkup(Exception):
    """Input markup is malformed beyond recovery."""


class MissingTitle(Exception):
    """No title element found and no fallback title supplied."""


class IndexOutOfRange(IndexError):
    """Requested sentence index does not exist in the document."""


# Sentinel target index meaning "the passage targets the document title".
TITLE_INDEX = -1

CELL_SEPARATOR = " | "


@dataclass(frozen=True)
class TableEntry:
    text: str
    caption: str
    index: int


@dataclass(frozen=True)
class FigureCaption:
    caption: str
    index: int


@dataclass
class Document:
    doc_id: str
    title: str
    sentences: list[str] = field(default_factory=list)
    tables: list[TableEntry] = field(default_factory=list)
    figure_captions: list[FigureCaption] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be nonempty")

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "title": self.title,
            "sentences": list(self.sentences),
            "tables": [
                {"text": t.text, "caption": t.caption, "index": t.index}
                for t in self.tables
            ],
            "figure_captions": [
                {"caption": f.caption, "index": f.index}
                for f in self.figure_captions
            ],
        }

    @classmethod
    def from_record(cls, record: dict) -> "Document":
        return cls(
            doc_id=record["doc_id"],
            title=record["title"],
            sentences=list(record.get("sentences", [])),
            tables=[
                TableEntry(t["text"], t["caption"], t["index"])
                for t in record.get("tables", [])
            ],
            figure_captions=[
                FigureCaption(f["caption"], f["index"])
                for f in record.get("figure_captions", [])
            ],
        )


@dataclass(frozen=True)
class Passage:
    doc_id: str
    target_index: int
    title: str
    preceding: str | None
    target: str

    def flatten(self) -> str:
        """Render the passage as one text block: title, preceding, target."""
        if self.target_index == TITLE_INDEX:
            return self.title
        parts = [self.title]
        if self.preceding is not None:
            parts.append(self.preceding)
        parts.append(self.target)
        return " ".join(parts)


# ---------------------------------------------------------------------------
# Sentence segmentation
# ---------------------------------------------------------------------------

# Tokens that end with a period without ending a sentence. Lowercase, period
# stripped; "e.g"/"i.e" keep their internal dot. Journal-name fragments
# (appl, phys, ...) are included so inline citations stay in one piece.
ABBREVIATIONS = frozenset(
    {
        "fig", "figs", "ref", "refs", "eq", "eqs", "eqn", "eqns",
        "tab", "tabs", "sec", "secs", "no", "nos", "al", "etc",
        "e.g", "i.e", "vs", "cf", "ca", "approx", "resp",
        "dr", "prof", "mr", "mrs", "ms", "st", "inc", "ltd", "co",
        "wt", "max", "min",
        "appl", "phys", "rev", "lett", "chem", "mater", "sci", "proc", "soc",
    }
)

# Characters that may trail a terminator yet belong to the closing sentence.
_CLOSERS = ")\"'”’]"

# Characters a new sentence may start with.
_OPENERS = "(\"'“‘["


def _starts_sentence(ch: str) -> bool:
    return ch.isupper() or ch.isdigit() or ch in _OPENERS


def _word_before(text: str, stop: int, limit: int) -> str:
    j = stop
    while j > limit and (text[j - 1].isalpha() or text[j - 1] == "."):
        j -= 1
    return text[j:stop]


def _token_at(text: str, pos: int) -> str:
    end = pos
    while end < len(text) and not text[end].isspace():
        end += 1
    return text[pos:end]


def _protected_period(text: str, i: int, start: int, next_pos: int) -> bool:
    """True when the period at ``i`` must not end a sentence."""
    word = _word_before(text, i, start)
    if not word or word.startswith("."):
        return False
    if word.lower().rstrip(".") in ABBREVIATIONS or word.lower() in ABBREVIATIONS:
        return True
    if len(word) == 1 and word.isalpha():
        # Single letters are initials ("M. P. Smith", "J. Appl. Phys.")
        # when the neighboring token continues the chain; otherwise they
        # are unit symbols ending a real sentence ("... at 300 K. Next").
        before = text[: i - len(word)].rstrip()
        prev_token = before.rsplit(" ", 1)[-1] if before else ""
        if prev_token.endswith("."):
            return True
        nxt = _token_at(text, next_pos)
        if (
            len(nxt) >= 2
            and nxt.endswith(".")
            and nxt[:-1].isalpha()
            and nxt[0].isupper()
            and nxt[:-1].lower() not in ABBREVIATIONS
            and len(nxt) <= 7
        ):
            return True
    return False


def segment_sentences(body: str) -> list[str]:
    """Split body text into sentences.

    Whitespace is collapsed first; joining the result with single spaces
    recovers the collapsed input. Splits happen after ``.!?`` (plus closing
    quotes/brackets) only when followed by a space and an upper-case letter,
    digit, or opening quote/bracket. Periods inside decimals never qualify
    (no trailing space); a whitelist protects common abbreviations and an
    initials heuristic keeps name/journal chains together.
    """
    text = " ".join(body.split())
    if not text:
        return []
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] not in ".!?":
            i += 1
            continue
        j = i
        while j + 1 < n and text[j + 1] in _CLOSERS:
            j += 1
        if (
            j + 2 < n
            and text[j + 1] == " "
            and _starts_sentence(text[j + 2])
            and not (text[i] == "." and _protected_period(text, i, start, j + 2))
        ):
            sentences.append(text[start : j + 1])
            start = j + 2
            i = j + 2
        else:
            i = j + 1
    if start < n:
        sentences.append(text[start:])
    return sentences


# ---------------------------------------------------------------------------
# Table linearization
# ---------------------------------------------------------------------------


def linearize_table(rows: Iterable[Iterable[str]]) -> str:
    """Render a table row-major: cells joined by " | ", rows by newline."""
    lines = []
    for row in rows:
        cells = [" ".join(str(cell).split()) for cell in row]
        lines.append(CELL_SEPARATOR.join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# XML parsing (JATS-style full text)
# ---------------------------------------------------------------------------

_XML_SKIP_TEXT = {"table-wrap", "table", "fig", "figure", "caption"}


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def _element_text(elem: ET.Element) -> str:
    return " ".join("".join(elem.itertext()).split())


def _table_rows(elem: ET.Element) -> list[list[str]]:
    rows = []
    for row in elem.iter():
        if _local(row.tag) in ("tr", "row"):
            cells = [
                _element_text(cell)
                for cell in row
                if _local(cell.tag) in ("td", "th", "entry", "cell")
            ]
            if cells:
                rows.append(cells)
    return rows


def _xml_caption(elem: ET.Element) -> str:
    parts = []
    for child in elem:
        if _local(child.tag) == "label":
            parts.append(_element_text(child))
        elif _local(child.tag) == "caption":
            parts.append(_element_text(child))
    return " ".join(p for p in parts if p)


def _find_xml_title(root: ET.Element) -> ET.Element | None:
    for elem in root.iter():
        if _local(elem.tag) == "article-title":
            return elem
    banned = {"sec", "fig", "figure", "table-wrap", "caption", "list"}
    parents = {child: parent for parent in root.iter() for child in parent}
    for elem in root.iter():
        if _local(elem.tag) != "title":
            continue
        parent = parents.get(elem)
        if parent is None or _local(parent.tag) not in banned:
            return elem
    return None


def _parse_xml(raw: str, doc_id: str, fallback_title: str | None) -> Document:
    try:
        root = ET.fromstring(raw)
    except ET.ParseError as exc:
        raise UnparsableMarkup(f"{doc_id}: {exc}") from exc

    title_elem = _find_xml_title(root)
    if title_elem is not None:
        title = _element_text(title_elem)
    elif fallback_title is not None:
        title = fallback_title
    else:
        raise MissingTitle(doc_id)

    sentences: list[str] = []
    tables: list[TableEntry] = []
    figures: list[FigureCaption] = []

    def walk(elem: ET.Element) -> None:
        tag = _local(elem.tag)
        if tag in ("table-wrap", "table"):
            wrap = elem
            table_elem = elem
            if tag == "table-wrap":
                found = next(
                    (c for c in elem.iter() if _local(c.tag) == "table"), None
                )
                table_elem = found if found is not None else elem
            tables.append(
                TableEntry(
                    text=linearize_table(_table_rows(table_elem)),
                    caption=_xml_caption(wrap),
                    index=len(tables),
                )
            )
            return
        if tag in ("fig", "figure"):
            caption = _xml_caption(elem) or _element_text(elem)
            figures.append(FigureCaption(caption=caption, index=len(figures)))
            return
        if elem is title_elem:
            return
        if tag == "p":
            sentences.extend(segment_sentences(_element_text(elem)))
            return
        if tag == "title":
            # Section headers count as sentences; they carry no data values
            # and get filtered downstream.
            text = _element_text(elem)
            if text:
                sentences.extend(segment_sentences(text))
            return
        for child in elem:
            walk(child)

    walk(root)
    return Document(doc_id, title, sentences, tables, figures)


# ---------------------------------------------------------------------------
# HTML parsing
# ---------------------------------------------------------------------------


class _HtmlHarvester(HTMLParser):
    _TEXT_TAGS = {"p", "h1", "h2", "h3", "h4", "h5", "h6", "li"}

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.title: str | None = None
        self.blocks: list[str] = []
        self.tables: list[tuple[list[list[str]], str]] = []
        self.figcaptions: list[str] = []
        self._title_buf: list[str] | None = None
        self._block_buf: list[str] | None = None
        self._cell_buf: list[str] | None = None
        self._caption_buf: list[str] | None = None
        self._figcap_buf: list[str] | None = None
        self._rows: list[list[str]] | None = None
        self._row: list[str] | None = None
        self._table_caption = ""

    def handle_starttag(self, tag: str, attrs) -> None:
        if tag == "title":
            self._title_buf = []
        elif tag == "table":
            self._rows = []
            self._table_caption = ""
        elif self._rows is not None and tag == "tr":
            self._row = []
        elif self._rows is not None and tag in ("td", "th"):
            self._cell_buf = []
        elif self._rows is not None and tag == "caption":
            self._caption_buf = []
        elif tag == "figcaption":
            self._figcap_buf = []
        elif tag in self._TEXT_TAGS and self._rows is None:
            self._block_buf = []

    def handle_endtag(self, tag: str) -> None:
        if tag == "title" and self._title_buf is not None:
            self.title = " ".join("".join(self._title_buf).split())
            self._title_buf = None
        elif tag == "table" and self._rows is not None:
            self.tables.append((self._rows, self._table_caption))
            self._rows = None
            self._row = None
        elif tag == "tr" and self._row is not None:
            if self._row:
                self._rows.append(self._row)
            self._row = None
        elif tag in ("td", "th") and self._cell_buf is not None:
            if self._row is not None:
                self._row.append(" ".join("".join(self._cell_buf).split()))
            self._cell_buf = None
        elif tag == "caption" and self._caption_buf is not None:
            self._table_caption = " ".join("".join(self._caption_buf).split())
            self._caption_buf = None
        elif tag == "figcaption" and self._figcap_buf is not None:
            self.figcaptions.append(" ".join("".join(self._figcap_buf).split()))
            self._figcap_buf = None
        elif tag in self._TEXT_TAGS and self._block_buf is not None:
            text = "".join(self._block_buf)
            if text.strip():
                self.blocks.append(text)
            self._block_buf = None

    def handle_data(self, data: str) -> None:
        for buf in (
            self._title_buf,
            self._cell_buf,
            self._caption_buf,
            self._figcap_buf,
            self._block_buf,
        ):
            if buf is not None:
                buf.append(data)
                return


def _parse_html(raw: str, doc_id: str, fallback_title: str | None) -> Document:
    harvester = _HtmlHarvester()
    try:
        harvester.feed(raw)
        harvester.close()
    except Exception as exc:  # html.parser rarely raises; treat as fatal
        raise UnparsableMarkup(f"{doc_id}: {exc}") from exc

    title = harvester.title if harvester.title else fallback_title
    if title is None:
        raise MissingTitle(doc_id)

    sentences: list[str] = []
    for block in harvester.blocks:
        sentences.extend(segment_sentences(block))
    tables = [
        TableEntry(text=linearize_table(rows), caption=caption, index=i)
        for i, (rows, caption) in enumerate(harvester.tables)
    ]
    figures = [
        FigureCaption(caption=c, index=i)
        for i, c in enumerate(harvester.figcaptions)
    ]
    return Document(doc_id, title, sentences, tables, figures)


def _parse_plain(raw: str, doc_id: str, fallback_title: str | None) -> Document:
    lines = [line.strip() for line in raw.splitlines() if line.strip()]
    if not lines:
        raise UnparsableMarkup(f"{doc_id}: empty plain-text document")
    title = fallback_title if fallback_title is not None else lines[0]
    return Document(doc_id, title, segment_sentences(raw))


FORMATS = ("xml", "html", "plain")


def parse_document(
    raw: str,
    format: str,
    doc_id: str,
    fallback_title: str | None = None,
) -> Document:
    """Parse one paper file into a Document.

    ``format`` is one of ``xml``, ``html``, ``plain``. Markup is stripped
    from body sentences; tables are linearized row-major and kept with their
    captions; figure captions are harvested verbatim.

    Raises UnparsableMarkup on malformed input, MissingTitle when no title
    element exists and no ``fallback_title`` was supplied.
    """
    if not raw or not raw.strip():
        raise UnparsableMarkup(f"{doc_id}: empty input")
    if format == "xml":
        return _parse_xml(raw, doc_id, fallback_title)
    if format == "html":
        return _parse_html(raw, doc_id, fallback_title)
    if format == "plain":
        return _parse_plain(raw, doc_id, fallback_title)
    raise ValueError(f"unsupported format: {format!r}")


# ---------------------------------------------------------------------------
# Passage assembly
# ---------------------------------------------------------------------------


def build_passage(doc: Document, target_index: int) -> Passage:
    """Assemble the title / preceding-sentence / target-sentence passage.

    ``target_index == TITLE_INDEX`` builds the degenerate title-only passage
    (preceding and target both equal to the title).
    """
    if target_index == TITLE_INDEX:
        return Passage(doc.doc_id, TITLE_INDEX, doc.title, doc.title, doc.title)
    if not 0 <= target_index < len(doc.sentences):
        raise IndexOutOfRange(
            f"{doc.doc_id}: index {target_index} outside 0..{len(doc.sentences) - 1}"
        )
    preceding = doc.sentences[target_index - 1] if target_index > 0 else None
    return Passage(
        doc.doc_id, target_index, doc.title, preceding, doc.sentences[target_index]
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_documents(docs: Iterable[Document], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_record(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            count += 1
    return count


def iter_documents(path: str | Path) -> Iterator[Document]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "_meta" in record:
                continue
            yield Document.from_record(record)


def load_documents(path: str | Path) -> list[Document]:
    return list(iter_documents(path))
