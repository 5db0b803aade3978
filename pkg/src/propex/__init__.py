"""propex: property-triplet extraction from research papers via chat LLMs."""

from .corpus import Document, Passage, build_passage, parse_document, segment_sentences
from .engine import EngineMode, ExtractionRecord, Triplet
from .promptpack import PromptPack

__version__ = "0.1.0"

__all__ = [
    "Document",
    "EngineMode",
    "ExtractionRecord",
    "Passage",
    "PromptPack",
    "Triplet",
    "__version__",
    "build_passage",
    "parse_document",
    "segment_sentences",
]
