"""Core record types: samples, stances and training phases."""
from __future__ import annotations

import enum
import re
import string
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .boxes import BoundingBox

TARGET_DELIMITER = "; "

_WS = re.compile(r"\s+")
_EDGE_PUNCT = string.punctuation + "“”‘’…"


class Stance(str, enum.Enum):
    SARCASTIC = "sarcastic"
    NON_SARCASTIC = "non-sarcastic"

    def __str__(self):
        return self.value


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"

    def __str__(self):
        return self.value


def normalize_span(text: str) -> str:
    """Lowercase, collapse whitespace and strip punctuation at the span edges."""
    text = _WS.sub(" ", text.lower()).strip()
    return text.strip(_EDGE_PUNCT + " ")


def span_tokens(text: str) -> list[str]:
    toks = (t.strip(_EDGE_PUNCT) for t in normalize_span(text).split(" "))
    return [t for t in toks if t]


def contains_span(text: str, target: str) -> bool:
    hay, needle = span_tokens(text), span_tokens(target)
    if not needle:
        return False
    k = len(needle)
    return any(hay[i : i + k] == needle for i in range(len(hay) - k + 1))


@dataclass
class Sample:
    id: str
    text: str
    image: Optional[np.ndarray] = None
    image_path: Optional[str] = None
    msd_label: Optional[Stance] = None
    textual_targets: list[str] = field(default_factory=list)
    visual_targets: list[BoundingBox] = field(default_factory=list)

    def __post_init__(self):
        if self.msd_label is not None and not isinstance(self.msd_label, Stance):
            self.msd_label = Stance(self.msd_label)

    @property
    def is_msti(self) -> bool:
        return bool(self.textual_targets or self.visual_targets)

    def invariant_errors(self) -> list[tuple[str, str]]:
        """(field, message) pairs for every broken invariant; empty when valid."""
        problems = []
        if not isinstance(self.text, str) or not self.text.strip():
            problems.append(("text", "text is empty"))
        for t in self.textual_targets:
            if not contains_span(self.text, t):
                problems.append(("textual_targets", f"target {t!r} is not a span of the text"))
        for b in self.visual_targets:
            if not isinstance(b, BoundingBox):
                problems.append(("visual_targets", f"not a BoundingBox: {b!r}"))
        if self.is_msti and self.msd_label not in (None, Stance.SARCASTIC):
            problems.append(("msd_label", "MSTI samples are sarcastic by construction"))
        if self.image is not None:
            img = self.image
            if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
                problems.append(("image", f"expected HxWx3 uint8, got {img.shape} {img.dtype}"))
        return problems

    def target_string(self) -> str:
        """Generation target for MSTI: the textual targets joined by the delimiter."""
        return TARGET_DELIMITER.join(self.textual_targets)
