"""Deterministic stand-in for the frozen prompt encoder.

Each whitespace token hashes to a fixed unit-norm row. Reference tags such
as ``@image_1`` resolve to reserved slot rows given by their position in
the reference list, so the same slot always means the same reference.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError

SPECIAL_FIELDS = ("text", "sfx", "dialogue", "singing", "bgm")
REF_TAG = re.compile(r"^@(image|video|clip|audio|actor)[_-]?\d+$", re.IGNORECASE)
START_TOKEN = "<bos>"


@dataclass
class CaptionRecord:
    """Structured caption: free description plus tagged in-video text / sound fields."""

    description: str = ""
    text: str = ""
    sfx: str = ""
    dialogue: str = ""
    singing: str = ""
    bgm: str = ""

    def render(self) -> str:
        parts = [self.description] if self.description else []
        for name in SPECIAL_FIELDS:
            value = getattr(self, name)
            if value:
                parts.append(f"<{name}> {value} </{name}>")
        return " ".join(parts)


def token_embedding(token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    rng = np.random.default_rng(np.random.Philox(int.from_bytes(digest[:8], "little")))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def slot_embedding(slot: int, dim: int) -> np.ndarray:
    return token_embedding(f"<ref-slot:{slot}>", dim)


def embed_prompt_stub(caption, dim: int, length: int | None = None,
                      ref_slots: list[str] | None = None) -> np.ndarray:
    """(n_tokens, dim) unit-norm rows for a caption (record or plain string).

    ``ref_slots`` lists reference tags in reference-set order; a matching tag
    maps to that slot's reserved row. ``length`` truncates or pads (with a
    pad row) to a fixed token count. An empty caption yields the start row.
    """
    if dim < 1:
        raise ParameterError(f"embedding dim must be positive, got {dim}")
    text = caption.render() if isinstance(caption, CaptionRecord) else str(caption)
    tokens = text.split() or [START_TOKEN]
    slots = {tag.lower(): i for i, tag in enumerate(ref_slots or [])}
    rows = []
    for tok in tokens:
        key = tok.lower()
        if REF_TAG.match(tok) and key in slots:
            rows.append(slot_embedding(slots[key], dim))
        else:
            rows.append(token_embedding(tok, dim))
    if length is not None:
        rows = rows[:length] + [token_embedding("<pad>", dim)] * max(0, length - len(rows))
    return np.stack(rows)
