"""Textual serialization of entities and construction of entity-pair inputs.

An entity becomes an ordered unit list (name first, then neighbor names or
attribute values sorted by their governing relation/attribute). Two entity
sequences are combined into one token sequence

    [CLS] <e1 units> [SEP] <template block> <e2 units> [SEP]

together with three attention-visibility matrices: one exposing the whole
pair, and one per entity exposing only the classification token plus that
entity's span (each span includes its trailing separator).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputTooLongError
from .tokenizer import CLS, MASK, SEP

RELATIONAL = "relational"
ATTRIBUTE = "attribute"

MASK_PLACEHOLDER = "{MASK}"


@dataclass(frozen=True)
class TextSequence:
    """Serialized view of one entity: its name followed by sorted units."""

    entity: str
    kind: str
    text_units: tuple
    terminated: bool = True


def build_sequence(entity, kg, kind, max_units=12):
    """Serialize ``entity`` using its relational neighbors or attribute values.

    Units after the name are sorted by (relation/attribute name, unit string);
    ``max_units`` caps the total unit count including the name, dropping the
    tail of the sorted list.
    """
    if entity not in kg.entities:
        raise KeyError(f"unknown entity: {entity!r}")
    if max_units < 1:
        raise ValueError(f"max_units must be >= 1, got {max_units}")
    if kind == RELATIONAL:
        edges = kg.out_neighbors(entity)
    elif kind == ATTRIBUTE:
        edges = kg.attribute_values(entity)
    else:
        raise ValueError(f"kind must be '{RELATIONAL}' or '{ATTRIBUTE}', got {kind!r}")
    units = [entity] + [u for _, u in sorted(edges)]
    return TextSequence(entity=entity, kind=kind, text_units=tuple(units[:max_units]))


@dataclass(frozen=True)
class Template:
    """Connective inserted between the two entity spans.

    ``hard`` templates are literal strings containing exactly one
    ``{MASK}`` placeholder; ``soft`` templates are a mask slot followed by
    ``soft_length`` learnable prompt tokens; ``none`` degenerates to a bare
    separator.
    """

    style: str
    hard_text: str = ""
    soft_length: int = 1

    def __post_init__(self):
        if self.style not in ("hard", "soft", "none"):
            raise ValueError(f"template style must be hard/soft/none, got {self.style!r}")
        if self.style == "hard" and self.hard_text.count(MASK_PLACEHOLDER) != 1:
            raise ValueError(f"hard template must contain exactly one {MASK_PLACEHOLDER}: {self.hard_text!r}")
        if self.style == "soft" and self.soft_length < 1:
            raise ValueError(f"soft template needs soft_length >= 1, got {self.soft_length}")

    @property
    def has_mask_slot(self):
        return self.style != "none"


DEFAULT_SOFT_TEMPLATE = Template("soft", soft_length=1)
DEFAULT_HARD_TEMPLATE = Template("hard", "? {MASK}. I know that")


@dataclass(frozen=True)
class AttentionMasks:
    """Three L x L boolean visibility matrices for one pair input.

    ``full`` exposes every position; ``first_only``/``second_only`` restrict
    attention to the classification token plus one entity span.
    """

    full: np.ndarray
    first_only: np.ndarray
    second_only: np.ndarray


@dataclass(frozen=True)
class PairInput:
    """Tokenized entity pair with span bookkeeping and attention masks."""

    tokens: tuple
    span_e1: range
    span_template: range
    span_e2: range
    mask_token_index: int | None
    masks: AttentionMasks = field(repr=False)


def build_masks(span_e1, span_template, span_e2, length):
    """Visibility matrices from the three token spans.

    The per-entity masks allow attention exactly within {classification token}
    union the given entity span, so callers include a span's trailing
    separator in the range when it should stay visible. Template tokens are
    visible only under the full mask.
    """
    spans = (span_e1, span_template, span_e2)
    seen = set()
    for span in spans:
        for i in span:
            if not 0 <= i < length:
                raise ValueError(f"span position {i} outside [0, {length})")
            if i in seen:
                raise ValueError("spans overlap")
            seen.add(i)
    full = np.ones((length, length), dtype=bool)

    def allow(span):
        ind = np.zeros(length, dtype=bool)
        ind[0] = True
        ind[list(span)] = True
        return np.outer(ind, ind)

    return AttentionMasks(full=full, first_only=allow(span_e1), second_only=allow(span_e2))


def pair_segments(pair):
    """Per-position segment ids: 0 up to the second entity span, 1 after."""
    seg = np.zeros(len(pair.tokens), dtype=np.intp)
    seg[pair.span_e2.start :] = 1
    return seg


def sequence_token_ids(seq, tokenizer):
    """Token ids of one TextSequence: units joined by commas, then [SEP]."""
    comma = tokenizer.encode_word(",")
    ids = []
    for i, unit in enumerate(seq.text_units):
        if i > 0:
            ids.extend(comma)
        ids.extend(tokenizer.encode_text(unit))
    if seq.terminated:
        ids.append(SEP)
    return ids


def _entity_name_length(seq, tokenizer):
    return len(tokenizer.encode_text(seq.text_units[0]))


def template_token_ids(template, tokenizer):
    """Token ids of the template block and the relative mask position."""
    if template.style == "none":
        return [SEP], None
    if template.style == "soft":
        ids = [MASK] + [tokenizer.soft_token_id(i) for i in range(template.soft_length)]
        return ids, 0
    before, after = template.hard_text.split(MASK_PLACEHOLDER)
    ids = tokenizer.encode_text(before)
    rel_mask = len(ids)
    ids = ids + [MASK] + tokenizer.encode_text(after)
    return ids, rel_mask


def _allocate(budget, len1, len2, min1, min2):
    # proportional largest-remainder split; the leftover token follows the
    # larger remainder and is dropped on an exact tie so that swapping the
    # two entities mirrors the allocation exactly
    if len1 + len2 <= budget:
        return len1, len2
    n1 = budget * len1 // (len1 + len2)
    n2 = budget * len2 // (len1 + len2)
    if n1 + n2 < budget:
        frac1 = budget * len1 % (len1 + len2)
        frac2 = budget * len2 % (len1 + len2)
        if frac1 > frac2:
            n1 += 1
        elif frac2 > frac1:
            n2 += 1
    if n1 < min1:
        n1 = min1
        n2 = min(len2, budget - n1)
    if n2 < min2:
        n2 = min2
        n1 = min(len1, budget - n2)
    return n1, n2


def build_pair_input(s1, s2, template, tokenizer, max_len=128):
    """Combine two entity sequences into one masked pair input.

    Over-budget inputs are truncated proportionally to each entity's
    untruncated token length; the entity name at ``text_units[0]`` is never
    truncated (raises InputTooLongError if the two names cannot fit).
    """
    if max_len < 8:
        raise ValueError(f"max_len must be >= 8, got {max_len}")
    tmpl_ids, rel_mask = template_token_ids(template, tokenizer)
    ids1 = sequence_token_ids(TextSequence(s1.entity, s1.kind, s1.text_units, terminated=False), tokenizer)
    ids2 = sequence_token_ids(TextSequence(s2.entity, s2.kind, s2.text_units, terminated=False), tokenizer)
    name1 = _entity_name_length(s1, tokenizer)
    name2 = _entity_name_length(s2, tokenizer)
    overhead = 3 + len(tmpl_ids)  # [CLS] + two [SEP] + template block
    budget = max_len - overhead
    if budget < name1 + name2:
        raise InputTooLongError(
            f"entity names need {name1 + name2} tokens but only {budget} fit in max_len={max_len}"
        )
    n1, n2 = _allocate(budget, len(ids1), len(ids2), name1, name2)
    ids1, ids2 = ids1[:n1], ids2[:n2]

    tokens = [CLS] + ids1 + [SEP]
    span_e1 = range(1, len(tokens))
    span_template = range(span_e1.stop, span_e1.stop + len(tmpl_ids))
    tokens += tmpl_ids
    span_e2 = range(span_template.stop, span_template.stop + len(ids2) + 1)
    tokens += ids2 + [SEP]
    mask_token_index = None if rel_mask is None else span_template.start + rel_mask

    masks = build_masks(span_e1, span_template, span_e2, len(tokens))
    return PairInput(
        tokens=tuple(tokens),
        span_e1=span_e1,
        span_template=span_template,
        span_e2=span_e2,
        mask_token_index=mask_token_index,
        masks=masks,
    )


def build_single_input(seq, tokenizer, max_len=128):
    """Token ids ``[CLS] <units> [SEP]`` for single-entity embedding inputs.

    Matches the in-pair first-entity positions exactly, so embeddings of a
    lone entity agree with the first-entity mask view of any pair it heads.
    """
    if max_len < 4:
        raise ValueError(f"max_len must be >= 4, got {max_len}")
    ids = sequence_token_ids(TextSequence(seq.entity, seq.kind, seq.text_units, terminated=False), tokenizer)
    name_len = _entity_name_length(seq, tokenizer)
    budget = max_len - 2
    if budget < name_len:
        raise InputTooLongError(f"entity name needs {name_len} tokens but only {budget} fit")
    return [CLS] + ids[:budget] + [SEP]
