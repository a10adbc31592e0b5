"""Knowledge-graph data model, tab-separated loaders, seed splitting, synthetic pairs.

File formats (UTF-8, one record per line):
  relational triples: ``head<TAB>relation<TAB>tail``
  attribute triples:  ``entity<TAB>attribute<TAB>value``
  alignment links:    ``entity_kg1<TAB>entity_kg2``
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import EmptyKGError, ParseError

# Appended to every KG2 entity name by the synthetic generator so the two
# graphs never share raw identifiers.
KG2_SUFFIX = " #2"

SPLIT_TAGS = ("train", "validation", "test", "gold")


class KnowledgeGraph:
    """One KG: entity/relation/attribute vocabularies plus its two triple sets.

    Triples are deduplicated and kept in sorted order, so two graphs built from
    the same facts compare equal regardless of input order. Instances are
    treated as immutable after construction and are safe to share across
    threads for reading.
    """

    def __init__(self, relational_triples, attribute_triples, extra_entities=()):
        rel = sorted(set(tuple(t) for t in relational_triples))
        attr = sorted(set(tuple(t) for t in attribute_triples))
        for t in itertools.chain(rel, attr):
            if len(t) != 3:
                raise ValueError(f"triple must have 3 fields, got {t!r}")
        entities = set(extra_entities)
        for h, _, t in rel:
            entities.add(h)
            entities.add(t)
        for e, _, _ in attr:
            entities.add(e)
        self.relational_triples = tuple(rel)
        self.attribute_triples = tuple(attr)
        self.entities = frozenset(entities)
        self.relations = frozenset(r for _, r, _ in rel)
        self.attributes = frozenset(a for _, a, _ in attr)
        # per-entity indexes used by the sequence builder
        self._out_edges = {}
        for h, r, t in rel:
            self._out_edges.setdefault(h, []).append((r, t))
        self._attr_edges = {}
        for e, a, v in attr:
            self._attr_edges.setdefault(e, []).append((a, v))

    def out_neighbors(self, entity):
        """(relation, tail) pairs with this entity as head."""
        return self._out_edges.get(entity, [])

    def attribute_values(self, entity):
        """(attribute, value) pairs of this entity."""
        return self._attr_edges.get(entity, [])

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.relational_triples == other.relational_triples
            and self.attribute_triples == other.attribute_triples
        )

    def __repr__(self):
        return (
            f"KnowledgeGraph(|E|={len(self.entities)}, |R|={len(self.relations)}, "
            f"|A|={len(self.attributes)}, |Tr|={len(self.relational_triples)}, "
            f"|Ta|={len(self.attribute_triples)})"
        )


class AlignmentSeeds:
    """A one-to-one set of (KG1 entity, KG2 entity) pairs with a split tag."""

    def __init__(self, pairs, split_tag):
        if split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}, got {split_tag!r}")
        pairs = tuple((a, b) for a, b in pairs)
        left = [a for a, _ in pairs]
        right = [b for _, b in pairs]
        if len(set(left)) != len(left) or len(set(right)) != len(right):
            raise ValueError("alignment seeds must be one-to-one (duplicate entity)")
        self.pairs = pairs
        self.split_tag = split_tag

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def as_dict(self):
        return dict(self.pairs)

    def __repr__(self):
        return f"AlignmentSeeds({self.split_tag}, n={len(self.pairs)})"


def _read_triples(path):
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            triples.append(tuple(fields))
    return triples


def load_kg(rel_triples_path, attr_triples_path):
    """Load one KG from its relational and attribute triple files."""
    rel = _read_triples(rel_triples_path)
    attr = _read_triples(attr_triples_path)
    if not rel and not attr:
        raise EmptyKGError(f"both triple files are empty: {rel_triples_path}, {attr_triples_path}")
    return KnowledgeGraph(rel, attr)


def save_kg(kg, rel_triples_path, attr_triples_path):
    """Write a KG back to the two tab-separated triple files."""
    with open(rel_triples_path, "w", encoding="utf-8") as f:
        for h, r, t in kg.relational_triples:
            f.write(f"{h}\t{r}\t{t}\n")
    with open(attr_triples_path, "w", encoding="utf-8") as f:
        for e, a, v in kg.attribute_triples:
            f.write(f"{e}\t{a}\t{v}\n")


def load_links(path, split_tag="gold"):
    """Load a 2-column alignment-link file."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            pairs.append((fields[0], fields[1]))
    return AlignmentSeeds(pairs, split_tag)


def save_links(seeds, path):
    with open(path, "w", encoding="utf-8") as f:
        for a, b in seeds.pairs:
            f.write(f"{a}\t{b}\n")


def split_seeds(pairs, train_ratio, val_ratio_of_train, rng_seed):
    """Shuffle pairs with a seeded RNG and split into train/validation/test.

    ``round(train_ratio * n)`` pairs go to train+validation together;
    the validation part is carved out of that block as
    ``round(val_ratio_of_train * (train+val))``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("pairs must be non-empty")
    if not 0.0 < train_ratio <= 1.0:
        raise ValueError(f"train_ratio must be in (0, 1], got {train_ratio}")
    if not 0.0 <= val_ratio_of_train < 1.0:
        raise ValueError(f"val_ratio_of_train must be in [0, 1), got {val_ratio_of_train}")
    n = len(pairs)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(n)
    shuffled = [pairs[i] for i in order]
    n_tv = int(round(train_ratio * n))
    n_val = int(round(val_ratio_of_train * n_tv))
    train = AlignmentSeeds(shuffled[: n_tv - n_val], "train")
    validation = AlignmentSeeds(shuffled[n_tv - n_val : n_tv], "validation")
    test = AlignmentSeeds(shuffled[n_tv:], "test")
    return train, validation, test


@dataclass(frozen=True)
class PerturbationConfig:
    """Noise applied when deriving the second KG of a synthetic pair.

    All three fields are probabilities: per-character entity-name corruption,
    per-triple dropout, and per-attribute-triple value rewriting.
    """

    name_noise: float = 0.0
    triple_dropout: float = 0.0
    value_rewrite: float = 0.0

    def __post_init__(self):
        for field in ("name_noise", "triple_dropout", "value_rewrite"):
            p = getattr(self, field)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{field} must be in [0, 1], got {p}")


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng, n_syllables):
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(n_syllables)
    )


def _perturb_name(name, prob, rng):
    # substitute letters only; word boundaries are preserved
    chars = []
    for c in name:
        if c != " " and rng.random() < prob:
            chars.append("abcdefghijklmnopqrstuvwxyz"[rng.integers(26)])
        else:
            chars.append(c)
    return "".join(chars)


def generate_synthetic_pair(n_entities, rel_density, attr_density, noise=None, rng_seed=0):
    """Build a KG and a perturbed copy with a full gold one-to-one mapping.

    ``rel_density``/``attr_density`` are expected triples per entity. KG2
    entity names are the (possibly character-perturbed) KG1 names plus
    ``KG2_SUFFIX``; with zero noise the graphs are isomorphic under the gold
    mapping up to that suffix.
    """
    if n_entities < 2:
        raise ValueError(f"n_entities must be >= 2, got {n_entities}")
    if rel_density <= 0 or attr_density <= 0:
        raise ValueError("densities must be > 0")
    noise = noise or PerturbationConfig()
    rng = np.random.default_rng(rng_seed)

    names = []
    seen = set()
    while len(names) < n_entities:
        n_words = 1 + int(rng.integers(2))
        name = " ".join(_pseudo_word(rng, 2 + int(rng.integers(2))) for _ in range(n_words))
        if name not in seen:
            seen.add(name)
            names.append(name)

    n_rel_names = max(2, n_entities // 25)
    n_attr_names = max(2, n_entities // 25)
    relations = [f"r_{_pseudo_word(rng, 3)}_{i}" for i in range(n_rel_names)]
    attributes = [f"a_{_pseudo_word(rng, 3)}_{i}" for i in range(n_attr_names)]
    value_bank = [_pseudo_word(rng, 2 + int(rng.integers(2))) for _ in range(n_entities)]
    value_bank += [str(1900 + int(rng.integers(130))) for _ in range(n_entities // 2 + 1)]

    def draw_count(density):
        k = int(density)
        if rng.random() < density - k:
            k += 1
        return k

    rel_triples = []
    attr_triples = []
    for name in names:
        for _ in range(draw_count(rel_density)):
            tail = names[rng.integers(n_entities)]
            while tail == name:
                tail = names[rng.integers(n_entities)]
            rel_triples.append((name, relations[rng.integers(len(relations))], tail))
        for _ in range(draw_count(attr_density)):
            attr_triples.append(
                (name, attributes[rng.integers(len(attributes))], value_bank[rng.integers(len(value_bank))])
            )
    kg1 = KnowledgeGraph(rel_triples, attr_triples, extra_entities=names)

    mapping = {}
    used = set()
    for name in names:
        mapped = _perturb_name(name, noise.name_noise, rng) + KG2_SUFFIX
        while mapped in used:
            mapped = _perturb_name(name, max(noise.name_noise, 0.05), rng) + KG2_SUFFIX
        used.add(mapped)
        mapping[name] = mapped

    rel2 = []
    for h, r, t in kg1.relational_triples:
        if rng.random() < noise.triple_dropout:
            continue
        rel2.append((mapping[h], r, mapping[t]))
    attr2 = []
    for e, a, v in kg1.attribute_triples:
        if rng.random() < noise.triple_dropout:
            continue
        if rng.random() < noise.value_rewrite:
            v = value_bank[rng.integers(len(value_bank))]
        attr2.append((mapping[e], a, v))
    kg2 = KnowledgeGraph(rel2, attr2, extra_entities=mapping.values())

    gold = AlignmentSeeds([(e, mapping[e]) for e in sorted(kg1.entities)], "gold")
    return kg1, kg2, gold
