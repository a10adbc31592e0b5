"""Alignment inference: embedding retrieval, confidence-gated entailment
re-ranking, Hits@K / MRR evaluation, and the predictions file format."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingIndex
from .errors import DataError, ParseError
from .sequence import build_pair_input, build_sequence, pair_segments


@dataclass
class RankingResult:
    """Candidate ranking for one query entity."""

    query: str
    candidates: tuple  # (entity, embedding_cosine) in descending cosine order
    confidence: float  # best embedding cosine among the candidates
    reranked: bool
    final_order: tuple
    entailment_scores: tuple | None = None  # aligned with `candidates`


@dataclass
class EvalReport:
    hits_at: dict
    mrr: float
    n_queries: int

    def to_json(self, **extra):
        payload = {
            "n_queries": self.n_queries,
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
            "mrr": self.mrr,
        }
        payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_table(self):
        cols = [f"Hits@{k}" for k in sorted(self.hits_at)] + ["MRR", "queries"]
        vals = [f"{self.hits_at[k]:.4f}" for k in sorted(self.hits_at)] + [f"{self.mrr:.4f}", str(self.n_queries)]
        width = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, width))
        body = "  ".join(v.rjust(w) for v, w in zip(vals, width))
        return head + "\n" + body + "\n"


def select_candidates(query, query_index: EmbeddingIndex, target_index: EmbeddingIndex, c_size):
    """Exact top-``c_size`` target entities by embedding cosine, descending.

    Ties resolve by entity id. Asking for more candidates than exist returns
    the full ranking with a warning.
    """
    if c_size < 1:
        raise ValueError(f"c_size must be >= 1, got {c_size}")
    n = len(target_index)
    if c_size > n:
        warnings.warn(f"c_size {c_size} > |E2| = {n}; returning all targets")
        c_size = n
    sims = target_index.cosine_to(query_index.unit(query))
    order = np.lexsort((np.arange(n), -sims))[:c_size]
    return [(target_index.names[i], float(sims[i])) for i in order]


class EntailmentScorer:
    """Scores entity pairs with the trained aligner's positive probability."""

    def __init__(self, encoder, tokenizer, template, verbalizer, aligner, kg1, kg2,
                 info_kind, max_len=128, max_units=12, symmetric=False):
        self.encoder = encoder
        self.tokenizer = tokenizer
        self.template = template
        self.verbalizer = verbalizer
        self.aligner = aligner
        self.kg1 = kg1
        self.kg2 = kg2
        self.info_kind = info_kind
        self.max_len = max_len
        self.max_units = max_units
        self.symmetric = symmetric
        self._seq_cache = {}

    def _sequence(self, entity, kg, side):
        key = (side, entity)
        if key not in self._seq_cache:
            self._seq_cache[key] = build_sequence(entity, kg, self.info_kind, max_units=self.max_units)
        return self._seq_cache[key]

    def _prob(self, seq_a, seq_b):
        pair = build_pair_input(seq_a, seq_b, self.template, self.tokenizer, max_len=self.max_len)
        hidden, _ = self.encoder.forward_hidden(pair.tokens, pair.masks.full, pair_segments(pair))
        if self.aligner == "nsp":
            logits = self.encoder._nsp_from_hidden(hidden[0])
        else:
            logits = self.encoder._mlm_from_hidden(hidden[pair.mask_token_index], self.verbalizer)
        z = logits - np.max(logits)
        e = np.exp(z)
        return float(e[0] / e.sum())

    def score(self, query, candidate):
        """Positive entailment probability for (query, candidate)."""
        seq_q = self._sequence(query, self.kg1, 1)
        seq_c = self._sequence(candidate, self.kg2, 2)
        p = self._prob(seq_q, seq_c)
        if self.symmetric:
            p = 0.5 * (p + self._prob(seq_c, seq_q))
        return p


def rerank(query, candidates, scorer: EntailmentScorer, threshold):
    """Re-order low-confidence candidate lists by entailment probability.

    Confidence is the best embedding cosine; queries at or above ``threshold``
    keep the embedding order. Re-ranked ties resolve by embedding cosine, then
    entity id.
    """
    candidates = tuple((str(e), float(s)) for e, s in candidates)
    confidence = candidates[0][1] if candidates else float("-inf")
    if confidence >= threshold:
        return RankingResult(
            query=query,
            candidates=candidates,
            confidence=confidence,
            reranked=False,
            final_order=tuple(e for e, _ in candidates),
        )
    scores = tuple(scorer.score(query, entity) for entity, _ in candidates)
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-scores[i], -candidates[i][1], candidates[i][0]),
    )
    return RankingResult(
        query=query,
        candidates=candidates,
        confidence=confidence,
        reranked=True,
        final_order=tuple(candidates[i][0] for i in order),
        entailment_scores=scores,
    )


def evaluate(results, gold, ks=(1, 10)):
    """Hits@K and MRR of the final orderings against gold pairs.

    A gold entity absent from a query's candidate list contributes reciprocal
    rank 0.
    """
    by_query = {r.query: r for r in results}
    gold_map = dict(gold.pairs)
    missing = [q for q in gold_map if q not in by_query]
    if missing:
        raise DataError(f"no ranking result for {len(missing)} gold queries, e.g. {missing[0]!r}")
    hits = {k: 0 for k in ks}
    rr_sum = 0.0
    for query, target in gold_map.items():
        order = by_query[query].final_order
        try:
            rank = order.index(target) + 1
        except ValueError:
            rank = None
        if rank is not None:
            rr_sum += 1.0 / rank
            for k in ks:
                if rank <= k:
                    hits[k] += 1
    n = len(gold_map)
    return EvalReport(
        hits_at={k: hits[k] / n for k in ks},
        mrr=rr_sum / n,
        n_queries=n,
    )


def align_queries(queries, query_index, target_index, scorer, c_size, threshold, embedding_only=False):
    """Candidate selection plus confidence-aware re-ranking for many queries."""
    results = []
    for query in queries:
        candidates = select_candidates(query, query_index, target_index, c_size)
        if embedding_only:
            results.append(
                RankingResult(
                    query=query,
                    candidates=tuple(candidates),
                    confidence=candidates[0][1] if candidates else float("-inf"),
                    reranked=False,
                    final_order=tuple(e for e, _ in candidates),
                )
            )
        else:
            results.append(rerank(query, candidates, scorer, threshold))
    return results


# ---- predictions file ("query<TAB>rank<TAB>candidate<TAB>score<TAB>stage") ----


def write_predictions(results, path, config_hash=""):
    with open(path, "w", encoding="utf-8") as f:
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
        f.write("# columns: query\trank\tcandidate\tscore\tstage\n")
        for r in results:
            stage = "rerank" if r.reranked else "emb"
            if r.reranked:
                score_of = dict(zip((e for e, _ in r.candidates), r.entailment_scores))
            else:
                score_of = dict(r.candidates)
            for rank, entity in enumerate(r.final_order, start=1):
                f.write(f"{r.query}\t{rank}\t{entity}\t{score_of[entity]:.6f}\t{stage}\n")


def read_predictions(path):
    """Rebuild minimal RankingResults (query, final order, stage) from a file."""
    rows = {}
    stages = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            query, rank, candidate, score, stage = fields
            rows.setdefault(query, []).append((int(rank), candidate, float(score)))
            stages[query] = stage
    results = []
    for query, entries in rows.items():
        entries.sort()
        order = tuple(c for _, c, _ in entries)
        scores = tuple(s for _, _, s in entries)
        reranked = stages[query] == "rerank"
        results.append(
            RankingResult(
                query=query,
                candidates=() if reranked else tuple(zip(order, scores)),
                confidence=float("nan"),
                reranked=reranked,
                final_order=order,
                entailment_scores=scores if reranked else None,
            )
        )
    return results
