"""Training loop: hard-negative pools, bi-directional pair objectives,
alternating relational/attribute epochs, validation and early stopping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import objectives
from .embeddings import EmbeddingIndex, encode_entities
from .errors import TrainingDivergedError
from .objectives import LossConfig, TrainingTriple
from .sequence import ATTRIBUTE, RELATIONAL, build_pair_input, build_sequence, pair_segments

KIND_FLIP = {RELATIONAL: ATTRIBUTE, ATTRIBUTE: RELATIONAL}

# parameter-name prefixes of the transformer body, used by the freeze option
BODY_PREFIXES = ("tok_emb", "pos_emb", "emb_ln", "layer")


@dataclass
class TrainState:
    epoch: int = 0
    info_kind_this_epoch: str = RELATIONAL
    best_val_hits1: float = -1.0
    epochs_since_improvement: int = 0
    rng_seed: int = 0


@dataclass(frozen=True)
class NegativePool:
    """Per-anchor ranked candidate entities, gold positives excluded."""

    candidates: dict
    pool_size: int


def epoch_rng_seed(rng_seed, epoch):
    """Stable per-epoch integer seed derived from the run seed."""
    return int(np.random.SeedSequence([int(rng_seed), int(epoch)]).generate_state(1)[0])


def build_negative_pool(train_seeds, anchor_index: EmbeddingIndex, candidate_index: EmbeddingIndex, k):
    """Top-k candidates per anchor by embedding cosine, excluding the gold pair.

    Deterministic for fixed embeddings; cosine ties resolve by entity id.
    """
    n_cand = len(candidate_index)
    if k >= n_cand:
        warnings.warn(f"pool_size {k} >= |E2| = {n_cand}; pool truncated to {n_cand - 1}")
    effective = min(k, n_cand - 1)
    pools = {}
    positions = np.arange(n_cand)
    for anchor, positive in train_seeds.pairs:
        sims = candidate_index.cosine_to(anchor_index.unit(anchor))
        order = np.lexsort((positions, -sims))
        ranked = [candidate_index.names[i] for i in order if candidate_index.names[i] != positive]
        pools[anchor] = tuple(ranked[:effective])
    return NegativePool(candidates=pools, pool_size=effective)


def sample_training_set(train_seeds, pool: NegativePool, rng_seed):
    """One triple per alignment seed, negative drawn uniformly from the pool."""
    rng = np.random.default_rng(rng_seed)
    triples = []
    for anchor, positive in train_seeds.pairs:
        cands = pool.candidates.get(anchor, ())
        if not cands:
            raise ValueError(f"empty negative pool for anchor {anchor!r}")
        negative = cands[int(rng.integers(len(cands)))]
        triples.append(TrainingTriple(anchor, positive, negative))
    return triples


def check_early_stop(state: TrainState, val_hits1, patience=3):
    """Update the improvement counter; stop after `patience` flat epochs."""
    if not 0.0 <= val_hits1 <= 1.0:
        raise ValueError(f"val_hits1 must be in [0, 1], got {val_hits1}")
    if val_hits1 > state.best_val_hits1:
        state.best_val_hits1 = val_hits1
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    return state, state.epochs_since_improvement >= patience


class Adam:
    """Adaptive-moment optimizer (decoupled weight decay) over the parameter dict."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, freeze_prefixes=()):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.freeze_prefixes = tuple(freeze_prefixes)
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if any(name.startswith(p) for p in self.freeze_prefixes):
                continue
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                params[name] -= self.lr * self.weight_decay * params[name]
            params[name] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_dict(self):
        return {"m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}, "t": self.t}

    def load_state_dict(self, state):
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
        self.t = int(state["t"])


def _entail_forward(encoder, pair, verbalizer, aligner):
    """Full-mask forward with cache plus two-class logits and the scored row."""
    hidden, cache = encoder.forward_hidden(
        pair.tokens, pair.masks.full, pair_segments(pair), want_cache=True
    )
    if aligner == "nsp":
        row = 0
        logits = encoder._nsp_from_hidden(hidden[row])
    else:
        row = pair.mask_token_index
        logits = encoder._mlm_from_hidden(hidden[row], verbalizer)
    return hidden, cache, logits, row


def _entail_backward(encoder, hidden, cache, row, d_logits, verbalizer, aligner, grads):
    if np.all(d_logits == 0.0):
        return
    if aligner == "nsp":
        d_h = encoder.nsp_backward(hidden[row], d_logits, grads)
    else:
        d_h = encoder.mlm_backward(hidden[row], verbalizer, d_logits, grads)
    d_hidden = np.zeros_like(hidden)
    d_hidden[row] = d_h
    encoder.backward_hidden(cache, d_hidden, grads)


def _embedding_forward(encoder, pair, which):
    mask = pair.masks.first_only if which == "first" else pair.masks.second_only
    hidden, cache = encoder.forward_hidden(pair.tokens, mask, pair_segments(pair), want_cache=True)
    emb = encoder.project_single(hidden)
    return hidden, cache, emb


def _embedding_backward(encoder, hidden, cache, d_emb, grads):
    if np.all(d_emb == 0.0):
        return
    d_h = encoder.projection_backward(hidden[0], d_emb, grads)
    d_hidden = np.zeros_like(hidden)
    d_hidden[0] = d_h
    encoder.backward_hidden(cache, d_hidden, grads)


def augment_sequence(seq, rng, unit_dropout=0.0, name_word_dropout=0.0):
    """Training-time noising of one sequence: drop units and name words.

    The entity name keeps at least one word and the unit list keeps the name,
    so augmented sequences stay valid inputs. Identity when both rates are 0.
    """
    if unit_dropout <= 0.0 and name_word_dropout <= 0.0:
        return seq
    name = seq.text_units[0]
    if name_word_dropout > 0.0:
        words = name.split()
        kept = [w for w in words if rng.random() >= name_word_dropout]
        if not kept:
            kept = [words[int(rng.integers(len(words)))]]
        name = " ".join(kept)
    units = [name]
    for unit in seq.text_units[1:]:
        if rng.random() >= unit_dropout:
            units.append(unit)
    return type(seq)(entity=seq.entity, kind=seq.kind, text_units=tuple(units), terminated=seq.terminated)


def triple_loss_and_grads(
    triple,
    kind,
    kg1,
    kg2,
    encoder,
    tokenizer,
    template,
    verbalizer,
    aligner,
    loss_cfg: LossConfig,
    max_len,
    max_units,
    grads,
    embedding_only=False,
    augment_rng=None,
    unit_dropout=0.0,
    name_word_dropout=0.0,
):
    """Loss components of one training triple; gradients accumulate into ``grads``.

    The positive and negative pairs are encoded in both directions; the
    reversed inputs feed only the entailment objectives while the entity
    embeddings come from the forward pairs under the per-entity masks.
    """
    seq_a = build_sequence(triple.anchor, kg1, kind, max_units=max_units)
    seq_p = build_sequence(triple.positive, kg2, kind, max_units=max_units)
    seq_n = build_sequence(triple.negative, kg2, kind, max_units=max_units)
    if augment_rng is not None:
        seq_a = augment_sequence(seq_a, augment_rng, unit_dropout, name_word_dropout)
        seq_p = augment_sequence(seq_p, augment_rng, unit_dropout, name_word_dropout)
        seq_n = augment_sequence(seq_n, augment_rng, unit_dropout, name_word_dropout)
    pair_p = build_pair_input(seq_a, seq_p, template, tokenizer, max_len=max_len)
    pair_n = build_pair_input(seq_a, seq_n, template, tokenizer, max_len=max_len)

    # embedding-alignment hinge on l2 distances
    h_a1, c_a1, emb_a1 = _embedding_forward(encoder, pair_p, "first")
    h_p, c_p, emb_p = _embedding_forward(encoder, pair_p, "second")
    h_a2, c_a2, emb_a2 = _embedding_forward(encoder, pair_n, "first")
    h_n, c_n, emb_n = _embedding_forward(encoder, pair_n, "second")
    diff_pos = emb_a1 - emb_p
    diff_neg = emb_a2 - emb_n
    d_pos = float(np.linalg.norm(diff_pos))
    d_neg = float(np.linalg.norm(diff_neg))
    l_mr = max(0.0, d_pos - d_neg + loss_cfg.margin_emb)
    if l_mr > 0.0:
        u_pos = diff_pos / max(d_pos, 1e-12)
        u_neg = diff_neg / max(d_neg, 1e-12)
        _embedding_backward(encoder, h_a1, c_a1, u_pos, grads)
        _embedding_backward(encoder, h_p, c_p, -u_pos, grads)
        _embedding_backward(encoder, h_a2, c_a2, -u_neg, grads)
        _embedding_backward(encoder, h_n, c_n, u_neg, grads)

    if embedding_only:
        return l_mr, 0.0, 0.0

    pair_rp = build_pair_input(seq_p, seq_a, template, tokenizer, max_len=max_len)
    pair_rn = build_pair_input(seq_n, seq_a, template, tokenizer, max_len=max_len)

    l_be = 0.0
    l_bm = 0.0
    for pos_pair, neg_pair in ((pair_p, pair_n), (pair_rp, pair_rn)):
        hp, cp, logits_p, row_p = _entail_forward(encoder, pos_pair, verbalizer, aligner)
        hn, cn, logits_n, row_n = _entail_forward(encoder, neg_pair, verbalizer, aligner)
        q_pos, dq_pos = objectives.positive_prob_logit_grad(logits_p)
        q_neg, dq_neg = objectives.positive_prob_logit_grad(logits_n)
        l_be += objectives.entailment_bce(q_pos, q_neg)
        d_logits_p = objectives.bce_logit_grads(logits_p, target_positive=True)
        d_logits_n = objectives.bce_logit_grads(logits_n, target_positive=False)
        if loss_cfg.prompt_margin_mode == "prob":
            val, dp_pos, dp_neg = objectives.prompt_margin_grads(q_pos, q_neg, loss_cfg.margin_prompt)
            d_logits_p += dp_pos * dq_pos
            d_logits_n += dp_neg * dq_neg
        else:
            val, dp_pos, dp_neg = objectives.prompt_margin_grads(
                logits_p[0], logits_n[0], loss_cfg.margin_prompt
            )
            d_logits_p[0] += dp_pos
            d_logits_n[0] += dp_neg
        l_bm += val
        _entail_backward(encoder, hp, cp, row_p, d_logits_p, verbalizer, aligner, grads)
        _entail_backward(encoder, hn, cn, row_n, d_logits_n, verbalizer, aligner, grads)
    return l_mr, l_be, l_bm


def train_epoch(
    state: TrainState,
    triples,
    encoder,
    tokenizer,
    kg1,
    kg2,
    template,
    verbalizer,
    aligner,
    loss_cfg,
    optimizer,
    batch_size=16,
    max_len=128,
    max_units=12,
    embedding_only=False,
    unit_dropout=0.0,
    name_word_dropout=0.0,
):
    """One pass over the epoch's triples; flips the sequence kind afterwards."""
    kind = state.info_kind_this_epoch
    augment_rng = None
    if unit_dropout > 0.0 or name_word_dropout > 0.0:
        augment_rng = np.random.default_rng(epoch_rng_seed(state.rng_seed, state.epoch) + 1)
    sums = np.zeros(3)
    for start in range(0, len(triples), batch_size):
        batch = triples[start : start + batch_size]
        grads = {}
        batch_sums = np.zeros(3)
        for triple in batch:
            l_mr, l_be, l_bm = triple_loss_and_grads(
                triple, kind, kg1, kg2, encoder, tokenizer, template, verbalizer,
                aligner, loss_cfg, max_len, max_units, grads, embedding_only=embedding_only,
                augment_rng=augment_rng, unit_dropout=unit_dropout, name_word_dropout=name_word_dropout,
            )
            objectives.total_loss(l_mr, l_be, l_bm)  # rejects non-finite losses
            batch_sums += (l_mr, l_be, l_bm)
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient at epoch {state.epoch}")
            g /= len(batch)
        optimizer.step(encoder.params, grads)
        sums += batch_sums
    n = max(len(triples), 1)
    record = {
        "epoch": state.epoch,
        "kind": kind,
        "l_mr": sums[0] / n,
        "l_be": sums[1] / n,
        "l_bm": sums[2] / n,
        "total": sums.sum() / n,
        "n_triples": len(triples),
    }
    state.epoch += 1
    state.info_kind_this_epoch = KIND_FLIP[kind]
    return state, record


def embedding_hits1(seed_pairs, kg1, kg2, encoder, tokenizer, kind, max_len=128, max_units=12):
    """Embedding-stage Hits@1 of the given seed pairs against all of KG2."""
    if not seed_pairs:
        return float("nan")
    idx2 = encode_entities(kg2.entities, kg2, kind, encoder, tokenizer, max_len, max_units)
    idx1 = encode_entities([a for a, _ in seed_pairs], kg1, kind, encoder, tokenizer, max_len, max_units)
    gold = dict(seed_pairs)
    hits = 0
    for name in idx1.names:
        sims = idx2.cosine_to(idx1.unit(name))
        top = idx2.names[int(np.argmax(sims))]
        hits += top == gold[name]
    return hits / len(seed_pairs)


def pipeline_hits1(
    seed_pairs, kg1, kg2, encoder, tokenizer, kind, template, verbalizer, aligner,
    c_size=16, max_len=128, max_units=12, embedding_only=False,
):
    """Hits@1 of the full retrieve-and-rerank pipeline on the given pairs.

    Used for validation: candidates come from the current embeddings and every
    query is re-ranked, so the metric tracks what inference will use.
    """
    from .inference import EntailmentScorer, rerank, select_candidates

    if not seed_pairs:
        return float("nan")
    idx2 = encode_entities(kg2.entities, kg2, kind, encoder, tokenizer, max_len, max_units)
    idx1 = encode_entities([a for a, _ in seed_pairs], kg1, kind, encoder, tokenizer, max_len, max_units)
    gold = dict(seed_pairs)
    c_size = min(c_size, len(idx2))
    scorer = None
    if not embedding_only:
        scorer = EntailmentScorer(
            encoder, tokenizer, template, verbalizer, aligner, kg1, kg2, kind,
            max_len=max_len, max_units=max_units,
        )
    hits = 0
    for name in idx1.names:
        candidates = select_candidates(name, idx1, idx2, c_size)
        if embedding_only:
            top = candidates[0][0]
        else:
            top = rerank(name, candidates, scorer, 2.0).final_order[0]
        hits += top == gold[name]
    return hits / len(seed_pairs)


@dataclass
class TrainResult:
    state: TrainState
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_hits1: float = float("nan")
    inference_kind: str = RELATIONAL
    stopped_early: bool = False
    pool: NegativePool | None = None
    optimizer_state: dict | None = None


def train_model(
    kg1,
    kg2,
    train_seeds,
    val_seeds,
    encoder,
    tokenizer,
    template,
    verbalizer,
    aligner,
    *,
    loss_cfg=None,
    lr=1e-3,
    weight_decay=0.0,
    batch_size=16,
    max_epochs=20,
    patience=3,
    pool_size=50,
    pool_kind=RELATIONAL,
    max_len=128,
    max_units=12,
    rng_seed=0,
    train_kinds="both",
    embedding_only=False,
    freeze_base=False,
    unit_dropout=0.0,
    name_word_dropout=0.0,
    val_c_size=16,
    pool=None,
    initial_state=None,
    optimizer_state=None,
    log_fn=None,
):
    """Full training run; the encoder ends up holding the best-validation weights.

    The negative pool is built once from the untrained (or resumed) encoder's
    single-entity embeddings unless a previously stored pool is supplied.
    """
    loss_cfg = loss_cfg or LossConfig()
    log = log_fn or (lambda msg: None)

    if pool is None:
        anchors = [a for a, _ in train_seeds.pairs]
        idx1 = encode_entities(anchors, kg1, pool_kind, encoder, tokenizer, max_len, max_units)
        idx2 = encode_entities(kg2.entities, kg2, pool_kind, encoder, tokenizer, max_len, max_units)
        pool = build_negative_pool(train_seeds, idx1, idx2, pool_size)

    state = initial_state or TrainState(rng_seed=rng_seed)
    optimizer = Adam(lr=lr, weight_decay=weight_decay,
                     freeze_prefixes=BODY_PREFIXES if freeze_base else ())
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    fixed_kind = None if train_kinds == "both" else train_kinds
    has_validation = len(val_seeds.pairs) > 0
    best_params = encoder.copy_params()
    result = TrainResult(state=state, pool=pool)
    result.best_val_hits1 = state.best_val_hits1

    for _ in range(max_epochs):
        if fixed_kind is not None:
            state.info_kind_this_epoch = fixed_kind
        triples = sample_training_set(train_seeds, pool, epoch_rng_seed(rng_seed, state.epoch))
        state, record = train_epoch(
            state, triples, encoder, tokenizer, kg1, kg2, template, verbalizer,
            aligner, loss_cfg, optimizer, batch_size=batch_size, max_len=max_len,
            max_units=max_units, embedding_only=embedding_only,
            unit_dropout=unit_dropout, name_word_dropout=name_word_dropout,
        )

        hits_rel = pipeline_hits1(
            val_seeds.pairs, kg1, kg2, encoder, tokenizer, RELATIONAL, template, verbalizer,
            aligner, c_size=val_c_size, max_len=max_len, max_units=max_units,
            embedding_only=embedding_only,
        )
        hits_attr = pipeline_hits1(
            val_seeds.pairs, kg1, kg2, encoder, tokenizer, ATTRIBUTE, template, verbalizer,
            aligner, c_size=val_c_size, max_len=max_len, max_units=max_units,
            embedding_only=embedding_only,
        )
        record["val_hits1_relational"] = hits_rel
        record["val_hits1_attribute"] = hits_attr
        if np.isnan(hits_rel):
            val_hits1, val_kind = float("nan"), RELATIONAL
        else:
            val_hits1, val_kind = max((hits_rel, RELATIONAL), (hits_attr, ATTRIBUTE))
        record["val_hits1"] = val_hits1
        result.history.append(record)
        log(
            f"epoch {record['epoch']} [{record['kind']}] total={record['total']:.4f} "
            f"val_hits1={val_hits1:.4f} ({val_kind})"
        )

        if not has_validation:
            result.best_epoch = record["epoch"]
            continue
        improved = val_hits1 > state.best_val_hits1
        state, stop = check_early_stop(state, val_hits1, patience=patience)
        if improved:
            best_params = encoder.copy_params()
            result.best_epoch = record["epoch"]
            result.best_val_hits1 = val_hits1
            result.inference_kind = val_kind
        if stop:
            result.stopped_early = True
            break

    if has_validation:
        encoder.load_params(best_params)
    result.state = state
    result.optimizer_state = optimizer.state_dict()
    return result
