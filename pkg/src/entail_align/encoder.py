"""Sequence encoders and scoring heads.

The reference encoder is a small transformer written directly in numpy
(float64) with hand-derived backward passes, so analytic gradients can be
validated against finite differences and per-pair attention masks are exact:
positions outside a mask's allowed set contribute exactly zero attention
weight, making visible hidden states bit-identical under perturbation of
invisible tokens.

External encoders (e.g. a pretrained multilingual model) plug in through the
``SequenceEncoder`` contract and ``register_encoder``.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, EncodingError
from .sequence import PairInput, pair_segments
from .tokenizer import Tokenizer

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderOutput:
    """Hidden states of one pair input under the three attention masks."""

    hidden_full: np.ndarray
    hidden_first: np.ndarray
    hidden_second: np.ndarray
    cls_index: int = 0
    mask_token_index: int | None = None


@dataclass(frozen=True)
class Verbalizer:
    """Single-token label words scored at the mask slot."""

    positive_id: int
    negative_id: int
    positive_word: str = "Yes"
    negative_word: str = "No"

    def __post_init__(self):
        if self.positive_id == self.negative_id:
            raise ValueError("verbalizer label words must map to different token ids")

    @classmethod
    def from_tokenizer(cls, tokenizer: Tokenizer, positive="Yes", negative="No"):
        pos = tokenizer.word_id(positive)
        neg = tokenizer.word_id(negative)
        if pos is None or neg is None:
            raise ValueError(f"verbalizer words must be single vocabulary tokens: {positive!r}, {negative!r}")
        return cls(pos, neg, positive, negative)


@dataclass(frozen=True)
class AlignerScores:
    """Two-class entailment logits/probability plus projected embeddings."""

    logits: np.ndarray  # (positive, negative), pre-softmax
    prob_positive: float
    emb_first: np.ndarray
    emb_second: np.ndarray


def softmax2(logits):
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


class SequenceEncoder(abc.ABC):
    """Contract every encoder adapter fulfils."""

    kind: str
    vocab_size: int
    d_model: int
    emb_size: int

    @abc.abstractmethod
    def encode(self, pair: PairInput) -> EncoderOutput:
        """Hidden states of the pair under all three masks."""

    @abc.abstractmethod
    def project_embeddings(self, out: EncoderOutput, cls_index: int = 0):
        """Projected entity embeddings from the per-entity mask views."""

    @abc.abstractmethod
    def nsp_logits(self, out: EncoderOutput, cls_index: int = 0):
        """Two-class sentence-pair logits from the classification token."""

    @abc.abstractmethod
    def mlm_logits(self, out: EncoderOutput, mask_index: int, verbalizer: Verbalizer):
        """Label-word logits extracted from the full-vocabulary mask-slot scores."""

    def score_pair(self, pair, aligner, verbalizer=None):
        out = self.encode(pair)
        if aligner == "nsp":
            logits = self.nsp_logits(out)
        elif aligner == "mlm":
            if pair.mask_token_index is None:
                raise ValueError("mlm aligner requires a template with a mask slot")
            logits = self.mlm_logits(out, pair.mask_token_index, verbalizer)
        else:
            raise ValueError(f"aligner must be 'nsp' or 'mlm', got {aligner!r}")
        e1, e2 = self.project_embeddings(out)
        return AlignerScores(
            logits=logits,
            prob_positive=float(softmax2(logits)[0]),
            emb_first=e1,
            emb_second=e2,
        )


def _layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


class ReferenceEncoder(SequenceEncoder):
    """Small trainable transformer with learned positions and masked attention."""

    kind = "reference"

    def __init__(
        self,
        vocab_size,
        d_model=64,
        n_layers=2,
        n_heads=4,
        d_ff=None,
        max_positions=512,
        emb_size=300,
        rng_seed=0,
        match_bias_init=5.0,
    ):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} must be divisible by n_heads={n_heads}")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff or 4 * d_model
        self.max_positions = max_positions
        self.emb_size = emb_size
        self.d_head = d_model // n_heads
        rng = np.random.default_rng(rng_seed)
        s = 0.02
        xavier = np.sqrt(2.0 / (d_model + d_model))
        p = {}
        p["tok_emb"] = rng.normal(0.0, s, (vocab_size, d_model))
        p["pos_emb"] = rng.normal(0.0, s, (max_positions, d_model))
        p["seg_emb"] = rng.normal(0.0, s, (2, d_model))
        p["emb_ln_g"] = np.ones(d_model)
        p["emb_ln_b"] = np.zeros(d_model)
        for i in range(n_layers):
            pre = f"layer{i}."
            # attention logits start quiet (small q/k) while value/output run at
            # Xavier scale, so what attention routes is loud in the residual
            # stream from the first step of training
            p[pre + "wq"] = rng.normal(0.0, s, (d_model, d_model))
            p[pre + "wk"] = rng.normal(0.0, s, (d_model, d_model))
            p[pre + "wv"] = rng.normal(0.0, xavier, (d_model, d_model))
            p[pre + "wo"] = rng.normal(0.0, xavier, (d_model, d_model))
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + name] = np.zeros(d_model)
            # learnable attention bonus between occurrences of the same token,
            # so repeated surface forms across the two spans attract attention
            # from initialization onwards
            p[pre + "match_bias"] = np.full(n_heads, float(match_bias_init))
            p[pre + "ln1_g"] = np.ones(d_model)
            p[pre + "ln1_b"] = np.zeros(d_model)
            p[pre + "w1"] = rng.normal(0.0, s, (d_model, self.d_ff))
            p[pre + "b1"] = np.zeros(self.d_ff)
            p[pre + "w2"] = rng.normal(0.0, s, (self.d_ff, d_model))
            p[pre + "b2"] = np.zeros(d_model)
            p[pre + "ln2_g"] = np.ones(d_model)
            p[pre + "ln2_b"] = np.zeros(d_model)
        p["w_emb"] = rng.normal(0.0, s, (d_model, emb_size))
        p["pooler_w"] = rng.normal(0.0, s, (d_model, d_model))
        p["pooler_b"] = np.zeros(d_model)
        p["nsp_w"] = rng.normal(0.0, s, (d_model, 2))
        p["mlm_w"] = rng.normal(0.0, s, (d_model, vocab_size))
        p["mlm_b"] = np.zeros(vocab_size)
        self.params = p

    def init_soft_prompts(self, tokenizer: Tokenizer, noise=0.01, rng_seed=0):
        """Seed reserved prompt-token embeddings from the separator embedding."""
        rng = np.random.default_rng(rng_seed)
        for i in range(tokenizer.n_soft_tokens):
            row = tokenizer.soft_token_id(i)
            self.params["tok_emb"][row] = self.params["tok_emb"][3] + rng.normal(
                0.0, noise, self.d_model
            )

    # ---- forward / backward over one token sequence -----------------------

    def forward_hidden(self, token_ids, mask, segments=None, want_cache=False):
        """Hidden states (L, d) of one sequence under one visibility matrix.

        ``segments`` marks each position 0 (first entity side) or 1 (second);
        single-entity inputs default to all zeros. Positions whose mask row is
        all-false attend only to themselves; this keeps their states finite
        without exposing them to visible positions.
        """
        ids = np.asarray(token_ids, dtype=np.intp)
        L = ids.shape[0]
        if L > self.max_positions:
            raise EncodingError(f"sequence length {L} exceeds max_positions {self.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise EncodingError(f"token id outside vocabulary of size {self.vocab_size}")
        segments = np.zeros(L, dtype=np.intp) if segments is None else np.asarray(segments, dtype=np.intp)
        p = self.params
        mask_eff = np.asarray(mask, dtype=bool) | np.eye(L, dtype=bool)
        # matching bonus only across segments: surface forms shared by the two
        # entity spans attract attention, while repeats inside one span do not
        same_token = (ids[:, None] == ids[None, :]) & (segments[:, None] != segments[None, :])

        x_in = p["tok_emb"][ids] + p["pos_emb"][:L] + p["seg_emb"][segments]
        x, emb_ln_cache = _layernorm_forward(x_in, p["emb_ln_g"], p["emb_ln_b"])
        layer_caches = []
        for i in range(self.n_layers):
            pre = f"layer{i}."
            q = x @ p[pre + "wq"] + p[pre + "bq"]
            k = x @ p[pre + "wk"] + p[pre + "bk"]
            v = x @ p[pre + "wv"] + p[pre + "bv"]
            qh = q.reshape(L, self.n_heads, self.d_head).transpose(1, 0, 2)
            kh = k.reshape(L, self.n_heads, self.d_head).transpose(1, 0, 2)
            vh = v.reshape(L, self.n_heads, self.d_head).transpose(1, 0, 2)
            scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(self.d_head)
            scores = scores + p[pre + "match_bias"][:, None, None] * same_token[None, :, :]
            scores = np.where(mask_eff[None, :, :], scores, -np.inf)
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            att = e / e.sum(axis=-1, keepdims=True)
            ctx = (att @ vh).transpose(1, 0, 2).reshape(L, self.d_model)
            a_out = ctx @ p[pre + "wo"] + p[pre + "bo"]
            r1 = x + a_out
            y1, ln1_cache = _layernorm_forward(r1, p[pre + "ln1_g"], p[pre + "ln1_b"])
            h1 = y1 @ p[pre + "w1"] + p[pre + "b1"]
            act = gelu(h1)
            f_out = act @ p[pre + "w2"] + p[pre + "b2"]
            r2 = y1 + f_out
            y2, ln2_cache = _layernorm_forward(r2, p[pre + "ln2_g"], p[pre + "ln2_b"])
            if want_cache:
                layer_caches.append(
                    dict(x=x, qh=qh, kh=kh, vh=vh, att=att, ctx=ctx, ln1=ln1_cache, y1=y1, h1=h1, act=act, ln2=ln2_cache)
                )
            x = y2
        cache = (
            dict(ids=ids, L=L, segments=segments, same=same_token, emb_ln=emb_ln_cache, layers=layer_caches)
            if want_cache
            else None
        )
        return x, cache

    def backward_hidden(self, cache, d_hidden, grads):
        """Accumulate parameter gradients for one cached forward pass."""
        p = self.params
        L = cache["L"]
        dx = d_hidden
        for i in reversed(range(self.n_layers)):
            pre = f"layer{i}."
            c = cache["layers"][i]
            dr2, dg, db = _layernorm_backward(dx, c["ln2"], p[pre + "ln2_g"])
            _acc(grads, pre + "ln2_g", dg)
            _acc(grads, pre + "ln2_b", db)
            dy1 = dr2.copy()
            df_out = dr2
            _acc(grads, pre + "w2", c["act"].T @ df_out)
            _acc(grads, pre + "b2", df_out.sum(axis=0))
            dact = df_out @ p[pre + "w2"].T
            dh1 = dact * gelu_grad(c["h1"])
            _acc(grads, pre + "w1", c["y1"].T @ dh1)
            _acc(grads, pre + "b1", dh1.sum(axis=0))
            dy1 += dh1 @ p[pre + "w1"].T
            dr1, dg, db = _layernorm_backward(dy1, c["ln1"], p[pre + "ln1_g"])
            _acc(grads, pre + "ln1_g", dg)
            _acc(grads, pre + "ln1_b", db)
            dx = dr1.copy()
            da_out = dr1
            _acc(grads, pre + "wo", c["ctx"].T @ da_out)
            _acc(grads, pre + "bo", da_out.sum(axis=0))
            dctx = (da_out @ p[pre + "wo"].T).reshape(L, self.n_heads, self.d_head).transpose(1, 0, 2)
            datt = dctx @ c["vh"].transpose(0, 2, 1)
            dvh = c["att"].transpose(0, 2, 1) @ dctx
            ds = c["att"] * (datt - (datt * c["att"]).sum(axis=-1, keepdims=True))
            _acc(grads, pre + "match_bias", (ds * cache["same"][None, :, :]).sum(axis=(1, 2)))
            ds = ds / np.sqrt(self.d_head)
            dqh = ds @ c["kh"]
            dkh = ds.transpose(0, 2, 1) @ c["qh"]
            dq = dqh.transpose(1, 0, 2).reshape(L, self.d_model)
            dk = dkh.transpose(1, 0, 2).reshape(L, self.d_model)
            dv = dvh.transpose(1, 0, 2).reshape(L, self.d_model)
            x = c["x"]
            _acc(grads, pre + "wq", x.T @ dq)
            _acc(grads, pre + "bq", dq.sum(axis=0))
            _acc(grads, pre + "wk", x.T @ dk)
            _acc(grads, pre + "bk", dk.sum(axis=0))
            _acc(grads, pre + "wv", x.T @ dv)
            _acc(grads, pre + "bv", dv.sum(axis=0))
            dx += dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
        dx_in, dg, db = _layernorm_backward(dx, cache["emb_ln"], p["emb_ln_g"])
        _acc(grads, "emb_ln_g", dg)
        _acc(grads, "emb_ln_b", db)
        g_tok = _slot(grads, "tok_emb", p["tok_emb"].shape)
        np.add.at(g_tok, cache["ids"], dx_in)
        _slot(grads, "pos_emb", p["pos_emb"].shape)[:L] += dx_in
        g_seg = _slot(grads, "seg_emb", p["seg_emb"].shape)
        np.add.at(g_seg, cache["segments"], dx_in)

    # ---- spec surface ------------------------------------------------------

    def encode(self, pair: PairInput) -> EncoderOutput:
        segments = pair_segments(pair)
        h_full, _ = self.forward_hidden(pair.tokens, pair.masks.full, segments)
        h_first, _ = self.forward_hidden(pair.tokens, pair.masks.first_only, segments)
        h_second, _ = self.forward_hidden(pair.tokens, pair.masks.second_only, segments)
        for h in (h_full, h_first, h_second):
            if not np.all(np.isfinite(h)):
                raise EncodingError("non-finite hidden state")
        return EncoderOutput(
            hidden_full=h_full,
            hidden_first=h_first,
            hidden_second=h_second,
            cls_index=0,
            mask_token_index=pair.mask_token_index,
        )

    def project_embeddings(self, out, cls_index=0):
        w = self.params["w_emb"]
        return out.hidden_first[cls_index] @ w, out.hidden_second[cls_index] @ w

    def project_single(self, hidden, cls_index=0):
        """Embedding of a single-entity input (full-visibility encoding)."""
        return hidden[cls_index] @ self.params["w_emb"]

    def nsp_logits(self, out, cls_index=0):
        return self._nsp_from_hidden(out.hidden_full[cls_index])

    def _nsp_from_hidden(self, h_cls):
        p = self.params
        t = np.tanh(h_cls @ p["pooler_w"] + p["pooler_b"])
        return t @ p["nsp_w"]

    def mlm_logits(self, out, mask_index, verbalizer):
        if mask_index is None:
            raise ValueError("pair input has no mask slot; mlm scoring needs a template with one")
        return self._mlm_from_hidden(out.hidden_full[mask_index], verbalizer)

    def _mlm_from_hidden(self, h_mask, verbalizer):
        p = self.params
        full = h_mask @ p["mlm_w"] + p["mlm_b"]
        return np.array([full[verbalizer.positive_id], full[verbalizer.negative_id]])

    # ---- head backward helpers (used by the trainer) -----------------------

    def projection_backward(self, h_cls, d_emb, grads):
        _acc(grads, "w_emb", np.outer(h_cls, d_emb))
        return d_emb @ self.params["w_emb"].T

    def nsp_backward(self, h_cls, d_logits, grads):
        p = self.params
        u = h_cls @ p["pooler_w"] + p["pooler_b"]
        t = np.tanh(u)
        _acc(grads, "nsp_w", np.outer(t, d_logits))
        dt = d_logits @ p["nsp_w"].T
        du = dt * (1.0 - t * t)
        _acc(grads, "pooler_w", np.outer(h_cls, du))
        _acc(grads, "pooler_b", du)
        return du @ p["pooler_w"].T

    def mlm_backward(self, h_mask, verbalizer, d_two, grads):
        p = self.params
        d_full = np.zeros(self.vocab_size)
        d_full[verbalizer.positive_id] = d_two[0]
        d_full[verbalizer.negative_id] = d_two[1]
        g_w = _slot(grads, "mlm_w", p["mlm_w"].shape)
        g_w[:, verbalizer.positive_id] += h_mask * d_two[0]
        g_w[:, verbalizer.negative_id] += h_mask * d_two[1]
        g_b = _slot(grads, "mlm_b", p["mlm_b"].shape)
        g_b[verbalizer.positive_id] += d_two[0]
        g_b[verbalizer.negative_id] += d_two[1]
        return d_full @ p["mlm_w"].T

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params):
        for k in self.params:
            self.params[k] = np.array(params[k], dtype=float)


def _acc(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=float)


def _slot(grads, name, shape):
    if name not in grads:
        grads[name] = np.zeros(shape)
    return grads[name]


# ---- adapter registry ------------------------------------------------------

_ENCODERS = {"reference": ReferenceEncoder}


def register_encoder(kind, cls):
    """Register an external encoder adapter under a config name."""
    _ENCODERS[kind] = cls


def build_encoder(kind, **kwargs):
    if kind not in _ENCODERS:
        raise ConfigError(f"unknown encoder kind {kind!r}; registered: {sorted(_ENCODERS)}")
    return _ENCODERS[kind](**kwargs)


# ---- checkpoints -----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, encoder, tokenizer, meta=None, adam_state=None):
    """Serialize encoder weights plus a self-describing JSON header."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_kind": encoder.kind,
        "d_model": encoder.d_model,
        "n_layers": encoder.n_layers,
        "n_heads": encoder.n_heads,
        "d_ff": encoder.d_ff,
        "max_positions": encoder.max_positions,
        "emb_size": encoder.emb_size,
        "vocab_size": encoder.vocab_size,
        "vocab_hash": tokenizer.vocab_hash(),
        "vocab": list(tokenizer.base_vocab),
        "n_soft_tokens": tokenizer.n_soft_tokens,
    }
    header.update(meta or {})
    arrays = {f"param:{k}": v for k, v in encoder.params.items()}
    if adam_state is not None:
        arrays.update({f"adam_m:{k}": v for k, v in adam_state["m"].items()})
        arrays.update({f"adam_v:{k}": v for k, v in adam_state["v"].items()})
        header["adam_t"] = adam_state["t"]
    np.savez(path, __meta__=json.dumps(header, sort_keys=True), **arrays)


def load_checkpoint(path):
    """Rebuild (encoder, tokenizer, meta, adam_state) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version: {meta.get('format_version')}")
        if meta["encoder_kind"] != "reference":
            raise ConfigError(
                f"checkpoint was written by encoder kind {meta['encoder_kind']!r}; "
                "register and load it through its adapter"
            )
        tokenizer = Tokenizer(meta["vocab"], n_soft_tokens=meta["n_soft_tokens"])
        if tokenizer.vocab_hash() != meta["vocab_hash"]:
            raise ConfigError("checkpoint vocabulary hash mismatch")
        encoder = ReferenceEncoder(
            vocab_size=meta["vocab_size"],
            d_model=meta["d_model"],
            n_layers=meta["n_layers"],
            n_heads=meta["n_heads"],
            d_ff=meta["d_ff"],
            max_positions=meta["max_positions"],
            emb_size=meta["emb_size"],
        )
        encoder.load_params({k[len("param:") :]: data[k] for k in data.files if k.startswith("param:")})
        adam_state = None
        m_keys = [k for k in data.files if k.startswith("adam_m:")]
        if m_keys:
            adam_state = {
                "m": {k[len("adam_m:") :]: np.array(data[k]) for k in m_keys},
                "v": {k[len("adam_v:") :]: np.array(data[k]) for k in data.files if k.startswith("adam_v:")},
                "t": int(meta["adam_t"]),
            }
    return encoder, tokenizer, meta, adam_state
