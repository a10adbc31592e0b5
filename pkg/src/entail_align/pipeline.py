"""Experiment orchestration: workspace preparation, training runs, alignment,
evaluation artifacts, and re-ranking parameter sweeps.

Every run directory is self-describing: config snapshot, metrics log,
checkpoints, predictions, and evaluation reports all carry the config hash.
"""

from __future__ import annotations

import json
import logging
import os

from .config import ExperimentConfig
from .embeddings import encode_entities
from .encoder import Verbalizer, build_encoder, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .inference import EntailmentScorer, align_queries, evaluate, write_predictions
from .kg import (
    PerturbationConfig,
    generate_synthetic_pair,
    load_kg,
    load_links,
    save_kg,
    save_links,
    split_seeds,
)
from .objectives import LossConfig
from .sequence import Template
from .tokenizer import Tokenizer
from .trainer import NegativePool, TrainState, train_model

logger = logging.getLogger("entail_align")

BEST_CHECKPOINT = "checkpoint_best.npz"
LAST_CHECKPOINT = "checkpoint_last.npz"


def make_template(config: ExperimentConfig) -> Template:
    if config.template_style == "hard":
        return Template("hard", hard_text=config.template_text)
    if config.template_style == "soft":
        return Template("soft", soft_length=config.soft_length)
    return Template("none")


def template_spec(template: Template):
    return {"style": template.style, "hard_text": template.hard_text, "soft_length": template.soft_length}


# ---- workspace -------------------------------------------------------------


def prepare_synthetic(config: ExperimentConfig, data_dir):
    """Generate a synthetic KG pair and write the standard workspace layout."""
    os.makedirs(data_dir, exist_ok=True)
    noise = PerturbationConfig(
        name_noise=config.noise_name,
        triple_dropout=config.noise_dropout,
        value_rewrite=config.noise_value,
    )
    kg1, kg2, gold = generate_synthetic_pair(
        config.synthetic_entities,
        config.synthetic_rel_density,
        config.synthetic_attr_density,
        noise=noise,
        rng_seed=config.rng_seed,
    )
    return _write_workspace(config, data_dir, kg1, kg2, gold)


def prepare_real(config: ExperimentConfig, data_dir, rel1, attr1, rel2, attr2, links):
    """Normalize an existing dataset (five tab-separated files) into a workspace."""
    os.makedirs(data_dir, exist_ok=True)
    kg1 = load_kg(rel1, attr1)
    kg2 = load_kg(rel2, attr2)
    gold = load_links(links)
    return _write_workspace(config, data_dir, kg1, kg2, gold)


def _write_workspace(config, data_dir, kg1, kg2, gold):
    train, valid, test = split_seeds(
        gold.pairs, config.train_ratio, config.val_ratio_of_train, config.rng_seed
    )
    save_kg(kg1, os.path.join(data_dir, "kg1_rel.tsv"), os.path.join(data_dir, "kg1_attr.tsv"))
    save_kg(kg2, os.path.join(data_dir, "kg2_rel.tsv"), os.path.join(data_dir, "kg2_attr.tsv"))
    save_links(gold, os.path.join(data_dir, "links_all.tsv"))
    save_links(train, os.path.join(data_dir, "links_train.tsv"))
    save_links(valid, os.path.join(data_dir, "links_valid.tsv"))
    save_links(test, os.path.join(data_dir, "links_test.tsv"))
    meta = {
        "config_hash": config.config_hash(),
        "n_entities_kg1": len(kg1.entities),
        "n_entities_kg2": len(kg2.entities),
        "n_rel_triples_kg1": len(kg1.relational_triples),
        "n_rel_triples_kg2": len(kg2.relational_triples),
        "n_attr_triples_kg1": len(kg1.attribute_triples),
        "n_attr_triples_kg2": len(kg2.attribute_triples),
        "n_links": len(gold),
        "n_train": len(train),
        "n_valid": len(valid),
        "n_test": len(test),
    }
    with open(os.path.join(data_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
    logger.info("workspace written to %s (%d links)", data_dir, len(gold))
    return meta


def load_workspace(config: ExperimentConfig):
    files = config.workspace_files()
    kg1 = load_kg(files["kg1_rel"], files["kg1_attr"])
    kg2 = load_kg(files["kg2_rel"], files["kg2_attr"])
    train = load_links(files["links_train"], "train")
    valid = load_links(files["links_valid"], "validation")
    test = load_links(files["links_test"], "test")
    return kg1, kg2, train, valid, test


# ---- model construction ----------------------------------------------------


def build_tokenizer(config: ExperimentConfig, kg1, kg2, template: Template):
    corpus = []
    for kg in (kg1, kg2):
        corpus.extend(sorted(kg.entities))
        corpus.extend(v for _, _, v in kg.attribute_triples)
    extra = [config.verbalizer_positive, config.verbalizer_negative]
    if template.style == "hard":
        extra.extend(template.hard_text.replace("{MASK}", " ").split())
    return Tokenizer.build(corpus, extra_words=extra, vocab_cap=config.vocab_cap,
                           n_soft_tokens=config.n_soft_tokens)


def build_model(config: ExperimentConfig, tokenizer: Tokenizer):
    encoder = build_encoder(
        config.encoder,
        vocab_size=tokenizer.vocab_size,
        d_model=config.d_model,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        d_ff=config.d_ff or None,
        max_positions=max(config.max_positions, config.max_len),
        emb_size=config.emb_size,
        rng_seed=config.rng_seed,
    )
    if hasattr(encoder, "init_soft_prompts"):
        encoder.init_soft_prompts(tokenizer, rng_seed=config.rng_seed)
    return encoder


def loss_config(config: ExperimentConfig):
    return LossConfig(
        margin_emb=config.margin_emb,
        margin_prompt=config.margin_prompt,
        prompt_margin_mode=config.prompt_margin_mode,
    )


# ---- training --------------------------------------------------------------


def run_training(config: ExperimentConfig, run_dir, resume=False, config_hash=None):
    """Train on the workspace and write best/last checkpoints plus metrics."""
    os.makedirs(run_dir, exist_ok=True)
    config_hash = config_hash or config.config_hash()
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(f"# config_hash = {config_hash}\n")
        f.write(config.to_text())

    kg1, kg2, train_seeds, val_seeds, _ = load_workspace(config)
    template = make_template(config)

    initial_state = optimizer_state = pool = None
    last_path = os.path.join(run_dir, LAST_CHECKPOINT)
    if resume and os.path.exists(last_path):
        encoder, tokenizer, meta, optimizer_state = load_checkpoint(last_path)
        st = meta["train_state"]
        initial_state = TrainState(**st)
        pool = NegativePool(
            candidates={k: tuple(v) for k, v in meta["pool"].items()},
            pool_size=meta["pool_size"],
        )
        logger.info("resuming from %s at epoch %d", last_path, initial_state.epoch)
    else:
        tokenizer = build_tokenizer(config, kg1, kg2, template)
        encoder = build_model(config, tokenizer)
    verbalizer = Verbalizer.from_tokenizer(
        tokenizer, config.verbalizer_positive, config.verbalizer_negative
    )

    result = train_model(
        kg1, kg2, train_seeds, val_seeds, encoder, tokenizer, template, verbalizer,
        config.aligner,
        loss_cfg=loss_config(config),
        lr=config.lr,
        weight_decay=config.weight_decay,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        patience=config.patience,
        pool_size=config.pool_size,
        max_len=config.max_len,
        max_units=config.max_units,
        rng_seed=config.rng_seed,
        train_kinds=config.train_kinds,
        embedding_only=config.embedding_only,
        freeze_base=config.freeze_base,
        unit_dropout=config.unit_dropout,
        name_word_dropout=config.name_word_dropout,
        val_c_size=min(config.c_size, 16),
        pool=pool,
        initial_state=initial_state,
        optimizer_state=optimizer_state,
        log_fn=logger.info,
    )

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    mode = "a" if resume else "w"
    with open(metrics_path, mode, encoding="utf-8") as f:
        for record in result.history:
            f.write(json.dumps({**record, "config_hash": config_hash}, sort_keys=True) + "\n")

    meta = {
        "aligner": config.aligner,
        "template": template_spec(template),
        "verbalizer": {"positive": config.verbalizer_positive, "negative": config.verbalizer_negative},
        "inference_kind": result.inference_kind,
        "best_epoch": result.best_epoch,
        "best_val_hits1": result.best_val_hits1,
        "config_hash": config_hash,
        "train_state": {
            "epoch": result.state.epoch,
            "info_kind_this_epoch": result.state.info_kind_this_epoch,
            "best_val_hits1": result.state.best_val_hits1,
            "epochs_since_improvement": result.state.epochs_since_improvement,
            "rng_seed": result.state.rng_seed,
        },
        "pool": {k: list(v) for k, v in result.pool.candidates.items()},
        "pool_size": result.pool.pool_size,
    }
    best_path = os.path.join(run_dir, BEST_CHECKPOINT)
    save_checkpoint(best_path, encoder, tokenizer, meta=meta)
    save_checkpoint(last_path, encoder, tokenizer, meta=meta, adam_state=result.optimizer_state)
    logger.info("training done: best epoch %s, val hits@1 %.4f (%s)",
                result.best_epoch, result.best_val_hits1, result.inference_kind)
    return {
        "checkpoint_best": best_path,
        "checkpoint_last": last_path,
        "metrics": metrics_path,
        "result": result,
    }


# ---- alignment / evaluation -------------------------------------------------


def _check_checkpoint_matches(config, meta):
    if meta.get("aligner") != config.aligner:
        raise ConfigError(
            f"checkpoint was trained with aligner {meta.get('aligner')!r}, config says {config.aligner!r}"
        )
    if meta.get("template") != template_spec(make_template(config)):
        raise ConfigError("checkpoint template does not match the configured template")


def run_alignment(config: ExperimentConfig, run_dir, checkpoint=None, config_hash=None):
    """Embedding retrieval plus confidence-gated re-ranking on the test split."""
    config_hash = config_hash or config.config_hash()
    checkpoint = checkpoint or os.path.join(run_dir, BEST_CHECKPOINT)
    encoder, tokenizer, meta, _ = load_checkpoint(checkpoint)
    _check_checkpoint_matches(config, meta)
    template = make_template(config)
    verbalizer = Verbalizer.from_tokenizer(
        tokenizer, config.verbalizer_positive, config.verbalizer_negative
    )
    kg1, kg2, _, _, test_seeds = load_workspace(config)
    kind = meta["inference_kind"] if config.info_kind == "auto" else config.info_kind

    queries = [a for a, _ in test_seeds.pairs]
    query_index = encode_entities(queries, kg1, kind, encoder, tokenizer, config.max_len, config.max_units)
    target_index = encode_entities(kg2.entities, kg2, kind, encoder, tokenizer, config.max_len, config.max_units)
    scorer = EntailmentScorer(
        encoder, tokenizer, template, verbalizer, config.aligner, kg1, kg2, kind,
        max_len=config.max_len, max_units=config.max_units, symmetric=config.rerank_symmetric,
    )
    results = align_queries(
        queries, query_index, target_index, scorer, config.c_size, config.delta,
        embedding_only=config.embedding_only,
    )
    report = evaluate(results, test_seeds, ks=config.ks())

    predictions_path = os.path.join(run_dir, "predictions.tsv")
    write_predictions(results, predictions_path, config_hash=config_hash)
    reranked_count = sum(r.reranked for r in results)
    eval_json = report.to_json(config_hash=config_hash, reranked_count=reranked_count, info_kind=kind)
    with open(os.path.join(run_dir, "eval.json"), "w", encoding="utf-8") as f:
        f.write(eval_json)
    with open(os.path.join(run_dir, "eval.txt"), "w", encoding="utf-8") as f:
        f.write(report.to_table())
    logger.info("alignment done: hits@1 %.4f, mrr %.4f, reranked %d/%d",
                report.hits_at.get(1, float("nan")), report.mrr, reranked_count, len(results))
    return {
        "predictions": predictions_path,
        "eval_json": os.path.join(run_dir, "eval.json"),
        "report": report,
        "reranked_count": reranked_count,
        "results": results,
        "info_kind": kind,
    }


def run_experiment(config: ExperimentConfig, run_dir, resume=False):
    """prepare (if synthetic) + train + align + evaluate, all artifacts on disk."""
    config_hash = config.config_hash()
    config.validate(check_paths=not config.synthetic)
    if config.synthetic and not config.data_dir:
        config = config.replace(data_dir=os.path.join(run_dir, "data"))
    if config.synthetic and not os.path.exists(os.path.join(config.data_dir, "meta.json")):
        prepare_synthetic(config, config.data_dir)
    config.validate(check_paths=True)
    training = run_training(config, run_dir, resume=resume, config_hash=config_hash)
    alignment = run_alignment(config, run_dir, checkpoint=training["checkpoint_best"], config_hash=config_hash)
    return {**training, **alignment, "config_hash": config_hash}


# ---- sweeps ------------------------------------------------------------------


class _CachingScorer:
    """Memoizes pair scores so sweep points share entailment computations."""

    def __init__(self, scorer):
        self._scorer = scorer
        self._cache = {}

    def score(self, query, candidate):
        key = (query, candidate)
        if key not in self._cache:
            self._cache[key] = self._scorer.score(query, candidate)
        return self._cache[key]


def run_sweep(config: ExperimentConfig, run_dir, axis, values, checkpoint=None, plot=False, config_hash=None):
    """Evaluate a trained checkpoint across re-ranking thresholds or candidate counts."""
    if axis not in ("threshold", "candidates"):
        raise ConfigError(f"sweep axis must be threshold/candidates, got {axis!r}")
    if not values:
        raise ConfigError("sweep values must be non-empty")
    config_hash = config_hash or config.config_hash()
    checkpoint = checkpoint or os.path.join(run_dir, BEST_CHECKPOINT)
    encoder, tokenizer, meta, _ = load_checkpoint(checkpoint)
    _check_checkpoint_matches(config, meta)
    template = make_template(config)
    verbalizer = Verbalizer.from_tokenizer(
        tokenizer, config.verbalizer_positive, config.verbalizer_negative
    )
    kg1, kg2, _, _, test_seeds = load_workspace(config)
    kind = meta["inference_kind"] if config.info_kind == "auto" else config.info_kind

    queries = [a for a, _ in test_seeds.pairs]
    query_index = encode_entities(queries, kg1, kind, encoder, tokenizer, config.max_len, config.max_units)
    target_index = encode_entities(kg2.entities, kg2, kind, encoder, tokenizer, config.max_len, config.max_units)
    scorer = _CachingScorer(EntailmentScorer(
        encoder, tokenizer, template, verbalizer, config.aligner, kg1, kg2, kind,
        max_len=config.max_len, max_units=config.max_units, symmetric=config.rerank_symmetric,
    ))

    rows = []
    for value in values:
        if axis == "threshold":
            c_size, delta = config.c_size, float(value)
            if not 0.0 <= delta <= 1.0:
                raise ConfigError(f"threshold value must be in [0, 1], got {value}")
        else:
            c_size, delta = int(value), config.delta
            if c_size < 1:
                raise ConfigError(f"candidate count must be >= 1, got {value}")
        results = align_queries(queries, query_index, target_index, scorer, c_size, delta)
        report = evaluate(results, test_seeds, ks=config.ks())
        rows.append({
            "value": float(value),
            "hits_at": {str(k): v for k, v in report.hits_at.items()},
            "mrr": report.mrr,
            "reranked_count": sum(r.reranked for r in results),
        })
        logger.info("sweep %s=%s: hits@1 %.4f, reranked %d", axis, value,
                    report.hits_at.get(1, float("nan")), rows[-1]["reranked_count"])

    os.makedirs(run_dir, exist_ok=True)
    base = os.path.join(run_dir, f"sweep_{axis}")
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump({"axis": axis, "config_hash": config_hash, "rows": rows}, f, sort_keys=True, indent=2)
    ks = sorted(int(k) for k in rows[0]["hits_at"])
    with open(base + ".tsv", "w", encoding="utf-8") as f:
        f.write(f"# config_hash={config_hash}\n")
        f.write("value\t" + "\t".join(f"hits@{k}" for k in ks) + "\tmrr\treranked_count\n")
        for row in rows:
            cells = [f"{row['value']:g}"]
            cells += [f"{row['hits_at'][str(k)]:.4f}" for k in ks]
            cells += [f"{row['mrr']:.4f}", str(row["reranked_count"])]
            f.write("\t".join(cells) + "\n")
    if plot:
        _plot_sweep(axis, rows, base + ".png")
    return rows


def _plot_sweep(axis, rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [row["value"] for row in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k in sorted(rows[0]["hits_at"], key=int):
        ax.plot(xs, [row["hits_at"][k] for row in rows], marker="o", label=f"Hits@{k}")
    ax.plot(xs, [row["mrr"] for row in rows], marker="s", label="MRR")
    ax.set_xlabel(axis)
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
