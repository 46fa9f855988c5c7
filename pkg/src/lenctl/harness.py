"""Experiment stages: data synthesis, training, evaluation, reporting.

Each stage reads its inputs from an output directory, fails fast when a
prerequisite artifact is missing, writes its own artifacts atomically, and
logs metrics as JSONL. Runs are deterministic given (config, seeds): metric
files from two identical runs are byte-identical, and checkpoints carry no
timestamps. The RL stage checkpoints optimizer and RNG state per iteration,
so an interrupted run resumes exactly.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from . import extractor as extractor_mod
from . import ppo
from .checkpoint import load_checkpoint, namespaced, save_checkpoint, split_namespace
from .config import ExperimentConfig, config_hash
from .grammar import AugmentedUtterance, ControlKind, StandardControlPrompt
from .lm import (
    CorpusExample,
    CriticParams,
    PolicyParams,
    SftConfig,
    Vocab,
    sft_train,
    synth_corpus,
)
from .rewards import (
    RewardRegressorParams,
    predict_reward,
    regressor_mse,
    rule_reward,
    simulate_reward_dataset,
    train_reward_regressor,
)


class DependencyError(FileNotFoundError):
    """A stage prerequisite artifact is missing."""


# -- file helpers -----------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str, rows: list[dict]) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def append_jsonl(path: str, row: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")
        f.flush()
        os.fsync(f.fileno())


def read_jsonl(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise DependencyError(f"missing required file: {path}")
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise DependencyError(f"missing {hint}: {path} (run the producing stage first)")
    return path


# -- corpus (de)serialization --------------------------------------------------------


def corpus_to_rows(corpus: list[CorpusExample], vocab: Vocab) -> list[dict]:
    rows = []
    for ex in corpus:
        rows.append(
            {
                "doc": vocab.words(ex.doc),
                "ref": vocab.words(ex.ref),
                "utterance": list(ex.utterance.text),
                "truth": ex.truth.to_json(),
                "template_id": ex.utterance.template_id,
                "doc_span": list(ex.utterance.document_span),
            }
        )
    return rows


def corpus_from_rows(rows: list[dict], vocab: Vocab) -> list[CorpusExample]:
    out = []
    for r in rows:
        utt = AugmentedUtterance(
            text=tuple(r["utterance"]),
            document_span=tuple(r["doc_span"]),
            truth=StandardControlPrompt.from_json(r["truth"]),
            template_id=r["template_id"],
        )
        doc = tuple(vocab.encode_text(r["doc"]))
        ref = tuple(vocab.encode_text(r["ref"]))
        out.append(CorpusExample(doc=doc, ref=ref, utterance=utt))
    return out


def utterances_to_rows(utts: list[AugmentedUtterance]) -> list[dict]:
    return [
        {
            "utterance": list(u.text),
            "truth": u.truth.to_json(),
            "template_id": u.template_id,
            "doc_span": list(u.document_span),
        }
        for u in utts
    ]


def utterances_from_rows(rows: list[dict]) -> list[AugmentedUtterance]:
    return [
        AugmentedUtterance(
            text=tuple(r["utterance"]),
            document_span=tuple(r["doc_span"]),
            truth=StandardControlPrompt.from_json(r["truth"]),
            template_id=r["template_id"],
        )
        for r in rows
    ]


def reward_rows(dataset) -> list[dict]:
    return [
        {"kind": p.kind.value, "l_min": p.l_min, "l_max": p.l_max, "len": lg, "reward_norm": r}
        for p, lg, r in dataset
    ]


def reward_dataset_from_rows(rows: list[dict]):
    return [
        (
            StandardControlPrompt.from_json({"kind": r["kind"], "l_min": r["l_min"], "l_max": r["l_max"]}),
            r["len"],
            r["reward_norm"],
        )
        for r in rows
    ]


# -- model (de)serialization ----------------------------------------------------------


def _base_meta(cfg: ExperimentConfig, stage: str, **extra) -> dict:
    return {"config_hash": config_hash(cfg), "stage": stage, **extra}


def save_policy(path: str, policy: PolicyParams, meta: dict) -> None:
    save_checkpoint(path, namespaced({"policy": policy.arrays()}), meta)


def load_policy(path: str) -> tuple[PolicyParams, dict]:
    arrays, meta = load_checkpoint(_require(path, "policy checkpoint"))
    return PolicyParams(**split_namespace(arrays, "policy")), meta


def load_critic(arrays: dict) -> CriticParams:
    return CriticParams(**split_namespace(arrays, "critic"))


def save_extractor(path: str, params: extractor_mod.ExtractorParams, meta: dict) -> None:
    meta = {**meta, "vocab": params.vocab}
    save_checkpoint(path, namespaced({"extractor": params.arrays()}), meta)


def load_extractor(path: str) -> tuple[extractor_mod.ExtractorParams, dict]:
    arrays, meta = load_checkpoint(_require(path, "extractor checkpoint"))
    return (
        extractor_mod.ExtractorParams(vocab=meta["vocab"], **split_namespace(arrays, "extractor")),
        meta,
    )


def save_regressor(path: str, params: RewardRegressorParams, meta: dict) -> None:
    meta = {**meta, "max_output_len": params.max_output_len}
    save_checkpoint(path, namespaced({"reward": params.arrays()}), meta)


def load_regressor(path: str) -> tuple[RewardRegressorParams, dict]:
    arrays, meta = load_checkpoint(_require(path, "reward-regressor checkpoint"))
    return (
        RewardRegressorParams(max_output_len=meta["max_output_len"], **split_namespace(arrays, "reward")),
        meta,
    )


# -- shared pieces ------------------------------------------------------------------


def make_vocab(cfg: ExperimentConfig) -> Vocab:
    return Vocab(cfg.policy.vocab_size)


def make_reward_model(cfg: ExperimentConfig, out: str):
    """The scoring callable used for RL and evaluation: the rule reward, or
    the trained regressor standing behind the same interface."""
    if cfg.reward_model.kind == "rule":
        L = cfg.reward_model.max_output_len
        return lambda p, lg: rule_reward(p, lg, L)
    params, _ = load_regressor(os.path.join(out, "reward.ckpt"))
    return lambda p, lg: predict_reward(params, p, lg)


def corpus_paths(out: str) -> dict[str, str]:
    return {split: os.path.join(out, f"corpus_{split}.jsonl") for split in ("train", "val", "eval")}


def load_corpora(cfg: ExperimentConfig, out: str) -> dict[str, list[CorpusExample]]:
    vocab = make_vocab(cfg)
    return {
        split: corpus_from_rows(read_jsonl(_require(path, f"{split} corpus")), vocab)
        for split, path in corpus_paths(out).items()
    }


# -- stages ---------------------------------------------------------------------------


def stage_synth_data(cfg: ExperimentConfig, out: str) -> dict:
    """Synthesize the generation corpora, the extractor datasets, and the
    simulated reward dataset."""
    os.makedirs(out, exist_ok=True)
    vocab = make_vocab(cfg)
    cc = cfg.corpus
    rng = np.random.default_rng(cc.seed)
    sizes = {"train": cc.n_train, "val": cc.n_val, "eval": cc.n_eval}
    for split, path in corpus_paths(out).items():
        corpus = synth_corpus(
            rng, sizes[split], kinds=cfg.kinds, vocab=vocab,
            doc_len_range=(cc.doc_len_min, cc.doc_len_max),
            ref_mean=cc.ref_mean, ref_std=cc.ref_std,
            ref_clip=(cc.ref_clip_min, cc.ref_clip_max),
        )
        write_jsonl(path, corpus_to_rows(corpus, vocab))

    ec = cfg.extractor
    ex_rng = np.random.default_rng(ec.seed)
    ex_train = extractor_mod.synth_utterances(ex_rng, ec.n_train) + extractor_mod.synth_utterances(
        ex_rng, ec.n_between_extra, kinds=[ControlKind.BETWEEN]
    )
    ex_heldout = extractor_mod.synth_utterances(np.random.default_rng(ec.seed + 1), ec.n_heldout)
    write_jsonl(os.path.join(out, "extractor_train.jsonl"), utterances_to_rows(ex_train))
    write_jsonl(os.path.join(out, "extractor_heldout.jsonl"), utterances_to_rows(ex_heldout))

    rc = cfg.reward_model
    sim = simulate_reward_dataset(np.random.default_rng(rc.seed), rc.n_sim, max_output_len=rc.max_output_len)
    write_jsonl(os.path.join(out, "reward_sim.jsonl"), reward_rows(sim))

    summary = {
        "stage": "synth_data",
        "corpus_sizes": sizes,
        "extractor_train": len(ex_train),
        "reward_sim": rc.n_sim,
    }
    append_jsonl(os.path.join(out, "stage_metrics.jsonl"), summary)
    return summary


def stage_train_extractor(cfg: ExperimentConfig, out: str) -> dict:
    train = utterances_from_rows(read_jsonl(os.path.join(out, "extractor_train.jsonl")))
    heldout = utterances_from_rows(read_jsonl(os.path.join(out, "extractor_heldout.jsonl")))
    ec = cfg.extractor
    params, hist = extractor_mod.train_extractor(
        train,
        extractor_mod.ExtractorConfig(lr=ec.lr, epochs=ec.epochs, batch_size=ec.batch_size, seed=ec.seed),
    )
    heldout_match = extractor_mod.matching_rate(params, heldout)
    meta = _base_meta(cfg, "train_extractor", best_val_match=hist["best_val_match"],
                      heldout_match=heldout_match)
    save_extractor(os.path.join(out, "extractor.ckpt"), params, meta)
    summary = {"stage": "train_extractor", "best_val_match": hist["best_val_match"],
               "heldout_match": heldout_match}
    append_jsonl(os.path.join(out, "stage_metrics.jsonl"), summary)
    return summary


def stage_train_reward(cfg: ExperimentConfig, out: str) -> dict:
    dataset = reward_dataset_from_rows(read_jsonl(os.path.join(out, "reward_sim.jsonl")))
    rc = cfg.reward_model
    n_holdout = max(1, len(dataset) // 10)
    heldout, train = dataset[:n_holdout], dataset[n_holdout:]
    params, hist = train_reward_regressor(
        train, np.random.default_rng(rc.seed), hidden=rc.hidden, lr=rc.lr,
        epochs=rc.epochs, batch_size=rc.batch_size, max_output_len=rc.max_output_len,
    )
    heldout_mse = regressor_mse(params, heldout)
    meta = _base_meta(cfg, "train_reward", best_val_mse=hist["best_val_mse"], heldout_mse=heldout_mse)
    save_regressor(os.path.join(out, "reward.ckpt"), params, meta)
    summary = {"stage": "train_reward", "best_val_mse": hist["best_val_mse"], "heldout_mse": heldout_mse}
    append_jsonl(os.path.join(out, "stage_metrics.jsonl"), summary)
    return summary


def stage_sft(cfg: ExperimentConfig, out: str) -> dict:
    corpora = load_corpora(cfg, out)
    vocab = make_vocab(cfg)
    pc = cfg.policy
    policy0 = PolicyParams.init(np.random.default_rng(pc.seed), pc.vocab_size, pc.emb_dim, pc.hidden_dim)
    params, hist = sft_train(corpora["train"], policy0, cfg.sft, vocab)
    meta = _base_meta(cfg, "sft", best_val_ppl=hist["best_val_ppl"])
    save_policy(os.path.join(out, "sft.ckpt"), params, meta)
    rows = [{"stage": "sft", "epoch": i, "val_ppl": p} for i, p in enumerate(hist["val_ppl"])]
    write_jsonl(os.path.join(out, "sft_metrics.jsonl"), rows)
    summary = {"stage": "sft", "best_val_ppl": hist["best_val_ppl"]}
    append_jsonl(os.path.join(out, "stage_metrics.jsonl"), summary)
    return summary


def _rl_iter_path(out: str, iteration: int) -> str:
    return os.path.join(out, f"rl_iter_{iteration:04d}.ckpt")


def stage_rl(cfg: ExperimentConfig, out: str) -> dict:
    """Reinforcement fine-tuning from the SFT checkpoint, resumable from the
    last per-iteration checkpoint."""
    corpora = load_corpora(cfg, out)
    vocab = make_vocab(cfg)
    reward_model = make_reward_model(cfg, out)
    sft_params, _ = load_policy(os.path.join(out, "sft.ckpt"))
    critic0 = CriticParams.init(
        np.random.default_rng(cfg.critic.seed), cfg.policy.vocab_size,
        cfg.critic.emb_dim, cfg.critic.hidden_dim,
    )
    trainer = ppo.PPOTrainer(sft_params, critic0, cfg.ppo)
    rng = np.random.default_rng(cfg.ppo.seed)
    metrics_path = os.path.join(out, "rl_metrics.jsonl")

    start_iter = 1
    done = [it for it in range(cfg.ppo.n_iterations + 1) if os.path.exists(_rl_iter_path(out, it))]
    if done:
        last = max(done)
        arrays, meta = load_checkpoint(_rl_iter_path(out, last))
        if meta.get("config_hash") != config_hash(cfg):
            raise DependencyError(
                f"existing RL checkpoints in {out} were produced by a different config; "
                "use a fresh output directory"
            )
        trainer.load_state_arrays(arrays)
        rng.bit_generator.state = meta["rng_state"]
        rows = [r for r in read_jsonl(metrics_path) if r["iter"] <= last]
        write_jsonl(metrics_path, rows)
        start_iter = last + 1
    else:
        row = ppo.validation_row(trainer, 0, corpora["val"], vocab, reward_model)
        write_jsonl(metrics_path, [row])
        save_checkpoint(
            _rl_iter_path(out, 0), trainer.state_arrays(),
            _base_meta(cfg, "rl", iteration=0, metrics=row, rng_state=_rng_state(rng)),
        )

    for it in range(start_iter, cfg.ppo.n_iterations + 1):
        row = ppo.run_iteration(trainer, it, corpora["train"], corpora["val"], vocab, reward_model, rng)
        append_jsonl(metrics_path, row)
        save_checkpoint(
            _rl_iter_path(out, it), trainer.state_arrays(),
            _base_meta(cfg, "rl", iteration=it, metrics=row, rng_state=_rng_state(rng)),
        )

    rows = read_jsonl(metrics_path)
    selected_iter, warning = select_checkpoint(rows, cfg.relevance_drop_threshold)
    sel_arrays, sel_meta = load_checkpoint(_rl_iter_path(out, selected_iter))
    policy = PolicyParams(**split_namespace(sel_arrays, "policy"))
    save_policy(
        os.path.join(out, "rl_selected.ckpt"), policy,
        _base_meta(cfg, "rl_selected", iteration=selected_iter, fallback_warning=warning,
                   metrics=sel_meta["metrics"]),
    )
    summary = {"stage": "rl", "selected_iter": selected_iter, "fallback_warning": warning,
               "final_val_error": rows[-1]["val_error"], "selected_val_error": rows[selected_iter]["val_error"]}
    append_jsonl(os.path.join(out, "stage_metrics.jsonl"), summary)
    return summary


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def select_checkpoint(metric_rows: list[dict], relevance_drop_threshold: float) -> tuple[int, bool]:
    """Among iterations whose validation relevance dropped less than the
    threshold below the iteration-0 baseline, pick the lowest validation
    control error (earliest on ties). Falls back to the baseline with a
    warning flag when nothing qualifies."""
    if not metric_rows:
        raise ValueError("empty checkpoint series")
    rows = sorted(metric_rows, key=lambda r: r["iter"])
    base = rows[0]
    if base["iter"] != 0:
        raise ValueError("series must contain the iteration-0 baseline")
    floor = base["val_relevance"] - relevance_drop_threshold
    qualified = [r for r in rows if r["val_relevance"] > floor]
    if not qualified:
        return 0, True
    best = min(qualified, key=lambda r: (r["val_error"], r["iter"]))
    return int(best["iter"]), False


# -- evaluation ---------------------------------------------------------------------


def _checkpoint_for_setting(cfg: ExperimentConfig, out: str) -> str:
    name = "rl_selected.ckpt" if cfg.uses_rl else "sft.ckpt"
    return os.path.join(out, name)


def run_eval(
    cfg: ExperimentConfig, out: str, checkpoint: str | None = None, best_of: int = 1
) -> dict:
    corpora = load_corpora(cfg, out)
    vocab = make_vocab(cfg)
    reward_model = make_reward_model(cfg, out)
    ckpt_path = checkpoint or _checkpoint_for_setting(cfg, out)
    policy, _meta = load_policy(ckpt_path)
    agg, records = ppo.evaluate_policy(
        policy, corpora["eval"], vocab, reward_model,
        np.random.default_rng(cfg.eval_seed), cfg.policy.max_gen_len, best_of=best_of,
    )
    label = cfg.setting if best_of == 1 else f"{cfg.setting}_n{best_of}"
    write_jsonl(os.path.join(out, f"eval_records_{label}.jsonl"), records)
    summary = {
        "stage": "eval", "setting": cfg.setting, "best_of": best_of,
        "checkpoint": os.path.basename(ckpt_path), **agg,
        "per_kind": per_kind_table(records),
    }
    append_jsonl(os.path.join(out, "eval_metrics.jsonl"), summary)
    return summary


def stage_eval(cfg: ExperimentConfig, out: str, checkpoint: str | None = None) -> dict:
    return run_eval(cfg, out, checkpoint, best_of=1)


def stage_filter_eval(cfg: ExperimentConfig, out: str, checkpoint: str | None = None) -> dict:
    return run_eval(cfg, out, checkpoint, best_of=cfg.filter_n)


def per_kind_table(records: list[dict]) -> dict:
    table: dict[str, dict] = {}
    for kind in sorted({r["kind"] for r in records}):
        rs = [r for r in records if r["kind"] == kind]
        table[kind] = {
            "n": len(rs),
            "error": float(np.mean([r["error"] for r in rs])),
            "relevance": float(np.mean([r["relevance"] for r in rs])),
        }
    return table


# -- reporting ----------------------------------------------------------------------


def report(out: str) -> tuple[str, dict]:
    """Summarize eval tables and emit learning-curve CSVs. Empty metric
    directories produce an empty table and a warning, not an error."""
    lines = []
    eval_path = os.path.join(out, "eval_metrics.jsonl")
    curves: dict[str, str] = {}
    if os.path.exists(eval_path):
        rows = read_jsonl(eval_path)
    else:
        rows = []
    if not rows:
        lines.append("warning: no evaluation metrics found")
    else:
        lines.append(f"{'setting':24s} {'kind':12s} {'n':>6s} {'error':>9s} {'relevance':>10s}")
        for r in rows:
            label = r["setting"] if r.get("best_of", 1) == 1 else f"{r['setting']}+filter{r['best_of']}"
            for kind, cell in r["per_kind"].items():
                lines.append(
                    f"{label:24s} {kind:12s} {cell['n']:6d} {cell['error']:9.2f} {cell['relevance']:10.4f}"
                )
            lines.append(
                f"{label:24s} {'ALL':12s} {'':>6s} {r['val_error']:9.2f} {r['val_relevance']:10.4f}"
            )

    rl_path = os.path.join(out, "rl_metrics.jsonl")
    if os.path.exists(rl_path):
        rl_rows = read_jsonl(rl_path)
        header = "iter,policy_loss,value_loss,val_reward,val_error,val_relevance"
        csv = "\n".join(
            [header]
            + [
                f"{r['iter']},{r['policy_loss']},{r['value_loss']},{r['val_reward']},{r['val_error']},{r['val_relevance']}"
                for r in rl_rows
            ]
        )
        curve_path = os.path.join(out, "learning_curves.csv")
        _atomic_write(curve_path, csv + "\n")
        curves["learning_curves"] = curve_path
    text = "\n".join(lines)
    return text, curves
