"""Desk-scale autoregressive policy, critic, and synthetic summarization corpus.

The policy is a small Elman-style recurrent net over a word+digit vocabulary:
cheap to run, and every training loss used downstream has exact analytic
gradients through the autodiff tape (checked against finite differences).
Documents are random token sequences; references are contiguous document
slices, so a perfect-relevance output always exists at the reference length.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor
from .grammar import (
    BOUNDED_KINDS,
    AugmentedUtterance,
    ControlKind,
    PromptTemplate,
    StandardControlPrompt,
    default_templates,
    render_standard_prompt,
)
from .rewards import DEFAULT_MAX_OUTPUT_LEN, DivergenceError

BOS, EOS, SEP, PAD, UNK = 0, 1, 2, 3, 4
_RESERVED = ["[BOS]", "[EOS]", "[SEP]", "[PAD]", "[UNK]"]
_KEYWORDS = ["more", "than", "less", "equal", "to", "between", "and", "tokens", "none"]

DEFAULT_MAX_GEN_LEN = DEFAULT_MAX_OUTPUT_LEN  # generation cap == reward normalizer


class InvalidTokenError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class Vocab:
    """Fixed token inventory: reserved ids, single digits, prompt keywords,
    and generic document words filling the remaining slots."""

    def __init__(self, size: int = 64):
        if size < 8:
            raise ValueError("vocab size must be at least 8")
        tokens = list(_RESERVED)
        if size >= len(_RESERVED) + 10 + len(_KEYWORDS) + 1:
            tokens += [str(d) for d in range(10)]
            tokens += _KEYWORDS
        n_doc = size - len(tokens)
        tokens += [f"w{i:02d}" for i in range(n_doc)]
        self.tokens = tokens
        self.size = size
        self._index = {t: i for i, t in enumerate(tokens)}
        self.doc_ids = np.array(
            [i for i, t in enumerate(tokens) if t.startswith("w") and t[1:].isdigit()]
        )
        if len(self.doc_ids) == 0:
            raise ValueError(f"vocab size {size} leaves no document words")

    def encode_word(self, word: str) -> list[int]:
        w = word.strip(".,:;!?\"'")
        if not w:
            return [UNK]
        if w in self._index:
            return [self._index[w]]
        if w.isdigit():
            return [self._index.get(ch, UNK) for ch in w]
        return [UNK]

    def encode_text(self, words) -> list[int]:
        out: list[int] = []
        for w in words:
            out.extend(self.encode_word(w))
        return out

    def word(self, token_id: int) -> str:
        return self.tokens[token_id]

    def words(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def prompt_ids(self, p: StandardControlPrompt) -> list[int]:
        return self.encode_text(render_standard_prompt(p).split())


# -- parameters ----------------------------------------------------------------


# The recurrent input carries the token embedding plus a few features of the
# token's position within its segment (segments are delimited by [SEP]); a
# transformer policy would get the same information from positional
# embeddings, and a plain recurrent cell cannot count reliably without it.
N_POS_FEATURES = 3
_POS_SCALE = 256.0


def position_features(k) -> np.ndarray:
    """Monotone position basis for segment position(s) k: linear, square
    root, and logarithmic progress."""
    k = np.asarray(k, dtype=np.float64)
    x = k / _POS_SCALE
    return np.stack([x, np.sqrt(x), np.log1p(k) / np.log(_POS_SCALE + 1.0)], axis=-1)


def segment_positions(ids: np.ndarray) -> np.ndarray:
    """Per-token position within its [SEP]-delimited segment (the counter
    resets on the token after each [SEP])."""
    ids = np.asarray(ids)
    flat = ids.reshape(-1, ids.shape[-1]) if ids.ndim > 1 else ids[None, :]
    n, t = flat.shape
    idx = np.arange(t)
    out = np.empty((n, t), dtype=np.int64)
    for i in range(n):
        is_sep = flat[i] == SEP
        last_sep = np.maximum.accumulate(np.where(is_sep, idx, -1))
        prev_sep = np.concatenate([[-1], last_sep[:-1]])
        out[i] = idx - prev_sep - 1
    return out.reshape(ids.shape)


@dataclass
class PolicyParams:
    emb: np.ndarray  # (V, d)
    w_in: np.ndarray  # (d + N_POS_FEATURES, h)
    w_rec: np.ndarray  # (h, h)
    b_rec: np.ndarray  # (h,)
    w_out: np.ndarray  # (h, V)
    b_out: np.ndarray  # (V,)

    @classmethod
    def init(
        cls, rng: np.random.Generator, vocab_size: int, emb_dim: int = 16, hidden_dim: int = 32
    ) -> "PolicyParams":
        d_in = emb_dim + N_POS_FEATURES
        return cls(
            emb=rng.normal(0.0, 0.5, size=(vocab_size, emb_dim)),
            w_in=rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, hidden_dim)),
            w_rec=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, hidden_dim)),
            b_rec=np.zeros(hidden_dim),
            w_out=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, vocab_size)),
            b_out=np.zeros(vocab_size),
        )

    @classmethod
    def zeros(cls, vocab_size: int, emb_dim: int = 16, hidden_dim: int = 32) -> "PolicyParams":
        return cls(
            emb=np.zeros((vocab_size, emb_dim)),
            w_in=np.zeros((emb_dim + N_POS_FEATURES, hidden_dim)),
            w_rec=np.zeros((hidden_dim, hidden_dim)),
            b_rec=np.zeros(hidden_dim),
            w_out=np.zeros((hidden_dim, vocab_size)),
            b_out=np.zeros(vocab_size),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "emb": self.emb, "w_in": self.w_in, "w_rec": self.w_rec,
            "b_rec": self.b_rec, "w_out": self.w_out, "b_out": self.b_out,
        }

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.arrays().values())


@dataclass
class CriticParams:
    emb: np.ndarray  # (V, d)
    w1: np.ndarray  # (2d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, 1)
    b2: np.ndarray  # (1,)

    @classmethod
    def init(
        cls, rng: np.random.Generator, vocab_size: int, emb_dim: int = 8, hidden_dim: int = 16
    ) -> "CriticParams":
        return cls(
            emb=rng.normal(0.0, 0.1, size=(vocab_size, emb_dim)),
            w1=rng.normal(0.0, 1.0 / np.sqrt(2 * emb_dim), size=(2 * emb_dim, hidden_dim)),
            b1=np.zeros(hidden_dim),
            w2=rng.normal(0.0, 0.1, size=(hidden_dim, 1)),
            b2=np.zeros(1),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "CriticParams":
        return CriticParams(**{k: v.copy() for k, v in self.arrays().items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.arrays().values())


# -- corpus --------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusExample:
    doc: tuple[int, ...]
    ref: tuple[int, ...]
    utterance: AugmentedUtterance

    @property
    def truth(self) -> StandardControlPrompt:
        return self.utterance.truth


def _consistent_bounds(
    kind: ControlKind, ref_len: int, rng: np.random.Generator, lo: int = 50, hi: int = 150
) -> list[int]:
    """Bounds uniform in [lo, hi], conditioned on the reference satisfying the
    constraint; nearest truthful out-of-band value when the band is infeasible."""
    if kind is ControlKind.EQUAL_TO:
        return [ref_len]
    if kind is ControlKind.MORE_THAN:
        top = min(hi, ref_len - 1)
        if top < lo:
            return [max(1, ref_len - 1)]
        return [int(rng.integers(lo, top + 1))]
    if kind is ControlKind.LESS_THAN:
        bot = max(lo, ref_len + 1)
        if bot > hi:
            return [ref_len + 1]
        return [int(rng.integers(bot, hi + 1))]
    # between
    a = int(rng.integers(lo, min(hi, ref_len) + 1)) if ref_len >= lo else ref_len
    b = int(rng.integers(max(lo, ref_len), hi + 1)) if ref_len <= hi else ref_len
    return [min(a, b), max(a, b)]


def synth_corpus(
    rng_seed,
    n: int,
    kinds=(ControlKind.EQUAL_TO,),
    vocab: Vocab | None = None,
    doc_len_range: tuple[int, int] = (150, 400),
    ref_mean: float = 71.0,
    ref_std: float = 28.0,
    ref_clip: tuple[int, int] = (20, 180),
    templates: list[PromptTemplate] | None = None,
) -> list[CorpusExample]:
    """Labelled examples: random document, contiguous reference slice with a
    clipped-normal length, and an utterance whose constraint the reference
    satisfies. With several kinds the corpus is split into equal parts, one
    kind per part."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    vocab = vocab or Vocab()
    templates = templates or default_templates()
    kinds = list(kinds)
    by_kind = {k: [t for t in templates if t.kind is k] for k in kinds}
    for k, ts in by_kind.items():
        if not ts:
            raise ValueError(f"no templates for kind {k.value}")

    out = []
    for i in range(n):
        kind = kinds[(i * len(kinds)) // n]
        doc_len = int(rng.integers(doc_len_range[0], doc_len_range[1] + 1))
        doc = rng.choice(vocab.doc_ids, size=doc_len)
        ref_len = int(np.clip(round(rng.normal(ref_mean, ref_std)), ref_clip[0],
                              min(ref_clip[1], doc_len)))
        start = int(rng.integers(0, doc_len - ref_len + 1))
        ref = doc[start : start + ref_len]
        bounds = _consistent_bounds(kind, ref_len, rng)
        tpl = by_kind[kind][int(rng.integers(len(by_kind[kind])))]
        utt = None
        from .grammar import expand_template

        utt = expand_template(tpl, bounds, vocab.words(doc))
        out.append(CorpusExample(doc=tuple(int(t) for t in doc),
                                 ref=tuple(int(t) for t in ref), utterance=utt))
    return out


def sft_input_ids(vocab: Vocab, ex: CorpusExample) -> list[int]:
    """Conditioning for supervised fine-tuning: control prompt, separator,
    document, separator (the trailing one marks where the output starts)."""
    return vocab.prompt_ids(ex.truth) + [SEP] + list(ex.doc) + [SEP]


def rl_input_ids(vocab: Vocab, ex: CorpusExample) -> list[int]:
    """Policy input during RL and evaluation: the raw utterance plus the
    output-start separator."""
    return vocab.encode_text(ex.utterance.text) + [SEP]


def relevance_proxy(reference, generated) -> float:
    """Unigram-overlap F1 between a generated sequence and the reference
    (special tokens ignored). Stands in for a semantic relevance score."""
    ref = [t for t in reference if t not in (BOS, EOS, SEP, PAD)]
    gen = [t for t in generated if t not in (BOS, EOS, SEP, PAD)]
    if not ref or not gen:
        return 0.0
    cr: dict[int, int] = {}
    for t in ref:
        cr[t] = cr.get(t, 0) + 1
    overlap = 0
    for t in gen:
        c = cr.get(t, 0)
        if c > 0:
            overlap += 1
            cr[t] = c - 1
    if overlap == 0:
        return 0.0
    prec = overlap / len(gen)
    rec = overlap / len(ref)
    return 2.0 * prec * rec / (prec + rec)


# -- forward passes ------------------------------------------------------------


def _check_tokens(params: PolicyParams, ids) -> None:
    for t in ids:
        if not 0 <= t < params.vocab_size:
            raise InvalidTokenError(f"token id {t} outside vocab of {params.vocab_size}")


def _step_h(p: PolicyParams, h: np.ndarray, token: int, k: int) -> tuple[np.ndarray, int]:
    """One cell update consuming `token` at segment position `k`; returns the
    new hidden state and the next token's segment position."""
    x = np.concatenate([p.emb[token], position_features(k)])
    h = np.tanh(x @ p.w_in + h @ p.w_rec + p.b_rec)
    return h, (0 if token == SEP else k + 1)


def _dist_from_h(p: PolicyParams, h: np.ndarray) -> np.ndarray:
    logits = h @ p.w_out + p.b_out
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def run_prefix(p: PolicyParams, s) -> tuple[np.ndarray, int]:
    h = np.zeros(p.w_rec.shape[0])
    h, k = _step_h(p, h, BOS, 0)
    for t in s:
        h, k = _step_h(p, h, t, k)
    return h, k


def step_distribution(p: PolicyParams, s, prefix) -> np.ndarray:
    """Next-token distribution after conditioning on `s` and a partial output."""
    _check_tokens(p, list(s) + list(prefix))
    h, k = run_prefix(p, s)
    for t in prefix:
        h, k = _step_h(p, h, t, k)
    return _dist_from_h(p, h)


@dataclass
class GenerationSample:
    s: tuple[int, ...]
    a: tuple[int, ...]
    l_gen: int
    step_log_probs: np.ndarray
    relevance: float | None = None


def _draw(dist: np.ndarray, u: float) -> int:
    return min(int((np.cumsum(dist) < u).sum()), len(dist) - 1)


def sample_sequence(p: PolicyParams, s, rng_seed, max_len: int = DEFAULT_MAX_GEN_LEN) -> GenerationSample:
    """Ancestral sampling until [EOS] or `max_len` tokens; deterministic in the seed."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    h, k = run_prefix(p, s)
    a: list[int] = []
    logps: list[float] = []
    for _ in range(max_len):
        dist = _dist_from_h(p, h)
        tok = _draw(dist, rng.random())
        a.append(tok)
        logps.append(float(np.log(dist[tok])))
        if tok == EOS:
            break
        h, k = _step_h(p, h, tok, k)
    l_gen = len(a) - 1 if a[-1] == EOS else len(a)
    return GenerationSample(
        s=tuple(s), a=tuple(a), l_gen=l_gen, step_log_probs=np.array(logps)
    )


def sequence_log_prob(p: PolicyParams, s, a) -> float:
    """Total log-probability of `a` given `s` (the [EOS] step included)."""
    _check_tokens(p, list(s) + list(a))
    h, k = run_prefix(p, s)
    total = 0.0
    for tok in a:
        dist = _dist_from_h(p, h)
        total += float(np.log(dist[tok]))
        h, k = _step_h(p, h, tok, k)
    return total


# -- batched numpy paths (sampling / evaluation) --------------------------------


def _pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs])
    ids = np.full((len(seqs), int(lens.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lens


def run_prefix_batch(p: PolicyParams, seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Hidden state after [BOS]+s for each row plus the next segment position;
    short rows hold their final state."""
    ids, lens = _pad_batch([[BOS] + list(s) for s in seqs])
    b, t_max = ids.shape
    h = np.zeros((b, p.w_rec.shape[0]))
    d = p.emb.shape[1]
    pos = segment_positions(ids)
    x_all = np.concatenate([p.emb[ids], position_features(pos)], axis=-1)
    for t in range(t_max):
        h_new = np.tanh(x_all[:, t, :] @ p.w_in + h @ p.w_rec + p.b_rec)
        live = (t < lens)[:, None]
        h = np.where(live, h_new, h)
    # next position per row: 0 right after a [SEP], else one past the last token
    k = np.empty(b, dtype=np.int64)
    for i, s in enumerate(seqs):
        row = [BOS] + list(s)
        k[i] = 0 if row[-1] == SEP else pos[i, len(row) - 1] + 1
    return h, k


def sample_batch(
    p: PolicyParams,
    seqs: list[list[int]],
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_GEN_LEN,
    collect_dists: bool = False,
):
    """Sample one continuation per row, sharing a single RNG stream. Every row
    draws at every step (finished rows discard theirs), so the stream layout
    does not depend on which rows finish first."""
    b = len(seqs)
    h, k = run_prefix_batch(p, seqs)
    active = np.ones(b, dtype=bool)
    toks: list[list[int]] = [[] for _ in range(b)]
    logps: list[list[float]] = [[] for _ in range(b)]
    dists: list[list[np.ndarray]] = [[] for _ in range(b)] if collect_dists else None
    for _ in range(max_len):
        logits = h @ p.w_out + p.b_out
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        u = rng.random(b)
        chosen = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1),
                            p.vocab_size - 1)
        for i in np.flatnonzero(active):
            tok = int(chosen[i])
            toks[i].append(tok)
            logps[i].append(float(np.log(probs[i, tok])))
            if collect_dists:
                dists[i].append(probs[i].copy())
        x = np.concatenate([p.emb[chosen], position_features(k)], axis=-1)
        h_new = np.tanh(x @ p.w_in + h @ p.w_rec + p.b_rec)
        h = np.where(active[:, None], h_new, h)
        k = np.where(chosen == SEP, 0, k + 1)
        active = active & (chosen != EOS)
        if not active.any():
            break
    out = []
    for i in range(b):
        a = toks[i]
        l_gen = len(a) - 1 if a and a[-1] == EOS else len(a)
        out.append(GenerationSample(
            s=tuple(seqs[i]), a=tuple(a), l_gen=l_gen, step_log_probs=np.array(logps[i])
        ))
    if collect_dists:
        return out, [np.array(d) for d in dists]
    return out


# -- tape forward (training) -----------------------------------------------------


def policy_tensors(p: PolicyParams) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in p.arrays().items()}


def rnn_hidden_tape(tensors: dict[str, Tensor], ids: np.ndarray) -> Tensor:
    """Hidden states (T, B, h) of the recurrent net over right-padded rows,
    with gradients. The whole unroll is one tape node with a hand-written
    backward pass; per-step tape nodes would dominate the runtime otherwise.
    """
    emb, w_in, w_rec, b_rec = (tensors[k] for k in ("emb", "w_in", "w_rec", "b_rec"))
    b, t_max = ids.shape
    hdim = w_rec.data.shape[0]
    d = emb.data.shape[1]
    feats = position_features(segment_positions(ids))  # (B, T, P)
    x_proj = (
        emb.data[ids] @ w_in.data[:d] + feats @ w_in.data[d:] + b_rec.data
    )  # (B, T, h)
    hs = np.empty((t_max, b, hdim))
    h = np.zeros((b, hdim))
    for t in range(t_max):
        h = np.tanh(x_proj[:, t, :] + h @ w_rec.data)
        hs[t] = h

    def back(g):
        d_xproj = np.empty_like(x_proj)
        d_wrec = np.zeros_like(w_rec.data)
        carry = np.zeros((b, hdim))
        wrec_t = w_rec.data.T
        for t in range(t_max - 1, -1, -1):
            dh = (g[t] + carry) * (1.0 - hs[t] * hs[t])
            d_xproj[:, t, :] = dh
            h_prev = hs[t - 1] if t > 0 else np.zeros((b, hdim))
            d_wrec += h_prev.T @ dh
            carry = dh @ wrec_t
        if w_rec.requires_grad:
            w_rec._accumulate(d_wrec)
        if b_rec.requires_grad:
            b_rec._accumulate(d_xproj.sum(axis=(0, 1)))
        flat = d_xproj.reshape(-1, hdim)
        if w_in.requires_grad:
            d_w_in = np.empty_like(w_in.data)
            d_w_in[:d] = emb.data[ids].reshape(-1, d).T @ flat
            d_w_in[d:] = feats.reshape(-1, feats.shape[-1]).T @ flat
            w_in._accumulate(d_w_in)
        if emb.requires_grad:
            if emb.grad is None:
                emb.grad = np.zeros_like(emb.data)
            np.add.at(emb.grad, ids.reshape(-1), flat @ w_in.data[:d].T)

    return Tensor._node(hs, (emb, w_in, w_rec, b_rec), back)


def sequence_log_softmax_tape(
    tensors: dict[str, Tensor], ids: np.ndarray
) -> Tensor:
    """Log-softmax over the vocabulary at every position: (T, B, V)."""
    h_all = rnn_hidden_tape(tensors, ids)
    t_max, b, hdim = h_all.data.shape
    v = tensors["w_out"].data.shape[1]
    logits = (h_all.reshape(t_max * b, hdim) @ tensors["w_out"] + tensors["b_out"])
    return ad.log_softmax(logits.reshape(t_max, b, v))


def gathered_log_softmax(
    tensors: dict[str, Tensor], ids: np.ndarray, batch_idx: np.ndarray, pos_idx: np.ndarray
) -> Tensor:
    """Log-softmax rows (N, V) at selected (batch row, position) pairs only.

    Losses touch a small fraction of the unrolled positions (the output
    region), so projecting just those hidden states onto the vocabulary is
    much cheaper than materializing (T, B, V) logits.
    """
    h_all = rnn_hidden_tape(tensors, ids)
    t_max, b, hdim = h_all.data.shape
    flat = h_all.reshape(t_max * b, hdim)
    sel = flat[pos_idx * b + batch_idx]  # time-major flattening
    logits = sel @ tensors["w_out"] + tensors["b_out"]
    return ad.log_softmax(logits)


def _ce_batch(examples: list[tuple[list[int], list[int]]]):
    """Pack (input_ids, target_ids) pairs into arrays for the CE loss."""
    rows, tgt_rows, masks = [], [], []
    for inp, tgt in examples:
        full = [BOS] + list(inp) + list(tgt)
        rows.append(full[:-1])
        t = np.zeros(len(full) - 1, dtype=np.int64)
        m = np.zeros(len(full) - 1)
        start = len(inp)  # position predicting the first target token
        t[start:] = full[start + 1 :]
        m[start:] = 1.0
        tgt_rows.append(t)
        masks.append(m)
    ids, _ = _pad_batch(rows)
    t_max = ids.shape[1]
    tgt = np.zeros((len(rows), t_max), dtype=np.int64)
    mask = np.zeros((len(rows), t_max))
    for i, (t, m) in enumerate(zip(tgt_rows, masks)):
        tgt[i, : len(t)] = t
        mask[i, : len(m)] = m
    return ids, tgt, mask


def cross_entropy_loss(
    tensors: dict[str, Tensor], ids: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> Tensor:
    """Mean token-level cross entropy over masked positions."""
    b_idx, t_idx = np.nonzero(mask.astype(bool))
    lsm = gathered_log_softmax(tensors, ids, batch_idx=b_idx, pos_idx=t_idx)
    lp = ad.take_last_axis(lsm, targets[b_idx, t_idx])
    return -lp.sum() / len(b_idx)


@dataclass
class SftConfig:
    lr: float = 3e-3
    epochs: int = 12
    batch_size: int = 32
    val_fraction: float = 0.1
    seed: int = 0


def _perplexity(p: PolicyParams, batches) -> float:
    tensors = {k: Tensor(v) for k, v in p.arrays().items()}
    total_lp, total_n = 0.0, 0.0
    for ids, tgt, mask in batches:
        lsm = sequence_log_softmax_tape(tensors, ids)
        lp = np.take_along_axis(lsm.data, tgt.T[:, :, None], axis=-1).squeeze(-1)
        total_lp += float((lp * mask.T).sum())
        total_n += float(mask.sum())
    return float(np.exp(-total_lp / total_n))


def sft_train(
    corpus: list[CorpusExample],
    params0: PolicyParams,
    cfg: SftConfig,
    vocab: Vocab | None = None,
) -> tuple[PolicyParams, dict]:
    """Teacher-forced cross-entropy on (prompt, [SEP], document, [SEP]) -> reference.
    Keeps the parameters of the best validation-perplexity epoch."""
    vocab = vocab or Vocab(params0.vocab_size)
    rng = np.random.default_rng(cfg.seed)
    pairs = [(sft_input_ids(vocab, ex), list(ex.ref) + [EOS]) for ex in corpus]
    n_val = max(1, int(len(pairs) * cfg.val_fraction)) if len(pairs) > 1 else 0
    perm = rng.permutation(len(pairs))
    val = [pairs[i] for i in perm[:n_val]]
    train = [pairs[i] for i in perm[n_val:]]
    if not train:
        train, val = list(pairs), list(pairs)

    params = params0.copy()
    tensors = policy_tensors(params)
    opt = AdamW(list(tensors.values()), lr=cfg.lr)
    val_batches = [
        _ce_batch(val[i : i + cfg.batch_size]) for i in range(0, len(val), cfg.batch_size)
    ] or [_ce_batch(train[: cfg.batch_size])]

    history = {"val_ppl": []}
    best = (float("inf"), params.copy())
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), cfg.batch_size):
            batch = [train[j] for j in order[i : i + cfg.batch_size]]
            ids, tgt, mask = _ce_batch(batch)
            loss = cross_entropy_loss(tensors, ids, tgt, mask)
            if not np.isfinite(loss.data):
                raise DivergenceError(step, float(loss.data))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        ppl = _perplexity(params, val_batches)
        history["val_ppl"].append(ppl)
        if ppl < best[0]:
            best = (ppl, params.copy())
    history["best_val_ppl"] = best[0]
    return best[1], history


def greedy_decode(p: PolicyParams, s, max_len: int = DEFAULT_MAX_GEN_LEN) -> list[int]:
    h, k = run_prefix(p, s)
    out = []
    for _ in range(max_len):
        dist = _dist_from_h(p, h)
        tok = int(dist.argmax())
        out.append(tok)
        if tok == EOS:
            break
        h, k = _step_h(p, h, tok, k)
    return out


# -- critic ----------------------------------------------------------------------


def _pool_counts(vocab_size: int, seqs: list) -> np.ndarray:
    counts = np.zeros((len(seqs), vocab_size))
    for i, s in enumerate(seqs):
        np.add.at(counts[i], np.asarray(s, dtype=np.int64), 1.0)
    return counts


def critic_value(phi: CriticParams, s_prime, a) -> float:
    """Scalar value of a finished sequence given only the control prompt tokens
    and the generated tokens. Sum pooling keeps the lengths observable."""
    return float(critic_value_batch(phi, [list(s_prime)], [list(a)])[0])


def critic_value_batch(phi: CriticParams, s_primes: list, a_seqs: list) -> np.ndarray:
    v = phi.emb.shape[0]
    pooled = np.concatenate(
        [_pool_counts(v, s_primes) @ phi.emb, _pool_counts(v, a_seqs) @ phi.emb], axis=1
    )
    h = np.tanh(pooled @ phi.w1 + phi.b1)
    return (h @ phi.w2 + phi.b2).ravel()


def critic_tensors(phi: CriticParams) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in phi.arrays().items()}


def critic_value_tape(
    tensors: dict[str, Tensor], counts_sp: np.ndarray, counts_a: np.ndarray
) -> Tensor:
    pooled = ad.concat([Tensor(counts_sp) @ tensors["emb"], Tensor(counts_a) @ tensors["emb"]], axis=1)
    h = (pooled @ tensors["w1"] + tensors["b1"]).tanh()
    return h @ tensors["w2"] + tensors["b2"]
