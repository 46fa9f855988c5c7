"""Learned constraint extractor: three classification heads over a pooled bag.

A discriminative counterpart to the rule parser: mean-pooled token embeddings
feed a constraint-type head (5 classes) and two value heads (the 101 lengths
of the control band plus an "unset" class). Predictions decode case by case:
the none type forces both values unset, more-than keeps only the minimum,
less-than only the maximum, and when both values are set they are reordered
so the smaller matches the minimum.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .autodiff import AdamW, Tensor
from .grammar import (
    LENGTH_MAX,
    LENGTH_MIN,
    AugmentedUtterance,
    ControlKind,
    PromptTemplate,
    StandardControlPrompt,
    default_templates,
    expand_template,
    sample_control_prompt,
)
from .rewards import DivergenceError

N_VALUE_CLASSES = LENGTH_MAX - LENGTH_MIN + 2  # 101 lengths + "unset"
KIND_CLASSES = (
    ControlKind.MORE_THAN,
    ControlKind.LESS_THAN,
    ControlKind.EQUAL_TO,
    ControlKind.BETWEEN,
    ControlKind.NONE,
)
_KIND_TO_CLASS = {k: i for i, k in enumerate(KIND_CLASSES)}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
UNK_WORD = "<unk>"


class EmptyUtteranceError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN_RE.findall(text)]


def value_to_class(v: int | None) -> int:
    if v is None or not (LENGTH_MIN <= v <= LENGTH_MAX):
        return 0
    return v - LENGTH_MIN + 1


def class_to_value(c: int) -> int | None:
    return None if c == 0 else LENGTH_MIN + c - 1


def build_vocab(extra_words=(), templates: list[PromptTemplate] | None = None) -> list[str]:
    """Deterministic extractor vocabulary: template words, the control-band
    numbers, any provided document words, and an unknown slot."""
    templates = templates or default_templates()
    words = {UNK_WORD}
    for t in templates:
        for w in tokenize(t.pattern.replace("*", " ").replace("?", " ")):
            words.add(w)
    words.update(str(v) for v in range(LENGTH_MIN, LENGTH_MAX + 1))
    words.update(w.lower() for w in extra_words)
    words.add(":")
    return sorted(words)


@dataclass
class ExtractorParams:
    vocab: list[str]
    emb: np.ndarray  # (vocab, d)
    w_type: np.ndarray  # (d, 5)
    b_type: np.ndarray
    w_min: np.ndarray  # (d, N_VALUE_CLASSES)
    b_min: np.ndarray
    w_max: np.ndarray  # (d, N_VALUE_CLASSES)
    b_max: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, vocab: list[str], emb_dim: int = 128) -> "ExtractorParams":
        d = emb_dim
        return cls(
            vocab=list(vocab),
            emb=rng.normal(0.0, 1.0, size=(len(vocab), d)),
            w_type=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, len(KIND_CLASSES))),
            b_type=np.zeros(len(KIND_CLASSES)),
            w_min=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, N_VALUE_CLASSES)),
            b_min=np.zeros(N_VALUE_CLASSES),
            w_max=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, N_VALUE_CLASSES)),
            b_max=np.zeros(N_VALUE_CLASSES),
        )

    @classmethod
    def zeros(cls, vocab: list[str], emb_dim: int = 128) -> "ExtractorParams":
        p = cls.init(np.random.default_rng(0), vocab, emb_dim)
        for a in p.arrays().values():
            a[:] = 0.0
        return p

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "emb": self.emb, "w_type": self.w_type, "b_type": self.b_type,
            "w_min": self.w_min, "b_min": self.b_min, "w_max": self.w_max, "b_max": self.b_max,
        }

    def copy(self) -> "ExtractorParams":
        return ExtractorParams(vocab=list(self.vocab),
                               **{k: v.copy() for k, v in self.arrays().items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.arrays().values())


def _word_index(vocab: list[str]) -> dict[str, int]:
    return {w: i for i, w in enumerate(vocab)}


def bag_features(vocab: list[str], texts: list[str]) -> np.ndarray:
    """Mean bag-of-words rows (n, vocab); unknown tokens share the <unk> slot."""
    index = _word_index(vocab)
    unk = index[UNK_WORD]
    x = np.zeros((len(texts), len(vocab)))
    for i, text in enumerate(texts):
        toks = tokenize(text)
        if not toks:
            raise EmptyUtteranceError("cannot encode an empty utterance")
        for t in toks:
            x[i, index.get(t, unk)] += 1.0
        x[i] /= len(toks)
    return x


def encode_utterance(params: ExtractorParams, u: str) -> np.ndarray:
    """Mean of token embeddings over the utterance (order-insensitive)."""
    return (bag_features(params.vocab, [u]) @ params.emb)[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ExtractorPrediction:
    kind: ControlKind
    min_class: int
    max_class: int
    type_probs: np.ndarray
    min_probs: np.ndarray
    max_probs: np.ndarray
    l_min: int | None = None
    l_max: int | None = None

    def to_prompt(self) -> StandardControlPrompt:
        """Best-effort conversion to a standard prompt (raises on an
        undecodable head combination)."""
        k = self.kind
        if k is ControlKind.NONE:
            return StandardControlPrompt.none()
        if k is ControlKind.MORE_THAN:
            return StandardControlPrompt.more_than(self.l_min)
        if k is ControlKind.LESS_THAN:
            return StandardControlPrompt.less_than(self.l_max)
        if k is ControlKind.EQUAL_TO:
            v = self.l_min if self.l_min is not None else self.l_max
            return StandardControlPrompt.equal_to(v)
        return StandardControlPrompt.between(self.l_min, self.l_max)


def _decode(kind: ControlKind, min_c: int, max_c: int) -> tuple[int | None, int | None]:
    lo, hi = class_to_value(min_c), class_to_value(max_c)
    if kind is ControlKind.NONE:
        return None, None
    if kind is ControlKind.MORE_THAN:
        return lo, None
    if kind is ControlKind.LESS_THAN:
        return None, hi
    if lo is not None and hi is not None and lo > hi:
        lo, hi = hi, lo
    return lo, hi


def predict(params: ExtractorParams, u: str) -> ExtractorPrediction:
    pooled = encode_utterance(params, u)
    tp = _softmax(pooled @ params.w_type + params.b_type)
    mp = _softmax(pooled @ params.w_min + params.b_min)
    xp = _softmax(pooled @ params.w_max + params.b_max)
    kind = KIND_CLASSES[int(tp.argmax())]
    min_c, max_c = int(mp.argmax()), int(xp.argmax())
    lo, hi = _decode(kind, min_c, max_c)
    return ExtractorPrediction(
        kind=kind, min_class=min_c, max_class=max_c,
        type_probs=tp, min_probs=mp, max_probs=xp, l_min=lo, l_max=hi,
    )


def _labels(dataset: list[AugmentedUtterance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y_type = np.array([_KIND_TO_CLASS[u.truth.kind] for u in dataset])
    y_min = np.array([value_to_class(u.truth.l_min) for u in dataset])
    y_max = np.array([value_to_class(u.truth.l_max) for u in dataset])
    return y_type, y_min, y_max


def _head_argmaxes(params: ExtractorParams, x: np.ndarray):
    pooled = x @ params.emb
    return (
        (pooled @ params.w_type + params.b_type).argmax(axis=1),
        (pooled @ params.w_min + params.b_min).argmax(axis=1),
        (pooled @ params.w_max + params.b_max).argmax(axis=1),
    )


def _matches(truth: StandardControlPrompt, kind_c: int, min_c: int, max_c: int) -> bool:
    """Case-by-case matching: the none kind always counts as matched; one-sided
    kinds check only their bound; two-sided kinds check both after reordering."""
    k = truth.kind
    if k is ControlKind.NONE:
        return True
    lo, hi = class_to_value(int(min_c)), class_to_value(int(max_c))
    if lo is not None and hi is not None and lo > hi:
        lo, hi = hi, lo
    if k is ControlKind.MORE_THAN:
        return lo == truth.l_min
    if k is ControlKind.LESS_THAN:
        return hi == truth.l_max
    return lo == truth.l_min and hi == truth.l_max


def matching_rate(params: ExtractorParams, dataset: list[AugmentedUtterance]) -> float:
    if not dataset:
        raise ValueError("empty dataset")
    x = bag_features(params.vocab, [u.as_text() for u in dataset])
    kinds, mins, maxs = _head_argmaxes(params, x)
    hit = sum(
        _matches(u.truth, k, lo, hi) for u, k, lo, hi in zip(dataset, kinds, mins, maxs)
    )
    return hit / len(dataset)


@dataclass
class ExtractorConfig:
    lr: float = 0.02
    epochs: int = 30
    batch_size: int = 64
    emb_dim: int | None = None  # None: match the vocabulary size (full rank)
    val_fraction: float = 0.1
    seed: int = 0
    lr_halving_tolerance: float = 1.1


def three_head_loss(
    tensors: dict[str, Tensor], x: np.ndarray, y_type: np.ndarray, y_min: np.ndarray, y_max: np.ndarray
) -> Tensor:
    """Sum of the three cross entropies, averaged over the batch."""
    from . import autodiff as ad

    pooled = Tensor(x) @ tensors["emb"]
    total = None
    for w, b, y in (
        (tensors["w_type"], tensors["b_type"], y_type),
        (tensors["w_min"], tensors["b_min"], y_min),
        (tensors["w_max"], tensors["b_max"], y_max),
    ):
        lsm = ad.log_softmax(pooled @ w + b)
        ce = -ad.take_last_axis(lsm, y).mean()
        total = ce if total is None else total + ce
    return total


def train_extractor(
    dataset: list[AugmentedUtterance],
    cfg: ExtractorConfig,
    vocab: list[str] | None = None,
) -> tuple[ExtractorParams, dict]:
    """Minibatch training on the joint head loss.

    Document words fall outside the extractor vocabulary (they pool into the
    unknown slot), which keeps the bag signal dominated by the grammar words
    the heads actually need. The learning rate halves when the epoch loss
    regresses noticeably, and the returned parameters are those of the best
    validation matching rate.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    vocab = vocab or build_vocab()
    x = bag_features(vocab, [u.as_text() for u in dataset])
    y_type, y_min, y_max = _labels(dataset)

    n_val = max(1, int(len(dataset) * cfg.val_fraction)) if len(dataset) > 1 else 0
    perm = rng.permutation(len(dataset))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(tr_idx) == 0:
        tr_idx = val_idx

    params = ExtractorParams.init(rng, vocab, cfg.emb_dim or len(vocab))
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.arrays().items()}
    opt = AdamW(list(tensors.values()), lr=cfg.lr)

    val_set = [dataset[i] for i in val_idx] or [dataset[i] for i in tr_idx[: cfg.batch_size]]
    history = {"train_loss": [], "val_match": [], "lr": []}
    best = (-1.0, params.copy())
    prev_loss = np.inf
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(tr_idx))
        epoch_loss = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = tr_idx[order[i : i + cfg.batch_size]]
            loss = three_head_loss(tensors, x[idx], y_type[idx], y_min[idx], y_max[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError(step, float(loss.data))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data) * len(idx)
            step += 1
        epoch_loss /= len(tr_idx)
        if epoch_loss > prev_loss * cfg.lr_halving_tolerance:
            opt.lr *= 0.5
        prev_loss = epoch_loss
        match = matching_rate(params, val_set)
        history["train_loss"].append(epoch_loss)
        history["val_match"].append(match)
        history["lr"].append(opt.lr)
        if match > best[0]:
            best = (match, params.copy())
    history["best_val_match"] = best[0]
    return best[1], history


def synth_utterances(
    rng_seed,
    n: int,
    kinds=KIND_CLASSES,
    doc_words: list[str] | None = None,
    doc_len_range: tuple[int, int] = (150, 400),
    templates: list[PromptTemplate] | None = None,
) -> list[AugmentedUtterance]:
    """Training/eval utterances: a random constraint rendered through a random
    template of its kind around a random document."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    templates = templates or default_templates()
    if doc_words is None:
        doc_words = [f"w{i:02d}" for i in range(40)]
    by_kind: dict[ControlKind, list[PromptTemplate]] = {}
    for t in templates:
        by_kind.setdefault(t.kind, []).append(t)
    kinds = sorted(set(kinds), key=lambda k: k.value)
    out = []
    for _ in range(n):
        p = sample_control_prompt(rng, kinds)
        tpl_list = by_kind[p.kind]
        tpl = tpl_list[int(rng.integers(len(tpl_list)))]
        doc_len = int(rng.integers(doc_len_range[0], doc_len_range[1] + 1))
        doc = [doc_words[j] for j in rng.integers(0, len(doc_words), size=doc_len)]
        out.append(expand_template(tpl, p.bounds(), doc))
    return out
