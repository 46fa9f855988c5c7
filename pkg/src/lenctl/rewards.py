"""Length rewards: the rule-based score, its error metric, and a trained stand-in.

The rule reward is non-positive and piecewise linear in the generated length:
zero inside the constraint's feasible set, sloping down by one token of
penalty per token of violation outside it. The regressor learns the same
surface from simulated (constraint, length) pairs in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AdamW, Tensor
from .grammar import LENGTH_MAX, LENGTH_MIN, ControlKind, StandardControlPrompt

DEFAULT_MAX_OUTPUT_LEN = 256


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass(frozen=True)
class RewardScore:
    value: float  # token units, always <= 0
    normalized: float  # value / max_output_len

    @classmethod
    def from_value(cls, value: float, max_output_len: int) -> "RewardScore":
        return cls(value=float(value), normalized=float(value) / max_output_len)


def rule_reward(
    p: StandardControlPrompt, l_gen: int, max_output_len: int = DEFAULT_MAX_OUTPUT_LEN
) -> RewardScore:
    """Score a generated length against a constraint (0 iff satisfied)."""
    relu = lambda x: x if x > 0 else 0
    k = p.kind
    if k is ControlKind.NONE:
        v = 0
    elif k is ControlKind.MORE_THAN:
        v = -relu(p.l_min - l_gen)
    elif k is ControlKind.LESS_THAN:
        v = -relu(l_gen - p.l_max)
    elif k is ControlKind.EQUAL_TO:
        v = -abs(p.l_min - l_gen)
    else:
        v = -(relu(p.l_min - l_gen) + relu(l_gen - p.l_max))
    return RewardScore.from_value(v, max_output_len)


def rule_reward_lengths(p: StandardControlPrompt, lengths: np.ndarray) -> np.ndarray:
    """Vectorized rule reward over an array of generated lengths (token units)."""
    lg = np.asarray(lengths, dtype=np.float64)
    k = p.kind
    if k is ControlKind.NONE:
        return np.zeros_like(lg)
    if k is ControlKind.MORE_THAN:
        return -np.maximum(p.l_min - lg, 0.0)
    if k is ControlKind.LESS_THAN:
        return -np.maximum(lg - p.l_max, 0.0)
    if k is ControlKind.EQUAL_TO:
        return -np.abs(p.l_min - lg)
    return -(np.maximum(p.l_min - lg, 0.0) + np.maximum(lg - p.l_max, 0.0))


def control_error(p: StandardControlPrompt, l_gen: int) -> float:
    """Distance in tokens from the generated length to the feasible set."""
    return -rule_reward(p, l_gen).value


# -- trainable reward regressor ------------------------------------------------

_KIND_ORDER = (
    ControlKind.MORE_THAN,
    ControlKind.LESS_THAN,
    ControlKind.EQUAL_TO,
    ControlKind.BETWEEN,
    ControlKind.NONE,
)
_KIND_INDEX = {k: i for i, k in enumerate(_KIND_ORDER)}
N_FEATURES = len(_KIND_ORDER) + 3  # one-hot kind + l_min, l_max, l_gen (normalized)


@dataclass
class RewardRegressorParams:
    w1: np.ndarray  # (N_FEATURES, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, 1)
    b2: np.ndarray  # (1,)
    max_output_len: int = DEFAULT_MAX_OUTPUT_LEN

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 32,
             max_output_len: int = DEFAULT_MAX_OUTPUT_LEN) -> "RewardRegressorParams":
        return cls(
            w1=rng.normal(0.0, 0.5, size=(N_FEATURES, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 0.5, size=(hidden, 1)),
            b2=np.zeros(1),
            max_output_len=max_output_len,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def reward_features(
    p: StandardControlPrompt, l_gen: float, max_output_len: int
) -> np.ndarray:
    x = np.zeros(N_FEATURES)
    x[_KIND_INDEX[p.kind]] = 1.0
    x[len(_KIND_ORDER) + 0] = (p.l_min or 0) / max_output_len
    x[len(_KIND_ORDER) + 1] = (p.l_max or 0) / max_output_len
    x[len(_KIND_ORDER) + 2] = l_gen / max_output_len
    return x


def _forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return (x @ w1 + b1).tanh() @ w2 + b2


def simulate_reward_dataset(
    rng: np.random.Generator,
    n: int,
    kinds=(ControlKind.MORE_THAN, ControlKind.LESS_THAN, ControlKind.EQUAL_TO, ControlKind.BETWEEN),
    max_output_len: int = DEFAULT_MAX_OUTPUT_LEN,
) -> list[tuple[StandardControlPrompt, int, float]]:
    """(prompt, generated length, normalized rule reward) triples with lengths
    sampled uniformly in the control band."""
    from .grammar import sample_control_prompt

    out = []
    for _ in range(n):
        p = sample_control_prompt(rng, kinds)
        l_gen = int(rng.integers(LENGTH_MIN, LENGTH_MAX + 1))
        out.append((p, l_gen, rule_reward(p, l_gen, max_output_len).normalized))
    return out


def dataset_matrices(
    dataset: list[tuple[StandardControlPrompt, int, float]], max_output_len: int
) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([reward_features(p, lg, max_output_len) for p, lg, _ in dataset])
    y = np.array([[r] for _, _, r in dataset])
    return x, y


def train_reward_regressor(
    dataset: list[tuple[StandardControlPrompt, int, float]],
    rng: np.random.Generator,
    hidden: int = 32,
    lr: float = 3e-3,
    epochs: int = 30,
    batch_size: int = 256,
    val_fraction: float = 0.1,
    max_output_len: int = DEFAULT_MAX_OUTPUT_LEN,
) -> tuple[RewardRegressorParams, dict]:
    """Fit the regressor by minibatch gradient descent on MSE; returns the
    parameters of the best validation epoch and a small history dict."""
    x, y = dataset_matrices(dataset, max_output_len)
    n_val = max(1, int(len(dataset) * val_fraction))
    perm = rng.permutation(len(dataset))
    x, y = x[perm], y[perm]
    x_val, y_val = x[:n_val], y[:n_val]
    x_tr, y_tr = x[n_val:], y[n_val:]

    params = RewardRegressorParams.init(rng, hidden, max_output_len)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.arrays().items()}
    opt = AdamW(list(tensors.values()), lr=lr)
    w1, b1, w2, b2 = tensors["w1"], tensors["b1"], tensors["w2"], tensors["b2"]

    best = None
    history = {"val_mse": []}
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(x_tr))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            pred = _forward(Tensor(x_tr[idx]), w1, b1, w2, b2)
            loss = (pred - Tensor(y_tr[idx])).square().mean()
            if not np.isfinite(loss.data):
                raise DivergenceError(step, float(loss.data))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        val_pred = _forward(Tensor(x_val), w1, b1, w2, b2).data
        val_mse = float(np.mean((val_pred - y_val) ** 2))
        history["val_mse"].append(val_mse)
        if best is None or val_mse < best[0]:
            best = (val_mse, {k: t.data.copy() for k, t in tensors.items()})

    out = RewardRegressorParams(max_output_len=max_output_len, **best[1])
    history["best_val_mse"] = best[0]
    return out, history


def predict_reward(
    params: RewardRegressorParams, p: StandardControlPrompt, l_gen: int
) -> RewardScore:
    """Regressor score for one (constraint, length) pair, clamped non-positive."""
    x = reward_features(p, l_gen, params.max_output_len)[None, :]
    h = np.tanh(x @ params.w1 + params.b1)
    norm = float(h @ params.w2 + params.b2)
    norm = min(norm, 0.0)
    return RewardScore(value=norm * params.max_output_len, normalized=norm)


def regressor_mse(
    params: RewardRegressorParams, dataset: list[tuple[StandardControlPrompt, int, float]]
) -> float:
    x, y = dataset_matrices(dataset, params.max_output_len)
    h = np.tanh(x @ params.w1 + params.b1)
    pred = h @ params.w2 + params.b2
    return float(np.mean((pred - y) ** 2))
