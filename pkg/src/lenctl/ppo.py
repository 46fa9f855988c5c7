"""Reinforcement fine-tuning with a modified PPO.

Rewards arrive only when generation ends, so there is no per-timestep credit:
one scalar advantage per trajectory (reward minus the rollout-time critic
value, or the raw reward in actor-only mode) multiplies a sequence-level
probability ratio. The policy objective is the clipped surrogate plus an
entropy term and a penalty on the KL divergence from the rollout policy; the
critic regresses its value to the observed reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import filtering
from .autodiff import AdamW, Tensor
from .grammar import AmbiguousConstraintError, InvalidPromptError, StandardControlPrompt, parse_utterance
from .lm import (
    BOS,
    CorpusExample,
    CriticParams,
    PolicyParams,
    Vocab,
    _pad_batch,
    _pool_counts,
    critic_tensors,
    critic_value_batch,
    critic_value_tape,
    gathered_log_softmax,
    policy_tensors,
    relevance_proxy,
    rl_input_ids,
    sample_batch,
)
from .rewards import DivergenceError, rule_reward

LOG_RATIO_CLAMP = 20.0


class ConfigError(ValueError):
    pass


@dataclass
class PPOConfig:
    eps_clip: float = 0.2
    entropy_coef: float = 0.01  # c
    kl_coef: float = 0.1  # beta
    actor_lr: float = 1e-4  # paper value for GPT-2: 3e-7
    critic_lr: float = 3e-4
    update_timestep: int = 512  # M: rollouts per iteration
    surrogate_epochs: int = 16
    minibatch_size: int = 32
    n_iterations: int = 40
    actor_only: bool = False
    entropy_sign: str = "bonus"  # "bonus" (exploration) | "literal" (subtract S)
    max_gen_len: int = 256
    adam_eps: float = 1e-7
    filter_rollouts: bool = False
    filter_n: int = 8
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError(f"eps_clip must be in (0,1), got {self.eps_clip}")
        if not self.update_timestep >= self.minibatch_size >= 1:
            raise ConfigError("need update_timestep >= minibatch_size >= 1")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.entropy_sign not in ("bonus", "literal"):
            raise ConfigError(f"unknown entropy_sign {self.entropy_sign!r}")


@dataclass
class Trajectory:
    s: tuple[int, ...]  # policy input tokens
    s_prime: tuple[int, ...]  # standard prompt tokens (critic/reward view)
    a: tuple[int, ...]  # generated tokens
    old_log_probs: np.ndarray  # per-step log-probs under the rollout policy
    old_dists: np.ndarray  # (len(a), V) rollout-policy distributions
    reward: float  # normalized reward of the finished sequence
    old_value: float  # critic value at rollout time
    prompt: StandardControlPrompt
    l_gen: int
    reference: tuple[int, ...] = ()

    @property
    def old_seq_log_prob(self) -> float:
        return float(self.old_log_probs.sum())


@dataclass
class RolloutBuffer:
    trajectories: list[Trajectory] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    def clear(self) -> None:
        self.trajectories.clear()


def collect_rollouts(
    policy: PolicyParams,
    critic: CriticParams | None,
    reward_model,
    examples: list[CorpusExample],
    m: int,
    vocab: Vocab,
    rng: np.random.Generator,
    cfg: PPOConfig,
    parser=parse_utterance,
) -> RolloutBuffer:
    """Run the rollout phase: parse each utterance to its standard prompt,
    sample a continuation, score it, and store everything the surrogate
    phase needs. Unparseable utterances are skipped and counted."""
    if m < 1:
        raise ConfigError("need m >= 1")
    buffer = RolloutBuffer()
    picked: list[tuple[CorpusExample, StandardControlPrompt]] = []
    for ex in examples:
        if len(picked) == m:
            break
        try:
            prompt = parser(ex.utterance.as_text())
        except (AmbiguousConstraintError, InvalidPromptError):
            buffer.skipped += 1
            continue
        picked.append((ex, prompt))

    inputs = [rl_input_ids(vocab, ex) for ex, _ in picked]
    if cfg.filter_rollouts:
        samples, dists = [], []
        for s, (ex, prompt) in zip(inputs, picked):
            seed = int(rng.integers(2**31))
            chosen = filtering.best_of_n(
                policy, s, prompt, reward_model, cfg.filter_n, seed, cfg.max_gen_len,
                reference=ex.ref,
            ).best
            samples.append(chosen)
            dists.append(_dists_for(policy, s, chosen.a))
    else:
        samples, dists = sample_batch(policy, inputs, rng, cfg.max_gen_len, collect_dists=True)

    prompts = [p for _, p in picked]
    s_primes = [vocab.prompt_ids(p) for p in prompts]
    if critic is not None:
        values = critic_value_batch(critic, s_primes, [list(sm.a) for sm in samples])
    else:
        values = np.zeros(len(samples))

    for (ex, prompt), sp, sm, d, v in zip(picked, s_primes, samples, dists, values):
        score = reward_model(prompt, sm.l_gen)
        buffer.trajectories.append(
            Trajectory(
                s=tuple(sm.s), s_prime=tuple(sp), a=tuple(sm.a),
                old_log_probs=sm.step_log_probs, old_dists=d,
                reward=score.normalized, old_value=float(v),
                prompt=prompt, l_gen=sm.l_gen, reference=ex.ref,
            )
        )
    return buffer


def _dists_for(policy: PolicyParams, s, a) -> np.ndarray:
    """Per-step distributions of the policy teacher-forced along a."""
    from .lm import _dist_from_h, _step_h, run_prefix

    h, k = run_prefix(policy, s)
    out = []
    for tok in a:
        out.append(_dist_from_h(policy, h))
        h, k = _step_h(policy, h, tok, k)
    return np.array(out)


# -- scalar ops ------------------------------------------------------------------


def advantage(traj: Trajectory, mode: str = "actor_critic") -> float:
    """Terminal advantage: reward minus the rollout-time value (actor-critic)
    or the raw reward (actor-only)."""
    if mode == "actor_critic":
        return traj.reward - traj.old_value
    if mode == "actor_only":
        return traj.reward
    raise ConfigError(f"unknown advantage mode {mode!r}")


def ratio(policy: PolicyParams, traj: Trajectory) -> float:
    """Sequence-level probability ratio against the rollout policy, computed
    in log space and clamped before exponentiation."""
    from .lm import sequence_log_prob

    log_r = sequence_log_prob(policy, traj.s, traj.a) - traj.old_seq_log_prob
    return float(np.exp(np.clip(log_r, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)))


def clip_surrogate(r: float, adv: float, eps: float) -> float:
    """Loss contribution of one trajectory: -min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    return -min(r * adv, float(np.clip(r, 1.0 - eps, 1.0 + eps)) * adv)


def entropy_term(dists: np.ndarray) -> float:
    """Mean of pi*log(pi) over steps and the vocabulary (0*log0 = 0); always <= 0."""
    d = np.asarray(dists, dtype=np.float64)
    plogp = np.where(d > 0.0, d * np.log(np.where(d > 0.0, d, 1.0)), 0.0)
    return float(plogp.mean())


def kl_penalty(new_dists: np.ndarray, old_dists: np.ndarray) -> float:
    """Mean per-step KL(new || old) over the full vocabulary."""
    p = np.asarray(new_dists, dtype=np.float64)
    q = np.asarray(old_dists, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    ratio_ = np.where(p > 0.0, p / np.where(q > 0.0, q, 1.0), 1.0)
    kl_steps = (np.where(p > 0.0, p * np.log(ratio_), 0.0)).sum(axis=-1)
    return float(kl_steps.mean())


# -- batched losses ----------------------------------------------------------------


def _pack_minibatch(minibatch: list[Trajectory]):
    """Arrays for the batched loss: padded input ids, the (batch, position)
    index of every generation step, its target token, the matching old
    distributions, and a per-trajectory segment-sum matrix."""
    rows = [[BOS] + list(t.s) + list(t.a) for t in minibatch]
    ids, _ = _pad_batch(rows)
    ids = ids[:, :-1]
    b_idx, t_idx, tgt = [], [], []
    for i, t in enumerate(minibatch):
        start = len(t.s)  # position predicting a[0]
        n = len(t.a)
        b_idx.extend([i] * n)
        t_idx.extend(range(start, start + n))
        tgt.extend(t.a)
    b_idx = np.array(b_idx, dtype=np.int64)
    t_idx = np.array(t_idx, dtype=np.int64)
    tgt = np.array(tgt, dtype=np.int64)
    old = np.concatenate([t.old_dists for t in minibatch], axis=0)  # (N, V)
    seg = np.zeros((len(minibatch), len(tgt)))
    seg[b_idx, np.arange(len(tgt))] = 1.0
    return ids, b_idx, t_idx, tgt, old, seg


def policy_loss(
    tensors: dict[str, Tensor],
    minibatch: list[Trajectory],
    cfg: PPOConfig,
) -> tuple[Tensor, dict]:
    """Total policy loss of a minibatch (mean of clipped surrogate, weighted
    entropy, and weighted KL) with gradients, plus summary statistics."""
    mode = "actor_only" if cfg.actor_only else "actor_critic"
    vocab_size = tensors["b_out"].data.shape[0]
    ids, b_idx, t_idx, tgt, old, seg = _pack_minibatch(minibatch)
    b = len(minibatch)
    lens = np.array([float(len(t.a)) for t in minibatch])
    advs = np.array([advantage(t, mode) for t in minibatch])
    old_seq_lp = np.array([t.old_seq_log_prob for t in minibatch])

    lsm = gathered_log_softmax(tensors, ids, b_idx, t_idx)  # (N, V)
    seg_t = Tensor(seg)

    # sequence log-probs and the clipped surrogate
    step_lp = ad.take_last_axis(lsm, tgt).reshape(-1, 1)  # (N, 1)
    seq_lp = (seg_t @ step_lp).reshape(-1)  # (B,)
    log_ratio = (seq_lp - Tensor(old_seq_lp)).clip(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    r = log_ratio.exp()
    adv_t = Tensor(advs)
    surrogate = ad.minimum(r * adv_t, r.clip(1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * adv_t)

    # per-trajectory entropy: mean pi log pi over steps and vocabulary
    probs = lsm.exp()
    plogp = (probs * lsm).sum(axis=1).reshape(-1, 1)  # (N, 1)
    entropy = (seg_t @ plogp).reshape(-1) * Tensor(1.0 / (lens * vocab_size))

    # per-trajectory KL(new || old), exact categorical, averaged over steps
    kl_step = (probs * (lsm - Tensor(np.log(old)))).sum(axis=1).reshape(-1, 1)
    kl = (seg_t @ kl_step).reshape(-1) * Tensor(1.0 / lens)

    ent_sign = 1.0 if cfg.entropy_sign == "bonus" else -1.0
    per_traj = -surrogate + ent_sign * cfg.entropy_coef * entropy + cfg.kl_coef * kl
    loss = per_traj.sum() / b

    info = {
        "ratio": r.data.copy(),
        "entropy": entropy.data.copy(),
        "kl": kl.data.copy(),
        "advantage": advs,
    }
    return loss, info


def value_loss(
    tensors: dict[str, Tensor], minibatch: list[Trajectory]
) -> Tensor:
    """Mean squared error of the critic value against the stored reward."""
    v = tensors["emb"].data.shape[0]
    counts_sp = _pool_counts(v, [list(t.s_prime) for t in minibatch])
    counts_a = _pool_counts(v, [list(t.a) for t in minibatch])
    pred = critic_value_tape(tensors, counts_sp, counts_a)  # (B, 1)
    targets = Tensor(np.array([[t.reward] for t in minibatch]))
    return (pred - targets).square().mean()


# -- updates -----------------------------------------------------------------------


class PPOTrainer:
    """Holds the live parameter tensors and optimizer state across iterations."""

    def __init__(self, policy: PolicyParams, critic: CriticParams, cfg: PPOConfig):
        cfg.validate()
        self.cfg = cfg
        self.policy = policy.copy()
        self.critic = critic.copy()
        self.tensors = policy_tensors(self.policy)
        self.crit_tensors = critic_tensors(self.critic)
        self.actor_opt = AdamW(list(self.tensors.values()), lr=cfg.actor_lr, eps=cfg.adam_eps)
        self.critic_opt = AdamW(list(self.crit_tensors.values()), lr=cfg.critic_lr, eps=cfg.adam_eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to resume exactly: parameters plus Adam moments."""
        out = {}
        for prefix, params in (("policy", self.policy), ("critic", self.critic)):
            for k, v in params.arrays().items():
                out[f"{prefix}.{k}"] = v
        for prefix, opt, tensors in (
            ("actor_opt", self.actor_opt, self.tensors),
            ("critic_opt", self.critic_opt, self.crit_tensors),
        ):
            for name, m, v in zip(tensors.keys(), opt.m, opt.v):
                out[f"{prefix}.m.{name}"] = m
                out[f"{prefix}.v.{name}"] = v
            out[f"{prefix}.t"] = np.array([float(opt.t)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.state_arrays().items():
            if k.endswith(".t"):
                continue
            np.copyto(v, arrays[k])
        self.actor_opt.t = int(arrays["actor_opt.t"][0])
        self.critic_opt.t = int(arrays["critic_opt.t"][0])

    def update(self, buffer: RolloutBuffer, rng: np.random.Generator) -> dict:
        """Surrogate optimization: n_epoch passes of shuffled minibatches, one
        optimizer step per loss per minibatch; restores the pre-update
        parameters if a loss turns non-finite."""
        cfg = self.cfg
        trajs = buffer.trajectories
        backup_p = {k: v.copy() for k, v in self.policy.arrays().items()}
        backup_c = {k: v.copy() for k, v in self.critic.arrays().items()}
        p_losses, v_losses, n_steps = [], [], 0
        try:
            for _ in range(cfg.surrogate_epochs):
                order = rng.permutation(len(trajs))
                for i in range(0, len(order), cfg.minibatch_size):
                    mb = [trajs[j] for j in order[i : i + cfg.minibatch_size]]
                    loss, _ = policy_loss(self.tensors, mb, cfg)
                    if not np.isfinite(loss.data):
                        raise DivergenceError(n_steps, float(loss.data))
                    self.actor_opt.zero_grad()
                    loss.backward()
                    self.actor_opt.step()
                    p_losses.append(float(loss.data))
                    if not cfg.actor_only:
                        vloss = value_loss(self.crit_tensors, mb)
                        if not np.isfinite(vloss.data):
                            raise DivergenceError(n_steps, float(vloss.data))
                        self.critic_opt.zero_grad()
                        vloss.backward()
                        self.critic_opt.step()
                        v_losses.append(float(vloss.data))
                    n_steps += 1
        except DivergenceError:
            for k, v in self.policy.arrays().items():
                np.copyto(v, backup_p[k])
            for k, v in self.critic.arrays().items():
                np.copyto(v, backup_c[k])
            raise
        finally:
            buffer.clear()
        return {
            "policy_loss": float(np.mean(p_losses)) if p_losses else 0.0,
            "value_loss": float(np.mean(v_losses)) if v_losses else 0.0,
            "minibatch_steps": n_steps,
        }


def ppo_update(
    policy: PolicyParams,
    critic: CriticParams,
    buffer: RolloutBuffer,
    cfg: PPOConfig,
    rng: np.random.Generator | int = 0,
) -> tuple[PolicyParams, CriticParams, dict]:
    """One-shot surrogate phase over a full buffer (fresh optimizer state);
    training loops use PPOTrainer to keep optimizer state across iterations."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    trainer = PPOTrainer(policy, critic, cfg)
    stats = trainer.update(buffer, rng)
    return trainer.policy, trainer.critic, stats


# -- evaluation and the outer loop ---------------------------------------------------


def evaluate_policy(
    policy: PolicyParams,
    examples: list[CorpusExample],
    vocab: Vocab,
    reward_model,
    rng_seed,
    max_len: int = 256,
    best_of: int = 1,
    parser=parse_utterance,
) -> tuple[dict, list[dict]]:
    """Generate once per example (or best-of-N) and score. Returns aggregate
    means and the per-example records they are computed from."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    records = []
    prompts, inputs, kept = [], [], []
    skipped = 0
    for ex in examples:
        try:
            prompts.append(parser(ex.utterance.as_text()))
        except (AmbiguousConstraintError, InvalidPromptError):
            skipped += 1
            continue
        inputs.append(rl_input_ids(vocab, ex))
        kept.append(ex)

    if best_of == 1:
        samples = sample_batch(policy, inputs, rng, max_len)
    else:
        samples = []
        for s, ex, prompt in zip(inputs, kept, prompts):
            seed = int(rng.integers(2**31))
            samples.append(
                filtering.best_of_n(
                    policy, s, prompt, reward_model, best_of, seed, max_len, reference=ex.ref
                ).best
            )

    for ex, prompt, sm in zip(kept, prompts, samples):
        score = reward_model(prompt, sm.l_gen)
        records.append(
            {
                "kind": prompt.kind.value,
                "l_min": prompt.l_min,
                "l_max": prompt.l_max,
                "l_gen": sm.l_gen,
                "error": -score.value,
                "reward_norm": score.normalized,
                "relevance": relevance_proxy(ex.ref, sm.a),
            }
        )
    agg = {
        "val_error": float(np.mean([r["error"] for r in records])),
        "val_reward": float(np.mean([r["reward_norm"] for r in records])),
        "val_relevance": float(np.mean([r["relevance"] for r in records])),
        "skipped": skipped,
    }
    return agg, records


@dataclass
class RLCheckpoint:
    iteration: int
    policy: PolicyParams
    critic: CriticParams
    metrics: dict


def validation_row(
    trainer: PPOTrainer,
    iteration: int,
    corpus_val: list[CorpusExample],
    vocab: Vocab,
    reward_model,
    parser=parse_utterance,
    losses: dict | None = None,
) -> dict:
    """One metrics row: losses of the finished iteration plus validation
    means. Validation always samples from the same fixed seed, so metric
    differences between iterations reflect the policy, not fresh noise."""
    agg, _ = evaluate_policy(
        trainer.policy, corpus_val, vocab, reward_model,
        np.random.default_rng(trainer.cfg.seed + 7919),
        trainer.cfg.max_gen_len, parser=parser,
    )
    losses = losses or {"policy_loss": 0.0, "value_loss": 0.0}
    return {
        "iter": iteration,
        "policy_loss": losses["policy_loss"],
        "value_loss": losses["value_loss"],
        "val_reward": agg["val_reward"],
        "val_error": agg["val_error"],
        "val_relevance": agg["val_relevance"],
    }


def run_iteration(
    trainer: PPOTrainer,
    iteration: int,
    corpus_train: list[CorpusExample],
    corpus_val: list[CorpusExample],
    vocab: Vocab,
    reward_model,
    rng: np.random.Generator,
    parser=parse_utterance,
) -> dict:
    """One outer iteration: fill the rollout buffer from a freshly shuffled
    pass over the corpus, run the surrogate phase, validate."""
    cfg = trainer.cfg
    order = rng.permutation(len(corpus_train))
    idx = [int(order[i % len(corpus_train)]) for i in range(max(cfg.update_timestep, len(corpus_train)))]
    examples = [corpus_train[i] for i in idx]
    buffer = collect_rollouts(
        trainer.policy, None if cfg.actor_only else trainer.critic,
        reward_model, examples, cfg.update_timestep, vocab, rng, cfg, parser=parser,
    )
    stats = trainer.update(buffer, rng)
    return validation_row(trainer, iteration, corpus_val, vocab, reward_model, parser, stats)


def train_rl(
    policy0: PolicyParams,
    critic0: CriticParams,
    cfg: PPOConfig,
    corpus_train: list[CorpusExample],
    corpus_val: list[CorpusExample],
    vocab: Vocab,
    reward_model=None,
    parser=parse_utterance,
    metrics_sink=None,
    keep_checkpoints: bool = True,
) -> tuple[list[RLCheckpoint], list[dict]]:
    """The outer loop: collect rollouts, run the surrogate phase, validate.

    Returns every per-iteration checkpoint (iteration 0 is the unmodified
    input policy) and the metric rows; `metrics_sink` receives each row as it
    is produced.
    """
    cfg.validate()
    if reward_model is None:
        reward_model = lambda p, lg: rule_reward(p, lg, cfg.max_gen_len)
    rng = np.random.default_rng(cfg.seed)
    trainer = PPOTrainer(policy0, critic0, cfg)

    checkpoints: list[RLCheckpoint] = []
    metrics: list[dict] = []
    base_row = validation_row(trainer, 0, corpus_val, vocab, reward_model, parser)
    if metrics_sink is not None:
        metrics_sink(base_row)
    metrics.append(base_row)
    checkpoints.append(RLCheckpoint(0, trainer.policy.copy(), trainer.critic.copy(), base_row))

    for it in range(1, cfg.n_iterations + 1):
        row = run_iteration(trainer, it, corpus_train, corpus_val, vocab, reward_model, rng, parser)
        if metrics_sink is not None:
            metrics_sink(row)
        metrics.append(row)
        if keep_checkpoints:
            checkpoints.append(RLCheckpoint(it, trainer.policy.copy(), trainer.critic.copy(), row))
    if not keep_checkpoints:
        checkpoints.append(RLCheckpoint(cfg.n_iterations, trainer.policy.copy(), trainer.critic.copy(), metrics[-1]))
    return checkpoints, metrics
