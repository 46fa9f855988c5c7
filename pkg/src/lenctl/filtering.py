"""Best-of-N sample filtering: draw candidates, score them, keep the best.

Candidate i always uses derived seed ``seed + i``, so the candidate stream for
a given input is a fixed sequence and growing N can only improve (or tie) the
selected reward.
"""

from __future__ import annotations

from dataclasses import dataclass

from .lm import DEFAULT_MAX_GEN_LEN, GenerationSample, PolicyParams, relevance_proxy, sample_sequence
from .grammar import StandardControlPrompt
from .rewards import RewardScore


@dataclass
class CandidateSet:
    candidates: list[GenerationSample]
    rewards: list[RewardScore] | None = None
    selected: int | None = None

    @property
    def best(self) -> GenerationSample:
        if self.selected is None:
            raise ValueError("candidate set has not been ranked")
        return self.candidates[self.selected]


def generate_candidates(
    policy: PolicyParams,
    s,
    n: int,
    seed: int,
    max_len: int = DEFAULT_MAX_GEN_LEN,
    reference=None,
) -> CandidateSet:
    """N independent samples for one input; candidate i uses seed+i. When the
    reference is known the relevance proxy is filled in for tie-breaking."""
    if n < 1:
        raise ValueError("need n >= 1")
    cands = []
    for i in range(n):
        sample = sample_sequence(policy, s, seed + i, max_len)
        if reference is not None:
            sample.relevance = relevance_proxy(reference, sample.a)
        cands.append(sample)
    return CandidateSet(candidates=cands)


def rank_and_select(
    cands: CandidateSet, reward_model, prompt: StandardControlPrompt
) -> CandidateSet:
    """Score every candidate and select the highest reward; ties break toward
    higher relevance, then the lowest candidate index."""
    if not cands.candidates:
        raise ValueError("empty candidate set")
    rewards = [reward_model(prompt, c.l_gen) for c in cands.candidates]
    best = 0
    for i in range(1, len(rewards)):
        ri, rb = rewards[i].value, rewards[best].value
        if ri > rb:
            best = i
        elif ri == rb:
            rel_i = cands.candidates[i].relevance or 0.0
            rel_b = cands.candidates[best].relevance or 0.0
            if rel_i > rel_b:
                best = i
    return CandidateSet(candidates=cands.candidates, rewards=rewards, selected=best)


def best_of_n(
    policy: PolicyParams,
    s,
    prompt: StandardControlPrompt,
    reward_model,
    n: int,
    seed: int,
    max_len: int = DEFAULT_MAX_GEN_LEN,
    reference=None,
) -> CandidateSet:
    cands = generate_candidates(policy, s, n, seed, max_len, reference)
    return rank_and_select(cands, reward_model, prompt)
