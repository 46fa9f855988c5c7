"""lenctl: prompt-based length-controlled generation with reinforcement learning.

A numpy library plus a small CLI. The pieces: a length-constraint grammar and
exact utterance parser, a trainable constraint extractor, rule-based and
trained length rewards, a desk-scale recurrent policy with exact gradients,
a modified PPO for reinforcement fine-tuning, and best-of-N sample filtering.
"""

from .grammar import (
    BOUNDED_KINDS,
    LENGTH_MAX,
    LENGTH_MIN,
    AmbiguousConstraintError,
    AugmentedUtterance,
    ControlKind,
    InvalidPromptError,
    PromptTemplate,
    StandardControlPrompt,
    default_templates,
    expand_template,
    parse_standard_prompt,
    parse_utterance,
    render_standard_prompt,
    sample_control_prompt,
)
from .rewards import (
    RewardRegressorParams,
    RewardScore,
    control_error,
    predict_reward,
    rule_reward,
    simulate_reward_dataset,
    train_reward_regressor,
)
from .lm import (
    CorpusExample,
    CriticParams,
    GenerationSample,
    PolicyParams,
    SftConfig,
    Vocab,
    critic_value,
    relevance_proxy,
    sample_sequence,
    sequence_log_prob,
    sft_train,
    step_distribution,
    synth_corpus,
)
from .extractor import (
    ExtractorConfig,
    ExtractorParams,
    ExtractorPrediction,
    encode_utterance,
    matching_rate,
    predict,
    train_extractor,
)
from .ppo import (
    PPOConfig,
    PPOTrainer,
    RolloutBuffer,
    Trajectory,
    advantage,
    clip_surrogate,
    collect_rollouts,
    entropy_term,
    evaluate_policy,
    kl_penalty,
    policy_loss,
    ppo_update,
    ratio,
    train_rl,
    value_loss,
)
from .filtering import CandidateSet, best_of_n, generate_candidates, rank_and_select
from .config import ExperimentConfig, load_config
from .harness import select_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
