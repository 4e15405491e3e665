"""Rubric-based rewards for dense image captioning.

Stage one turns a teacher committee's captions into per-image binary rubrics;
stage two judges rollouts against them and feeds the weighted reward into
group-relative policy optimization.
"""

from .estimators import GroupAdvantageTransformer, RougeLScorer, RubricRewardScorer, ToyGRPO
from .evaluation import DuelRecord, RankRecord, blind_rank, pairwise_duel, rank_distribution, win_rate
from .gateway import ChatExchange, ChatRequest, EndpointConfig, Gateway, ImagePart, MockBackend, TextPart
from .grpo import (
    GrpoConfig,
    RolloutGroup,
    Scenario,
    ToyPolicy,
    clipped_objective,
    group_advantages,
    grpo_loss,
    grpo_loss_grad,
    grpo_step,
    grpo_surrogate,
    toy_policy,
    train_sim,
)
from .judge import JudgeVerdict, RewardResult, aggregate_reward, judge_caption, likert_reward, parse_verdict
from .rouge import rouge_l_reward
from .rubrics import (
    RubricItem,
    RubricSet,
    SynthesisConfig,
    TeacherCaption,
    build_rubric_prompt,
    collect_teacher_captions,
    filter_rubric_set,
    parse_rubric_response,
    synthesize,
)
from .store import RecordEnvelope, Store

__version__ = "0.1.0"
