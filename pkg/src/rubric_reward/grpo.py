"""Group-relative policy optimization over whole-caption actions.

The math here is policy-agnostic; :class:`ToyPolicy` (a softmax over a fixed
caption list) makes the full reward -> advantage -> loss -> update chain
runnable and checkable without a neural model.
"""

from __future__ import annotations

import abc
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import GroupTooSmall, NonFiniteRatio, UnknownCaption


@dataclass
class GrpoConfig:
    group_size: int = 4
    clip_epsilon: float = 0.2
    std_floor: float = 1e-6
    learning_rate: float = 1e-5
    warmup_ratio: float = 0.01
    max_completion_tokens: int = 1024
    steps: int = 100

    def __post_init__(self):
        if self.group_size < 2:
            raise GroupTooSmall(f"group_size must be >= 2, got {self.group_size}")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be > 0")
        if self.std_floor < 0:
            raise ValueError("std_floor must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must be in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup then cosine decay to zero (the usual HF-style schedule)."""
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return base_lr * step / max(1, warmup)
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- advantages and loss ---------------------------------------------------


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-6) -> np.ndarray:
    """Standardize rewards within the group (population std).

    Groups whose std falls below ``std_floor`` get all-zero advantages.
    """
    g = np.asarray(rewards, dtype=float)
    if g.ndim != 1 or g.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards per group, got {g.size}")
    std = g.std()
    if std < std_floor or std == 0:
        return np.zeros_like(g)
    return (g - g.mean()) / std


def _ratio(log_prob_policy: float, log_prob_reference: float) -> float:
    if not (math.isfinite(log_prob_policy) and math.isfinite(log_prob_reference)):
        raise NonFiniteRatio("log-probabilities must be finite")
    try:
        rho = math.exp(log_prob_policy - log_prob_reference)
    except OverflowError:
        raise NonFiniteRatio("importance ratio overflowed") from None
    if not math.isfinite(rho):
        raise NonFiniteRatio("importance ratio overflowed")
    return rho


def clipped_objective(rho: float, advantage: float, eps: float) -> float:
    """min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)"""
    clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
    return min(rho * advantage, clipped * advantage)


def grpo_surrogate(log_prob_policy: float, log_prob_reference: float, advantage: float, eps: float) -> float:
    return clipped_objective(_ratio(log_prob_policy, log_prob_reference), advantage, eps)


def _surrogate_slope(rho: float, advantage: float, eps: float) -> float:
    """d(surrogate)/d(rho); zero where the clipped branch is the active one."""
    clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
    if rho * advantage <= clipped * advantage:
        return advantage
    return 0.0


@dataclass
class RolloutGroup:
    image_ref: str
    captions: list[str]
    policy_log_probs: list[float]
    reference_log_probs: list[float]
    rewards: list[float]
    advantages: list[float] | None = None

    def __post_init__(self):
        n = len(self.captions)
        if n < 2:
            raise GroupTooSmall(f"a rollout group needs at least 2 rollouts, got {n}")
        lengths = {len(self.policy_log_probs), len(self.reference_log_probs), len(self.rewards)}
        if self.advantages is not None:
            lengths.add(len(self.advantages))
        if lengths != {n}:
            raise ValueError("rollout group lists must all have length N")

    @property
    def size(self) -> int:
        return len(self.captions)

    def compute_advantages(self, std_floor: float = 1e-6) -> "RolloutGroup":
        self.advantages = group_advantages(self.rewards, std_floor).tolist()
        return self


def grpo_loss(group: RolloutGroup, eps: float) -> float:
    if group.advantages is None:
        raise ValueError("advantages not computed for this group")
    total = math.fsum(
        grpo_surrogate(lp, lr, a, eps)
        for lp, lr, a in zip(group.policy_log_probs, group.reference_log_probs, group.advantages)
    )
    return -total / group.size


def grpo_loss_grad(group: RolloutGroup, policy: "Policy", eps: float) -> np.ndarray:
    """Analytic gradient of :func:`grpo_loss` w.r.t. ``policy.parameters()``.

    Uses d rho / d theta = rho * grad log pi; the reference log-probs are constants.
    """
    if group.advantages is None:
        raise ValueError("advantages not computed for this group")
    grad = np.zeros_like(policy.parameters(), dtype=float)
    for cap, lp, lr, a in zip(group.captions, group.policy_log_probs, group.reference_log_probs, group.advantages):
        rho = _ratio(lp, lr)
        slope = _surrogate_slope(rho, a, eps)
        if slope:
            grad -= slope * rho * policy.grad_log_prob(group.image_ref, cap)
    return grad / group.size


# -- policies --------------------------------------------------------------


class Policy(abc.ABC):
    """What the trainer needs from a captioning policy."""

    @abc.abstractmethod
    def sample(self, image_ref: str, count: int) -> list[str]: ...

    @abc.abstractmethod
    def log_prob(self, image_ref: str, caption: str) -> float: ...

    @abc.abstractmethod
    def grad_log_prob(self, image_ref: str, caption: str) -> np.ndarray: ...

    @abc.abstractmethod
    def parameters(self) -> np.ndarray: ...

    @abc.abstractmethod
    def apply_gradient(self, gradient: np.ndarray, learning_rate: float) -> None: ...

    @abc.abstractmethod
    def snapshot(self) -> "Policy": ...


class ToyPolicy(Policy):
    """Categorical policy over a fixed list of candidate captions."""

    def __init__(self, candidates: Sequence[str], parameters: Sequence[float] | None = None,
                 seed: int | None = 0, frozen: bool = False):
        if len(candidates) < 2:
            raise ValueError("toy policy needs at least 2 candidates")
        if len(set(candidates)) != len(candidates):
            raise ValueError("candidate captions must be distinct")
        self.candidates = list(candidates)
        self._index = {c: i for i, c in enumerate(self.candidates)}
        theta = np.zeros(len(candidates)) if parameters is None else np.array(parameters, dtype=float)
        if theta.shape != (len(candidates),):
            raise ValueError("need one parameter per candidate")
        self._theta = theta
        self._frozen = frozen
        if frozen:
            self._theta.setflags(write=False)
        self.rng = np.random.default_rng(seed)

    def index(self, caption: str) -> int:
        try:
            return self._index[caption]
        except KeyError:
            raise UnknownCaption(caption[:80]) from None

    def log_probs(self) -> np.ndarray:
        return self._theta - logsumexp(self._theta)

    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def sample(self, image_ref: str, count: int) -> list[str]:
        idx = self.rng.choice(len(self.candidates), size=count, p=self.probabilities())
        return [self.candidates[i] for i in idx]

    def log_prob(self, image_ref: str, caption: str) -> float:
        return float(self.log_probs()[self.index(caption)])

    def grad_log_prob(self, image_ref: str, caption: str) -> np.ndarray:
        g = -self.probabilities()
        g[self.index(caption)] += 1.0
        return g

    def parameters(self) -> np.ndarray:
        return self._theta.copy()

    def set_parameters(self, theta: Sequence[float]) -> None:
        if self._frozen:
            raise RuntimeError("snapshot policies are immutable")
        self._theta = np.array(theta, dtype=float)

    def apply_gradient(self, gradient: np.ndarray, learning_rate: float) -> None:
        if self._frozen:
            raise RuntimeError("snapshot policies are immutable")
        self._theta = self._theta - learning_rate * np.asarray(gradient, dtype=float)

    def snapshot(self) -> "ToyPolicy":
        return ToyPolicy(self.candidates, self._theta.copy(), seed=None, frozen=True)


def toy_policy(candidate_captions: Sequence[str], parameters: Sequence[float] | None = None,
               seed: int | None = 0) -> ToyPolicy:
    return ToyPolicy(candidate_captions, parameters, seed)


# -- training --------------------------------------------------------------

RewardFn = Callable[[str, str], float]  # (image_ref, caption) -> reward


def _reward_value(r) -> float:
    return float(getattr(r, "reward", r))


@dataclass
class StepReport:
    step: int
    loss: float
    captions: list[str]
    rewards: list[float]
    advantages: list[float]
    grad_norm: float
    learning_rate: float
    probabilities: list[float] | None = None
    expected_reward: float | None = None
    shadow_rewards: list[float] | None = None
    shadow_expected_reward: float | None = None

    @property
    def reward_mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def reward_std(self) -> float:
        return float(np.std(self.rewards))

    def to_dict(self) -> dict:
        d = {
            "step": self.step,
            "loss": self.loss,
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
            "advantages": self.advantages,
            "grad_norm": self.grad_norm,
            "learning_rate": self.learning_rate,
            "rewards": self.rewards,
            "captions": self.captions,
        }
        if self.probabilities is not None:
            d["probabilities"] = self.probabilities
        if self.expected_reward is not None:
            d["expected_reward"] = self.expected_reward
        if self.shadow_rewards is not None:
            d["shadow_reward_mean"] = float(np.mean(self.shadow_rewards))
            d["shadow_rewards"] = self.shadow_rewards
        if self.shadow_expected_reward is not None:
            d["shadow_expected_reward"] = self.shadow_expected_reward
        return d


def grpo_step(policy: Policy, reward_fn: RewardFn, image_ref: str, config: GrpoConfig,
              learning_rate: float | None = None, step: int = 0,
              shadow_fn: RewardFn | None = None) -> StepReport:
    """One on-policy update: snapshot, sample N, score, standardize, descend."""
    n = config.group_size
    if n < 2:
        raise GroupTooSmall(f"group_size must be >= 2, got {n}")
    lr = config.learning_rate if learning_rate is None else learning_rate
    reference = policy.snapshot()
    captions = policy.sample(image_ref, n)
    rewards = [_reward_value(reward_fn(image_ref, c)) for c in captions]
    group = RolloutGroup(
        image_ref=image_ref,
        captions=captions,
        policy_log_probs=[policy.log_prob(image_ref, c) for c in captions],
        reference_log_probs=[reference.log_prob(image_ref, c) for c in captions],
        rewards=rewards,
    ).compute_advantages(config.std_floor)
    loss = grpo_loss(group, config.clip_epsilon)
    grad = grpo_loss_grad(group, policy, config.clip_epsilon)
    policy.apply_gradient(grad, lr)
    shadow = [_reward_value(shadow_fn(image_ref, c)) for c in captions] if shadow_fn else None
    return StepReport(step, loss, captions, rewards, list(group.advantages),
                      float(np.linalg.norm(grad)), lr, shadow_rewards=shadow)


@dataclass
class Scenario:
    """Candidate captions for one image plus where their rewards come from."""

    candidates: list[str]
    image_ref: str = "toy-image"
    reward_table: dict[str, float] | None = None
    rubric_set: dict | None = None
    reference_caption: str | None = None
    initial_parameters: list[float] | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys {sorted(unknown)}")
        sc = cls(**d)
        if sc.reward_table is not None:
            missing = [c for c in sc.candidates if c not in sc.reward_table]
            if missing:
                raise ValueError(f"reward_table lacks {len(missing)} candidate(s)")
        return sc

    @classmethod
    def from_file(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def table_reward(self, image_ref: str, caption: str) -> float:
        return float(self.reward_table[caption])


@dataclass
class TrainTrace:
    steps: list[StepReport] = field(default_factory=list)
    initial_probabilities: list[float] = field(default_factory=list)
    final_probabilities: list[float] = field(default_factory=list)
    candidates: list[str] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    @property
    def reward_means(self) -> list[float]:
        return [s.reward_mean for s in self.steps]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in self.steps)


def _expected(policy: ToyPolicy, fn: RewardFn, image_ref: str) -> float:
    p = policy.probabilities()
    return float(sum(pk * _reward_value(fn(image_ref, c)) for pk, c in zip(p, policy.candidates)))


def train_sim(config: GrpoConfig, scenario: Scenario, reward_fn: RewardFn | None = None,
              shadow_fn: RewardFn | None = None, policy: ToyPolicy | None = None,
              on_step: Callable[[StepReport], None] | None = None) -> TrainTrace:
    """Run ``config.steps`` GRPO steps on the scenario's toy policy.

    The trace is a pure function of (config, scenario, reward functions).
    Each step also records the exact expected reward under the pre-update
    distribution, which is what convergence checks should look at.
    """
    if reward_fn is None:
        if scenario.reward_table is None:
            raise ValueError("scenario has no reward table; pass reward_fn")
        reward_fn = scenario.table_reward
    if policy is None:
        policy = ToyPolicy(scenario.candidates, scenario.initial_parameters, seed=scenario.seed)
    trace = TrainTrace(candidates=list(policy.candidates),
                       initial_probabilities=policy.probabilities().tolist())
    for t in range(config.steps):
        lr = cosine_lr(t, config.steps, config.learning_rate, config.warmup_ratio)
        probs = policy.probabilities().tolist()
        expected = _expected(policy, reward_fn, scenario.image_ref)
        shadow_expected = _expected(policy, shadow_fn, scenario.image_ref) if shadow_fn else None
        report = grpo_step(policy, reward_fn, scenario.image_ref, config, lr, step=t, shadow_fn=shadow_fn)
        report.probabilities = probs
        report.expected_reward = expected
        report.shadow_expected_reward = shadow_expected
        trace.steps.append(report)
        if on_step is not None:
            on_step(report)
    trace.final_probabilities = policy.probabilities().tolist()
    return trace
