"""scikit-learn style wrappers so rewards and training compose with pipelines.

Inputs for the reward scorers are sequences of ``(image_ref, caption)``
pairs; outputs are 1-d float arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import MissingReference, MissingRubricSet
from .grpo import GrpoConfig, Scenario, group_advantages, train_sim
from .judge import rubric_reward
from .rouge import rouge_l_reward
from .rubrics import RubricSet


def _check_pairs(X) -> list[tuple[str, str]]:
    pairs = [tuple(x) for x in X]
    for p in pairs:
        if len(p) != 2 or not all(isinstance(s, str) for s in p):
            raise ValueError("expected (image_ref, caption) string pairs")
    return pairs


class RubricRewardScorer(BaseEstimator):
    """Rubric-judged reward for captions of images with known rubric sets."""

    def __init__(self, gateway=None, judge_endpoint: str = "judge", seed: int | None = None):
        self.gateway = gateway
        self.judge_endpoint = judge_endpoint
        self.seed = seed

    def fit(self, rubric_sets: Sequence[RubricSet], y=None):
        self.rubric_sets_ = {rs.image_ref: rs for rs in rubric_sets}
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "rubric_sets_")
        out = []
        for image_ref, caption in _check_pairs(X):
            rs = self.rubric_sets_.get(image_ref)
            if rs is None:
                raise MissingRubricSet(image_ref)
            out.append(rubric_reward(self.gateway, caption, rs, self.judge_endpoint, self.seed).reward)
        return np.asarray(out, dtype=float)


class RougeLScorer(BaseEstimator):
    """ROUGE-L F1 against a per-image reference caption."""

    def fit(self, X, y=None):
        # X: (image_ref, reference_caption) pairs
        self.references_ = dict(_check_pairs(X))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "references_")
        out = []
        for image_ref, caption in _check_pairs(X):
            if image_ref not in self.references_:
                raise MissingReference(image_ref)
            out.append(rouge_l_reward(caption, self.references_[image_ref]))
        return np.asarray(out, dtype=float)


class GroupAdvantageTransformer(TransformerMixin, BaseEstimator):
    """Row-wise group standardization of a (groups, N) reward matrix."""

    def __init__(self, std_floor: float = 1e-6):
        self.std_floor = std_floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected groups of {self.n_features_in_}, got {X.shape[1]}")
        return np.vstack([group_advantages(row, self.std_floor) for row in X])


class ToyGRPO(BaseEstimator):
    """Fits a softmax policy over candidate captions to a reward table with GRPO.

    ``fit(X, y)`` takes candidate captions and their rewards.
    """

    def __init__(self, group_size: int = 4, clip_epsilon: float = 0.2, learning_rate: float = 0.1,
                 warmup_ratio: float = 0.01, steps: int = 200, std_floor: float = 1e-6, random_state: int = 0):
        self.group_size = group_size
        self.clip_epsilon = clip_epsilon
        self.learning_rate = learning_rate
        self.warmup_ratio = warmup_ratio
        self.steps = steps
        self.std_floor = std_floor
        self.random_state = random_state

    def fit(self, X, y):
        candidates = [str(c) for c in X]
        y = check_array(np.asarray(y, dtype=float).reshape(-1, 1), dtype=float).ravel()
        if len(candidates) != len(y):
            raise ValueError("X and y have different lengths")
        config = GrpoConfig(group_size=self.group_size, clip_epsilon=self.clip_epsilon,
                            std_floor=self.std_floor, learning_rate=self.learning_rate,
                            warmup_ratio=self.warmup_ratio, steps=self.steps)
        scenario = Scenario(candidates=candidates, reward_table=dict(zip(candidates, y.tolist())),
                            seed=self.random_state)
        self.trace_ = train_sim(config, scenario)
        self.classes_ = np.asarray(candidates, dtype=object)
        self.probabilities_ = np.asarray(self.trace_.final_probabilities)
        return self

    def predict_proba(self, X=None) -> np.ndarray:
        check_is_fitted(self, "probabilities_")
        n = 1 if X is None else len(X)
        return np.tile(self.probabilities_, (n, 1))

    def predict(self, X=None) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
