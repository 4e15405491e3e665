import numpy as np
import pytest

from rubric_reward.estimators import GroupAdvantageTransformer, RougeLScorer, RubricRewardScorer, ToyGRPO
from rubric_reward.gateway import MockBackend
from rubric_reward.rubrics import RubricItem, RubricSet

from helpers import keyword_judge


def test_rubric_scorer(gateway):
    gateway.register_mock("judge", MockBackend(responder=keyword_judge({"cake": "cake", "knife": "knife"})))
    rs = RubricSet("img", "s", [RubricItem("cake", "d", "r", 3.0), RubricItem("knife", "d", "r", 1.0)], 5)
    est = RubricRewardScorer(gateway, "judge").fit([rs])
    out = est.predict([("img", "a cake"), ("img", "a cake and a knife")])
    assert out.tolist() == [0.75, 1.0]
    assert est.get_params()["judge_endpoint"] == "judge"


def test_rouge_scorer():
    est = RougeLScorer().fit([("i", "the cat sat")])
    assert est.predict([("i", "the cat sat")]).tolist() == [1.0]


def test_advantage_transformer():
    X = np.array([[1.0, 0.0], [0.5, 0.5]])
    out = GroupAdvantageTransformer().fit_transform(X)
    assert out.tolist() == [[1.0, -1.0], [0.0, 0.0]]


def test_toy_grpo():
    est = ToyGRPO(steps=200, random_state=0).fit(["best", "ok", "meh", "bad"], [1.0, 0.3, 1 / 6, 0.0])
    assert est.predict().tolist() == ["best"]
    assert est.predict_proba()[0, 0] > 0.9
    assert len(est.trace_.steps) == 200
