"""Acceptance gate: one test per criterion, summarized at the end of the run.

Every criterion runs offline against mock backends.
"""

import itertools
import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from rubric_reward.errors import CacheConflict, ParseError
from rubric_reward.evaluation import DuelRecord, blind_rank, first_slot_is_a, parse_duel, total_score, win_rate
from rubric_reward.cli import derived_seed
from rubric_reward.gateway import Gateway, MockBackend
from rubric_reward.grpo import (
    GrpoConfig,
    RolloutGroup,
    Scenario,
    ToyPolicy,
    clipped_objective,
    group_advantages,
    grpo_loss,
    grpo_loss_grad,
    grpo_surrogate,
    train_sim,
)
from rubric_reward.judge import (
    PARSE_FAILURE,
    JudgeVerdict,
    aggregate_reward,
    judge_item,
    likert_reward,
    parse_likert_score,
    parse_verdict,
    rubric_reward,
)
from rubric_reward.prompts import RANK_LABELS
from rubric_reward.rouge import rouge_l_tokens
from rubric_reward.rubrics import RubricItem, RubricSet, parse_rubric_response
from rubric_reward.store import Store

from cli_env import CliEnv
from helpers import (
    GOLDEN_CAPTION,
    GOLDEN_CRITERION,
    GOLDEN_DESCRIPTION,
    GOLDEN_DUEL,
    GOLDEN_IMAGE,
    GOLDEN_RANK,
    GOLDEN_RULE,
    GOLDEN_STUDENT,
    GOLDEN_TEACHERS,
    fenced,
    item,
    keyword_judge,
    rubric_json,
    write_png,
)
from parser_corpus import CASES

GOLDEN = Path(__file__).parent / "golden"


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# 1 ------------------------------------------------------------------------


@pytest.mark.acceptance("AC-1", "reward formula oracle")
def test_ac1_reward_formula():
    rng = random.Random(1)
    with Timer() as t:
        for _ in range(1000):
            m = rng.randint(1, 12)
            w = [rng.choice([1.0, 2.0, 3.0]) for _ in range(m)]
            y = [rng.randint(0, 1) for _ in range(m)]
            rs = RubricSet("img", "s", [RubricItem(f"c{i}", "d", "r", wi) for i, wi in enumerate(w)], 5)
            vs = [JudgeVerdict(i, yi, "") for i, yi in enumerate(y)]
            g = aggregate_reward(vs, rs).reward
            direct = sum(wi * yi for wi, yi in zip(w, y)) / sum(w)
            assert abs(g - direct) <= 1e-12
            # weight-scale invariance
            c = rng.uniform(0.01, 100.0)
            assert abs(aggregate_reward(vs, [c * wi for wi in w]).reward - g) <= 1e-12
            # monotonicity: flipping any failed criterion to passed raises G
            for k in range(m):
                if y[k] == 0:
                    up = [JudgeVerdict(i, 1 if i == k else yi, "") for i, yi in enumerate(y)]
                    assert aggregate_reward(up, rs).reward > g
    assert t.elapsed < 5


# 2 ------------------------------------------------------------------------


def _hand_advantages(g, floor=1e-6):
    n = len(g)
    mean = sum(g) / n
    std = math.sqrt(sum((x - mean) ** 2 for x in g) / n)
    if std < floor:
        return [0.0] * n
    return [(x - mean) / std for x in g]


@pytest.mark.acceptance("AC-2", "advantage oracle")
def test_ac2_advantages():
    rng = random.Random(2)
    degenerate = 0
    with Timer() as t:
        for i in range(1000):
            n = rng.randint(2, 8)
            if i % 5 == 0:
                g = [rng.choice([0.0, 0.5, 1.0])] * n
            else:
                g = [rng.choice([0, 1, 2, 3, 4, 5, 6]) / 6 for _ in range(n)]
            a = group_advantages(g)
            expected = _hand_advantages(g)
            assert np.max(np.abs(a - expected)) <= 1e-9
            if np.std(g) < 1e-6:
                degenerate += 1
                assert (a == 0).all()
            else:
                assert abs(a.mean()) <= 1e-6
                assert abs(a.std() - 1.0) <= 1e-6
    assert degenerate >= 200
    assert t.elapsed < 5


# 3 ------------------------------------------------------------------------


def _random_config(rng):
    k = int(rng.integers(2, 7))
    cands = [f"cap{i}" for i in range(k)]
    theta = rng.normal(0, 1, k)
    theta_ref = theta + rng.normal(0, 0.3, k)
    n = int(rng.integers(2, 9))
    caps = [cands[int(j)] for j in rng.integers(0, k, n)]
    rewards = rng.choice([0.0, 1 / 6, 0.5, 2 / 3, 1.0], n).tolist()
    eps = float(rng.uniform(0.1, 0.3))
    return cands, theta, theta_ref, caps, rewards, eps


def _group(cands, theta, theta_ref, caps, rewards, std_floor=1e-6):
    pol = ToyPolicy(cands, theta)
    ref = ToyPolicy(cands, theta_ref)
    g = RolloutGroup("img", caps, [pol.log_prob("img", c) for c in caps], [ref.log_prob("img", c) for c in caps],
                     rewards).compute_advantages(std_floor)
    return g, pol


@pytest.mark.acceptance("AC-3", "GRPO gradient check")
def test_ac3_gradient_check():
    rng = np.random.default_rng(3)
    h = 1e-5
    checked = 0
    with Timer() as t:
        while checked < 100:
            cands, theta, theta_ref, caps, rewards, eps = _random_config(rng)
            g, pol = _group(cands, theta, theta_ref, caps, rewards)
            rhos = np.exp(np.subtract(g.policy_log_probs, g.reference_log_probs))
            # finite differences are meaningless across the clip kinks
            if np.min(np.abs(np.concatenate([rhos - (1 - eps), rhos - (1 + eps)]))) < 1e-3:
                continue
            analytic = grpo_loss_grad(g, pol, eps)
            numeric = np.zeros_like(theta)
            for j in range(len(theta)):
                e = np.zeros_like(theta)
                e[j] = h
                lp = grpo_loss(_group(cands, theta + e, theta_ref, caps, rewards)[0], eps)
                lm = grpo_loss(_group(cands, theta - e, theta_ref, caps, rewards)[0], eps)
                numeric[j] = (lp - lm) / (2 * h)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
            assert np.linalg.norm(analytic - numeric) / scale < 1e-5, (analytic, numeric)
            checked += 1
    assert t.elapsed < 30


# 4 ------------------------------------------------------------------------


@pytest.mark.acceptance("AC-4", "clipping semantics")
@pytest.mark.parametrize("rho,adv,expected", [
    (0.5, 1.0, 0.5), (1.0, 1.0, 1.0), (1.5, 1.0, 1.2),
    (0.5, -1.0, -0.8), (1.0, -1.0, -1.0), (1.5, -1.0, -1.5),
])
def test_ac4_clipping(rho, adv, expected):
    assert clipped_objective(rho, adv, 0.2) == expected
    assert grpo_surrogate(math.log(rho), 0.0, adv, 0.2) == pytest.approx(expected, abs=1e-15)


# 5 ------------------------------------------------------------------------

# Rubric weights total 10: the target caption passes everything, the rest
# reach at most 0.3.
CONV_RUBRIC = {
    "student_caption": "a cake",
    "committee_size": 5,
    "items": [RubricItem(c, "d", "r", w).to_dict() for c, w in
              [("cake", 3.0), ("carrot", 3.0), ("inscription", 2.0), ("knife", 1.0), ("wooden", 1.0)]],
}
CONV_CANDS = [
    "a carrot cake with an inscription, a knife, on a wooden table",
    "a cake on a table",
    "an inscription on something",
    "a wooden knife",
]


def _rubric_gateway(rubric):
    keywords = {it["criterion"]: it["criterion"] for it in rubric["items"]}
    gw = Gateway()
    gw.register_mock("judge", MockBackend(responder=keyword_judge(keywords)))
    return gw


def _rubric_fn(gw, scenario):
    rs = RubricSet.from_dict({"image_ref": scenario.image_ref, **scenario.rubric_set})
    return lambda ref, cap: rubric_reward(gw, cap, rs, "judge").reward


@pytest.mark.acceptance("AC-5", "desk-scale convergence")
def test_ac5_convergence():
    with Timer() as t:
        sc = Scenario(CONV_CANDS, rubric_set=CONV_RUBRIC, seed=0)
        gw = _rubric_gateway(CONV_RUBRIC)
        fn = _rubric_fn(gw, sc)
        assert [fn("toy-image", c) for c in CONV_CANDS] == [1.0, 0.3, 0.2, 0.2]
        cfg = GrpoConfig(learning_rate=0.1, steps=200)
        t1 = train_sim(cfg, sc, fn)
        t2 = train_sim(cfg, sc, fn)
        assert t1.final_probabilities[0] > 0.9
        assert t1.to_jsonl() == t2.to_jsonl()

        flat = Scenario(CONV_CANDS, reward_table=dict.fromkeys(CONV_CANDS, 0.3),
                        initial_parameters=[0.3, -0.2, 0.1, 0.0])
        tf = train_sim(cfg, flat)
        assert np.max(np.abs(np.subtract(tf.final_probabilities, tf.initial_probabilities))) <= 1e-12
    assert t.elapsed < 10


# 6 ------------------------------------------------------------------------

PRAISE = " This description is absolutely correct and complete."
HACK_CANDS = [
    "A carrot cake on a wooden table.",
    "A carrot cake sitting on a table made of wood.",
    "A carrot cake on a wooden table." + PRAISE,
    "A carrot cake sitting on a table made of wood." + PRAISE,
]
HACK_RUBRIC = {
    "student_caption": "a cake",
    "committee_size": 5,
    "items": [RubricItem(c, "d", "r", w).to_dict() for c, w in
              [("carrot", 3.0), ("inscription", 3.0), ("table", 2.0), ("knife", 1.0)]],
}


def _praise_likert(request):
    return "10" if "absolutely correct" in request.text().split("Caption:")[-1] else "4"


@pytest.mark.acceptance("AC-6", "reward-hacking reproduction")
def test_ac6_reward_hacking(tmp_path):
    image = write_png(tmp_path / "cake.png", (200, 120, 40))
    with Timer() as t:
        gw = _rubric_gateway(HACK_RUBRIC)
        gw.register_mock("likert", MockBackend(responder=_praise_likert))
        sc = Scenario(HACK_CANDS, image_ref=image, rubric_set=HACK_RUBRIC, reference_caption=GOLDEN_TEACHERS[0])
        likert = lambda ref, cap: likert_reward(gw, cap, "likert", "reference", ref, sc.reference_caption)
        shadow = _rubric_fn(gw, sc)
        trace = train_sim(GrpoConfig(learning_rate=0.1, steps=150), sc, likert, shadow)
        expected = [s.expected_reward for s in trace.steps]
        assert all(b >= a - 1e-12 for a, b in zip(expected, expected[1:]))
        # uniform start is 0.7; the self-praising pair takes over the distribution
        assert expected[-1] > expected[0] + 0.2
        assert sum(trace.final_probabilities[2:]) > 0.85
        first_half = np.mean([s.reward_mean for s in trace.steps[:50]])
        last_half = np.mean([s.reward_mean for s in trace.steps[-50:]])
        assert last_half > first_half
        shadow0 = trace.steps[0].shadow_expected_reward
        for s in trace.steps:
            assert abs(s.shadow_expected_reward - shadow0) <= 0.05
            assert abs(float(np.mean(s.shadow_rewards)) - shadow0) <= 0.05
    assert t.elapsed < 10


# 7 ------------------------------------------------------------------------


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(tok in it for tok in sub)


def _brute_lcs(a, b):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if _is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def _oracle_f1(a, b):
    lcs = _brute_lcs(a, b)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(a), lcs / len(b)
    return 2 * p * r / (p + r)


@pytest.mark.acceptance("AC-7", "ROUGE-L oracle")
def test_ac7_rouge_exhaustive():
    by_len = {n: list(itertools.product("abc", repeat=n)) for n in range(11)}
    pairs = 0
    with Timer() as t:
        for la in range(11):
            for lb in range(11 - la):
                for a in by_len[la]:
                    for b in by_len[lb]:
                        assert rouge_l_tokens(a, b) == _oracle_f1(a, b), (a, b)
                        pairs += 1
        for n in range(1, 11):
            for s in by_len[n]:
                assert rouge_l_tokens(s, s) == 1.0
    assert pairs == 930_022
    assert t.elapsed < 60


# 8 ------------------------------------------------------------------------


@pytest.mark.acceptance("AC-8", "prompt fidelity")
def test_ac8_prompt_fidelity(tmp_path):
    env = CliEnv(tmp_path / "ws")

    def run(*argv):
        code, out, _ = env.run(*argv, "--dry-run")
        assert code == 0
        return out

    golden = lambda name: (GOLDEN / name).read_text(encoding="utf-8")
    m = env.write_jsonl("m.jsonl", [{"image_ref": GOLDEN_IMAGE, "student_caption": GOLDEN_STUDENT,
                                     "teacher_captions": GOLDEN_TEACHERS}])
    assert run("synthesize", m) == golden("synthesize_dry_run.txt")  # Prompts 1 and 2

    rs = {"image_ref": GOLDEN_IMAGE, "student_caption": GOLDEN_STUDENT, "committee_size": 5,
          "items": [RubricItem(GOLDEN_CRITERION, GOLDEN_DESCRIPTION, GOLDEN_RULE, 3.0).to_dict()]}
    rubrics = env.write_jsonl("r.jsonl", [rs])
    caps = env.write_jsonl("c.jsonl", [{"image_ref": GOLDEN_IMAGE, "rollout_index": 0, "caption": GOLDEN_CAPTION}])
    refs = env.write_jsonl("refs.jsonl", [{"image_ref": GOLDEN_IMAGE, "reference": GOLDEN_TEACHERS[0]}])
    assert run("reward", caps, "--rubrics", rubrics) == golden("reward_rubric_dry_run.txt")
    assert run("reward", caps, "--reward-fn", "likert-direct") == golden("reward_likert_direct_dry_run.txt")
    assert run("reward", caps, "--reward-fn", "likert-reference", "--references", refs) == \
        golden("reward_likert_reference_dry_run.txt")
    duel = env.write_jsonl("d.jsonl", [{"image_ref": GOLDEN_IMAGE, "captions": GOLDEN_DUEL}])
    assert run("eval", "pairwise", duel) == golden("eval_pairwise_dry_run.txt")
    rank = env.write_jsonl("k.jsonl", [{"image_ref": GOLDEN_IMAGE, "captions": GOLDEN_RANK}])
    assert run("eval", "rank", rank) == golden("eval_rank_dry_run.txt")

    # anonymity: distinctive source tags and endpoint names never reach a prompt
    tags = {f"SRCTAG{i}_model": f"caption number {i} of a cake" for i in range(5)}
    corpus = env.write_jsonl("anon.jsonl", [{"image_ref": f"images/{j}.png", "captions": tags} for j in range(3)])
    for mode in ("pairwise", "rank"):
        out = run("eval", mode, corpus)
        assert out.count("=====") > 0
        assert "SRCTAG" not in out and "_model" not in out
    synth_out = run("synthesize", m)
    assert not any(f"teacher{k}" in synth_out for k in range(1, 6))


# 9 ------------------------------------------------------------------------


def _parse(kind, text):
    if kind == "rubric":
        return parse_rubric_response(text)
    if kind == "verdict":
        return parse_verdict(text, 0).score
    if kind == "likert":
        return parse_likert_score(text)
    return parse_duel(text)[0]


@pytest.mark.acceptance("AC-9", "parser robustness")
def test_ac9_parser_corpus():
    assert len(CASES) == 30
    for case_id, kind, text, expected in CASES:
        if isinstance(expected, type) and issubclass(expected, Exception):
            with pytest.raises(expected) as ei:
                _parse(kind, text)
            if isinstance(ei.value, ParseError) and kind in ("rubric", "verdict", "duel"):
                assert ei.value.raw == text, case_id
            continue
        got = _parse(kind, text)
        if kind == "rubric":
            if isinstance(expected, tuple):
                field, value = expected
                assert getattr(got[0], field) == value, case_id
            else:
                assert len(got) == expected, case_id
        else:
            assert got == expected, case_id

    # a judge that never produces a valid verdict always yields 0
    bad_verdicts = [text for _, kind, text, exp in CASES
                    if kind == "verdict" and isinstance(exp, type)]
    for text in bad_verdicts:
        gw = Gateway()
        gw.register_mock("judge", MockBackend(responder=lambda r, text=text: text))
        v = judge_item(gw, 0, RubricItem("c", "d", "r", 2.0), "caption", "judge")
        assert (v.score, v.reasoning) == (0, PARSE_FAILURE)


# 10 -----------------------------------------------------------------------


@pytest.mark.acceptance("AC-10", "evaluation arithmetic")
def test_ac10_evaluation_arithmetic(tmp_path):
    assert abs(total_score(8, 7, 9, 2) - 5.0) <= 1e-9
    rng = random.Random(10)
    fixtures = [(8, 7, 9, 2)] + [tuple(rng.randint(0, 10) for _ in range(4)) for _ in range(500)]
    for a, c, cl, h in fixtures:
        assert abs(total_score(a, c, cl, h) - ((a + c + cl) / 3 - h * 1.5)) <= 1e-9

    # end to end: the judge's own totals are wrong and get replaced
    image = write_png(tmp_path / "i.png")
    scores = fixtures[:5]
    body = {"assessments": {lb: {"accuracy": a, "completeness": c, "clarity": cl, "hallucination_penalty": h,
                                 "total_score": 42.0} for lb, (a, c, cl, h) in zip(RANK_LABELS, scores)}}
    gw = Gateway()
    gw.register_mock("e", MockBackend(responder=lambda r: fenced(body)))
    rec = blind_rank(gw, image, [(f"cap {i}", f"s{i}") for i in range(5)], "e", seed=4)
    for e, (a, c, cl, h) in zip(rec.entries, scores):
        assert abs(e.total_score - ((a + c + cl) / 3 - h * 1.5)) <= 1e-9
    assert rec.entry("Caption A").total_score == pytest.approx(5.0, abs=1e-9)

    for _ in range(500):
        recs = []
        for _ in range(rng.randint(1, 40)):
            left, right = ("subj", "opp") if rng.random() < 0.5 else ("opp", "subj")
            recs.append(DuelRecord("i", "x", "y", left, right, rng.choice(["A", "B", "Tie"]), "", 0))
        assert abs(win_rate(recs, "subj") + win_rate(recs, "opp") - 1.0) <= 1e-12

    direct = sum(first_slot_is_a(s) for s in range(10_000)) / 10_000
    derived = sum(first_slot_is_a(derived_seed(0, f"img{s}", "base", "ours")) for s in range(10_000)) / 10_000
    assert 0.49 <= direct <= 0.51
    assert 0.49 <= derived <= 0.51


# 11 -----------------------------------------------------------------------


@pytest.mark.acceptance("AC-11", "pipeline idempotence")
def test_ac11_idempotence(tmp_path):
    env = CliEnv(tmp_path / "ws")
    rows = []
    for i in range(3):
        ref = write_png(tmp_path / f"img{i}.png", (i * 80, 10, 10))
        teachers = [f"image {i}: caption from teacher {k}" for k in range(1, 6)]
        env.add_teachers(ref, teachers)
        env.add_writer(ref, f"student {i}", teachers, rubric_json([
            item(f"keep-a-{i}", 3.0, refs=["Model 1", "Model 2", "Model 3"]),
            item(f"minority-{i}", 3.0, refs=["Model 2", "Model 4"]),
            item(f"keep-b-{i}", 2.0, refs=["Model 1", "Model 2", "Model 3", "Model 4", "Model 5"]),
            item(f"met-{i}", 2.0, refs=["Model 1", "Model 2", "Model 3", "Model 4"], met="True"),
            item(f"keep-c-{i}", 1.0, refs=["Model 3", "Model 4", "Model 5"]),
        ]))
        rows.append({"image_ref": ref, "student_caption": f"student {i}"})
    manifest = env.write_jsonl("m.jsonl", rows)

    code1, out1, _ = env.run("synthesize", manifest, "--out", env.path("r1.jsonl"))
    code2, out2, _ = env.run("synthesize", manifest, "--out", env.path("r2.jsonl"))
    s1, s2 = json.loads(out1), json.loads(out2)
    assert code1 == code2 == 0
    assert s1["model_calls"] == 3 * 6
    assert s2["model_calls"] == 0
    r1 = Path(env.path("r1.jsonl")).read_bytes()
    assert r1 == Path(env.path("r2.jsonl")).read_bytes()

    kept = [[it["criterion"] for it in json.loads(line)["items"]] for line in r1.decode().splitlines()]
    assert kept == [[f"keep-a-{i}", f"keep-b-{i}", f"keep-c-{i}"] for i in range(3)]
    assert s1["drops_by_reason"] == {"AlreadyMet": 3, "InsufficientConsensus": 3}
    assert len(list(env.cfg.open_store().scan_records("rubric_set"))) == 3


# 12 -----------------------------------------------------------------------


@pytest.mark.acceptance("AC-12", "store crash-consistency")
def test_ac12_store_crash_consistency(tmp_path):
    s = Store(tmp_path / "store")
    for i in range(100):
        s.append("trace", {"step": i, "loss": 0.1 * i, "reward_mean": 0.5, "reward_std": 0.0,
                           "advantages": [0.0, 0.0], "grad_norm": 0.0, "learning_rate": 0.1})
    path = s.record_path("trace")
    data = path.read_bytes()
    bounds = [0] + [i + 1 for i, b in enumerate(data) if b == ord("\n")]
    assert len(bounds) == 101
    for k, cut in enumerate(bounds):
        path.write_bytes(data[:cut])
        assert [e.payload["step"] for e in s.scan_records("trace")] == list(range(k))
        if k < 100:
            # torn inside the next record: still exactly the complete prefix
            path.write_bytes(data[:cut + (bounds[k + 1] - cut) // 2])
            assert [e.payload["step"] for e in s.scan_records("trace")] == list(range(k))

    s.cache_put("d" * 64, "first answer", "judge")
    s.cache_put("d" * 64, "first answer", "judge")
    with pytest.raises(CacheConflict):
        s.cache_put("d" * 64, "a different answer", "judge")
    assert Store(tmp_path / "store").cache_get("d" * 64) == "first answer"
