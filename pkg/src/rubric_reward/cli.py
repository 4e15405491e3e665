"""Command-line entry point.

Exit codes: 0 success (individual items may still have failed and are listed
in the summary), 1 every item failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable

from . import evaluation, judge, prompts
from .config import RunConfig, load_run_config
from .errors import ConfigError, MissingRubricSet, RubricRewardError, SampleSkipped
from .gateway import ChatRequest, Gateway, ImagePart, TextPart
from .grpo import Scenario, train_sim
from .rouge import rouge_l_reward
from .rubrics import RubricSet, RubricSynthesizer, TeacherCaption, endpoint_captioner

log = logging.getLogger("rubric_reward")

REWARD_FNS = ("rubric", "rouge-l", "likert-direct", "likert-reference")


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise UsageError(f"{path}:{lineno}: {e}") from None
    return out


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def render_request(label: str, req: ChatRequest) -> str:
    out = [f"===== {label} ====="]
    if req.system_prompt:
        out += ["--- system ---", req.system_prompt]
    out.append("--- user ---")
    for p in req.user_parts:
        out.append(f"[image: {p.ref}]" if isinstance(p, ImagePart) else p.text)
    return "\n".join(out) + "\n"


def derived_seed(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:4], "big") & 0x7FFFFFFF


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _error_entry(key: dict, e: Exception) -> dict:
    return {**key, "error": type(e).__name__, "message": str(e).splitlines()[0] if str(e) else ""}


def load_rubric_sets(path: str | Path) -> dict[str, RubricSet]:
    return {d["image_ref"]: RubricSet.from_dict(d) for d in read_jsonl(path)}


def load_references(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    return {d["image_ref"]: d["reference"] for d in read_jsonl(path)}


# -- synthesize ------------------------------------------------------------


def _manifest(path: str) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        rows.append(json.loads(line) if line.startswith("{") else {"image_ref": line})
    return rows


def cmd_synthesize(args, cfg: RunConfig, gateway: Gateway, store) -> int:
    rows = _manifest(args.manifest)
    synth = RubricSynthesizer(gateway, cfg.committee, replace(cfg.synthesis_config(), seed=args.seed), store)
    student_ep = endpoint_captioner(gateway, cfg.student, seed=args.seed) if cfg.student else None

    if args.dry_run:
        for row in rows:
            ref = row["image_ref"]
            student = row.get("student_caption")
            if student is None and cfg.student:
                req = _student_request(cfg, ref, args.seed)
                student = gateway.cached(req)
                if student is None:
                    sys.stdout.write(render_request(f"student caption {ref}", req))
                    student = "<student caption: not cached>"
            if row.get("teacher_captions") is not None:
                teachers = synth.teachers(ref, row["teacher_captions"])
            else:
                teachers = []
                for k, name in enumerate(cfg.committee, start=1):
                    req = _teacher_request(synth, name, ref)
                    text = gateway.cached(req)
                    if text is None:
                        sys.stdout.write(render_request(f"teacher {k} {ref}", req))
                        text = f"<caption from teacher {k}: not cached>"
                    teachers.append(TeacherCaption(k, f"Model {k}", text.strip()))
            req = synth.writer_request(ref, student or "", teachers)
            sys.stdout.write(render_request(f"rubric writer {ref}", req))
        return 0

    def one(row):
        ref = row["image_ref"]
        source = row.get("student_caption")
        if source is None:
            if student_ep is None:
                raise ConfigError("no student_caption in manifest and no student endpoint configured")
            source = student_ep
        return synth.run(ref, source, row.get("teacher_captions"))

    with ThreadPoolExecutor(max_workers=max(1, args.parallel)) as pool:
        futures = [pool.submit(one, row) for row in rows]
        results = []
        for row, fut in zip(rows, futures):
            try:
                results.append((row, fut.result(), None))
            except RubricRewardError as e:
                results.append((row, None, e))

    lines, failed, skipped = [], [], []
    by_weight = {"1.0": 0, "2.0": 0, "3.0": 0}
    drops: dict[str, int] = {}
    for row, res, err in results:
        if err is not None:
            entry = _error_entry({"image_ref": row["image_ref"]}, err)
            (skipped if isinstance(err, SampleSkipped) else failed).append(entry)
            if isinstance(err, SampleSkipped):
                for d in getattr(err.cause, "report", []):
                    drops[d.reason] = drops.get(d.reason, 0) + 1
            continue
        lines.append(res.rubric_set.to_dict())
        for it in res.rubric_set.items:
            by_weight[f"{it.weight:.1f}"] += 1
        for d in res.drops:
            drops[d.reason] = drops.get(d.reason, 0) + 1
    write_jsonl(args.out, lines)
    summary = {
        "images": len(rows),
        "succeeded": len(lines),
        "skipped": len(skipped),
        "failed": len(failed),
        "items": sum(by_weight.values()),
        "items_by_weight": by_weight,
        "drops_by_reason": dict(sorted(drops.items())),
        "failures": failed,
        "skipped_samples": skipped,
        "model_calls": gateway.model_calls,
    }
    emit(summary)
    return 1 if rows and not lines and failed else 0


def _teacher_request(synth: RubricSynthesizer, name: str, ref: str) -> ChatRequest:
    cfg = synth.config
    return ChatRequest(endpoint=name, system_prompt=cfg.caption_system_prompt,
                       user_parts=(ImagePart(ref), TextPart(cfg.caption_prompt)),
                       temperature=cfg.teacher_temperature, max_tokens=cfg.teacher_max_tokens, seed=cfg.seed)


def _student_request(cfg: RunConfig, ref: str, seed) -> ChatRequest:
    return ChatRequest(endpoint=cfg.student, system_prompt=prompts.CAPTION_SYSTEM_PROMPT,
                       user_parts=(ImagePart(ref), TextPart(prompts.CAPTION_USER_PROMPT)),
                       temperature=0.7, max_tokens=1024, seed=seed)


# -- reward ----------------------------------------------------------------


def _likert_endpoint(cfg: RunConfig) -> str:
    return cfg.likert_judge or cfg.judge


def cmd_reward(args, cfg: RunConfig, gateway: Gateway, store) -> int:
    fn = args.reward_fn
    captions = read_jsonl(args.captions)
    rubrics = load_rubric_sets(args.rubrics) if args.rubrics else {}
    refs = load_references(args.references)
    if fn == "rubric" and not args.rubrics:
        raise UsageError("--reward-fn rubric needs --rubrics")
    if fn in ("rouge-l", "likert-reference") and not args.references:
        raise UsageError(f"--reward-fn {fn} needs --references")

    if args.dry_run:
        for row in captions:
            ref, idx, cap = row["image_ref"], row.get("rollout_index", 0), row["caption"]
            if fn == "rubric":
                rs = rubrics.get(ref)
                if rs is None:
                    continue
                for m, item in enumerate(rs.items):
                    req = judge.judge_request(item, cap, cfg.judge, args.seed)
                    sys.stdout.write(render_request(f"judge {ref} rollout {idx} criterion {m}", req))
            elif fn.startswith("likert"):
                mode = fn.split("-", 1)[1]
                req = judge.likert_request(cap, _likert_endpoint(cfg), mode, ref, refs.get(ref), args.seed)
                sys.stdout.write(render_request(f"{fn} {ref} rollout {idx}", req))
        return 0

    def one(row):
        ref, idx, cap = row["image_ref"], row.get("rollout_index", 0), row["caption"]
        if fn == "rubric":
            rs = rubrics.get(ref)
            if rs is None:
                raise MissingRubricSet(f"no rubric set for {ref}")
            res = judge.rubric_reward(gateway, cap, rs, cfg.judge, args.seed)
            if store is not None:
                judge.persist_verdicts(store, ref, idx, res.verdicts)
            return {"image_ref": ref, "rollout_index": idx, "reward": res.reward,
                    "verdicts": [v.to_dict() for v in res.verdicts]}
        if fn == "rouge-l":
            if ref not in refs:
                raise judge.MissingReference(f"no reference caption for {ref}")
            return {"image_ref": ref, "rollout_index": idx, "reward": rouge_l_reward(cap, refs[ref])}
        mode = fn.split("-", 1)[1]
        r = judge.likert_reward(gateway, cap, _likert_endpoint(cfg), mode, ref, refs.get(ref), args.seed)
        return {"image_ref": ref, "rollout_index": idx, "reward": r}

    with ThreadPoolExecutor(max_workers=max(1, args.parallel)) as pool:
        futures = [pool.submit(one, row) for row in captions]
        out, errors = [], 0
        for row, fut in zip(captions, futures):
            try:
                out.append(fut.result())
            except RubricRewardError as e:
                errors += 1
                out.append(_error_entry({"image_ref": row["image_ref"],
                                         "rollout_index": row.get("rollout_index", 0)}, e))
    write_jsonl(args.out, out)
    emit({"captions": len(captions), "scored": len(captions) - errors, "failed": errors,
          "model_calls": gateway.model_calls})
    return 1 if captions and errors == len(captions) else 0


# -- train-sim -------------------------------------------------------------


def _reward_fn_for(fn: str, scenario: Scenario, cfg: RunConfig, gateway: Gateway, seed):
    if fn == "rubric":
        if scenario.rubric_set is None:
            if scenario.reward_table is None:
                raise UsageError("scenario has neither rubric_set nor reward_table")
            return scenario.table_reward
        rs = RubricSet.from_dict({"image_ref": scenario.image_ref, **scenario.rubric_set})
        return lambda ref, cap: judge.rubric_reward(gateway, cap, rs, cfg.judge, seed).reward
    if fn == "rouge-l":
        if scenario.reference_caption is None:
            raise UsageError("rouge-l reward needs reference_caption in the scenario")
        return lambda ref, cap: rouge_l_reward(cap, scenario.reference_caption)
    mode = fn.split("-", 1)[1]
    if mode == "reference" and scenario.reference_caption is None:
        raise UsageError("likert-reference reward needs reference_caption in the scenario")
    return lambda ref, cap: judge.likert_reward(gateway, cap, _likert_endpoint(cfg), mode, ref,
                                                scenario.reference_caption, seed)


def cmd_train_sim(args, cfg: RunConfig, gateway: Gateway, store) -> int:
    scenario = Scenario.from_file(args.scenario)
    grpo = cfg.grpo
    overrides = {k: v for k, v in (("steps", args.steps), ("learning_rate", args.lr),
                                   ("group_size", args.group_size)) if v is not None}
    if overrides:
        grpo = replace(grpo, **overrides)
    fn = args.reward_fn
    reward_fn = _reward_fn_for(fn, scenario, cfg, gateway, args.seed)
    shadow_fn = None
    if fn != "rubric" and scenario.rubric_set is not None and not args.no_shadow:
        shadow_fn = _reward_fn_for("rubric", scenario, cfg, gateway, args.seed)

    if args.dry_run:
        if scenario.rubric_set is not None and (fn == "rubric" or shadow_fn):
            rs = RubricSet.from_dict({"image_ref": scenario.image_ref, **scenario.rubric_set})
            for c in scenario.candidates:
                for m, item in enumerate(rs.items):
                    req = judge.judge_request(item, c, cfg.judge, args.seed)
                    sys.stdout.write(render_request(f"judge candidate {scenario.candidates.index(c)} criterion {m}", req))
        if fn.startswith("likert"):
            for i, c in enumerate(scenario.candidates):
                req = judge.likert_request(c, _likert_endpoint(cfg), fn.split("-", 1)[1], scenario.image_ref,
                                           scenario.reference_caption, args.seed)
                sys.stdout.write(render_request(f"{fn} candidate {i}", req))
        return 0

    trace = train_sim(grpo, scenario, reward_fn, shadow_fn)
    Path(args.out).write_text(trace.to_jsonl(), encoding="utf-8")
    if store is not None:
        for s in trace.steps:
            store.append("trace", s.to_dict())
    steps = trace.steps
    summary = {
        "steps": len(steps),
        "candidates": trace.candidates,
        "initial_distribution": trace.initial_probabilities,
        "final_distribution": trace.final_probabilities,
        "model_calls": gateway.model_calls,
    }
    if steps:
        summary["reward_mean_first"] = steps[0].reward_mean
        summary["reward_mean_last"] = steps[-1].reward_mean
        summary["expected_reward_first"] = steps[0].expected_reward
        summary["expected_reward_last"] = steps[-1].expected_reward
        if shadow_fn:
            summary["shadow_expected_reward_first"] = steps[0].shadow_expected_reward
            summary["shadow_expected_reward_last"] = steps[-1].shadow_expected_reward
    emit(summary)
    return 0


# -- eval ------------------------------------------------------------------


def _corpus(path: str) -> list[tuple[str, dict[str, str]]]:
    out = []
    for row in read_jsonl(path):
        ref = row["image_ref"]
        caps = row["captions"] if isinstance(row.get("captions"), dict) else \
            {k: v for k, v in row.items() if k != "image_ref"}
        out.append((ref, caps))
    return out


def cmd_eval(args, cfg: RunConfig, gateway: Gateway, store) -> int:
    corpus = _corpus(args.corpus)
    sources = sorted({s for _, caps in corpus for s in caps})
    jobs = []
    if args.mode == "pairwise":
        if len(sources) < 2:
            raise UsageError("pairwise evaluation needs at least 2 caption sources")
        for ref, caps in corpus:
            for a, b in evaluation.pairings(sorted(caps)):
                jobs.append((ref, a, b, caps, derived_seed(args.seed, ref, a, b)))
    else:
        if len(sources) != 5 or any(len(caps) != 5 for _, caps in corpus):
            raise UsageError("rank evaluation needs exactly 5 caption sources per image")
        for ref, caps in corpus:
            jobs.append((ref, None, None, caps, derived_seed(args.seed, ref)))

    if args.dry_run:
        for ref, a, b, caps, seed in jobs:
            if args.mode == "pairwise":
                first_a = evaluation.first_slot_is_a(seed)
                ca, cb = (caps[a], caps[b]) if first_a else (caps[b], caps[a])
                req = evaluation.duel_request(ref, ca, cb, cfg.evaluator)
                sys.stdout.write(render_request(f"duel {ref}", req))
            else:
                ordered = [caps[s] for s in sorted(caps)]
                perm = evaluation.shuffle_labels(5, seed)
                labeled = [(prompts.RANK_LABELS[i], ordered[perm[i]]) for i in range(5)]
                req = evaluation.rank_request(ref, labeled, cfg.evaluator)
                sys.stdout.write(render_request(f"rank {ref}", req))
        return 0

    def one(job):
        ref, a, b, caps, seed = job
        if args.mode == "pairwise":
            return evaluation.pairwise_duel(gateway, ref, (caps[a], a), (caps[b], b), cfg.evaluator, seed)
        ordered = [(caps[s], s) for s in sorted(caps)]
        return evaluation.blind_rank(gateway, ref, ordered, cfg.evaluator, seed)

    with ThreadPoolExecutor(max_workers=max(1, args.parallel)) as pool:
        futures = [pool.submit(one, job) for job in jobs]
        records, failures = [], []
        for job, fut in zip(jobs, futures):
            try:
                records.append(fut.result())
            except RubricRewardError as e:
                failures.append(_error_entry({"image_ref": job[0]}, e))
    kind = "duel" if args.mode == "pairwise" else "rank"
    write_jsonl(args.out, [r.to_dict() for r in records])
    if store is not None:
        for r in records:
            store.append(kind, r.to_dict())
    if args.mode == "pairwise":
        summary = {"duels": len(records), "win_rates": evaluation.duel_summary(records)}
        table = evaluation.render_duel_table(summary["win_rates"])
    else:
        dist = evaluation.rank_distribution(records) if records else {}
        summary = {"rankings": len(records), "sources": dist}
        table = evaluation.render_rank_table(dist)
    summary["failures"] = failures
    summary["model_calls"] = gateway.model_calls
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.table:
        sys.stdout.write(table + "\n")
    else:
        emit(summary)
    return 1 if jobs and not records else 0


# -- cache -----------------------------------------------------------------


def cmd_cache_stats(args, cfg, gateway, store) -> int:
    emit(store.cache_stats())
    return 0


# -- parser ----------------------------------------------------------------


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="run configuration TOML")
    parser.add_argument("--store", default=d(None), help="store root (overrides config)")
    parser.add_argument("--seed", type=int, default=d(None), help="global seed (overrides config)")
    parser.add_argument("--parallel", type=int, default=d(4), help="max items in flight")
    parser.add_argument("--dry-run", action="store_true", default=d(False),
                        help="print assembled prompts, make no model calls")
    parser.add_argument("--reward-fn", choices=REWARD_FNS, default=d("rubric"))
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rubric-reward", description=__doc__.splitlines()[0])
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="build rubric sets for a manifest of images")
    _common(s, suppress=True)
    s.add_argument("manifest")
    s.add_argument("--out", default="rubrics.jsonl")
    s.set_defaults(func=cmd_synthesize)

    r = sub.add_parser("reward", help="score captions")
    _common(r, suppress=True)
    r.add_argument("captions")
    r.add_argument("--rubrics")
    r.add_argument("--references")
    r.add_argument("--out", default="rewards.jsonl")
    r.set_defaults(func=cmd_reward)

    t = sub.add_parser("train-sim", help="desk-scale GRPO run on a toy policy")
    _common(t, suppress=True)
    t.add_argument("scenario")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--group-size", type=int)
    t.add_argument("--no-shadow", action="store_true", help="skip the shadow rubric reward")
    t.add_argument("--out", default="trace.jsonl")
    t.set_defaults(func=cmd_train_sim)

    e = sub.add_parser("eval", help="pairwise duels or blind ranking")
    esub = e.add_subparsers(dest="mode", required=True)
    for mode in ("pairwise", "rank"):
        m = esub.add_parser(mode)
        _common(m, suppress=True)
        m.add_argument("corpus")
        m.add_argument("--out", default=f"{mode}.jsonl")
        m.add_argument("--summary")
        m.add_argument("--table", action="store_true", help="print a plain-text table")
        m.set_defaults(func=cmd_eval)

    c = sub.add_parser("cache", help="cache inspection")
    csub = c.add_subparsers(dest="cache_cmd", required=True)
    st = csub.add_parser("stats")
    _common(st, suppress=True)
    st.set_defaults(func=cmd_cache_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.config is None:
            raise UsageError("--config is required")
        cfg = load_run_config(args.config)
        if args.store is not None:
            cfg.store = args.store
        if args.seed is None:
            args.seed = cfg.seed
        prompts.verify_templates()
        store = cfg.open_store()
        gateway = cfg.gateway(store)
        return args.func(args, cfg, gateway, store)
    except (UsageError, ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RubricRewardError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
