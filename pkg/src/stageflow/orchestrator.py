"""End-to-end pipeline: task prompt -> retrieval -> curriculum generation ->
per-stage file generation -> validation -> staged training with feedback ->
scoring -> store.

Every run owns an append-only directory: ``workflow.yaml``,
``stageN/{reward,config,randomize}.yaml``, ``stageN/metrics.jsonl``,
``stageN/checkpoint.bin``, ``scores.json``, and ``agent_log.jsonl`` recording
each agent exchange (prompt/response digests plus findings).
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import agents, schema, scoring
from .agents import (GeneratedFileBlock, invoke_with_retry, load_template,
                     parse_file_blocks, parse_selector_json, render,
                     request_digest)
from .env import DeskWalker
from .errors import AgentError, StageflowError
from .randomize import desk_scene, sample
from .schema import PromotionCriterion, StageBundle, parse_bundle, validate
from .trainer import (Policy, RunningNorm, StageResult, load_checkpoint,
                      restore_policy, train_stage)
from .vdb import RunArtifact, VectorStore

_DATA = Path(__file__).parent / "data"
_STAGE_FILE_NAMES = ("reward.yaml", "config.yaml", "randomize.yaml")


@dataclass
class FeedbackDecision:
    action: str  # proceed_unchanged | proceed_with_revised_files | terminate
    rationale: str = ""
    revised_blocks: list = field(default_factory=list)


@dataclass
class CurriculumRun:
    run_id: str
    task_prompt: str
    run_dir: str
    retrieved: dict = field(default_factory=dict)   # selector output
    bundle: object = None
    stage_results: list = field(default_factory=list)
    scores: object = None                           # ScoreTriple
    status: str = "failed"
    failure_stage: str = ""
    failure_reason: str = ""


class AgentLog:
    """Append-only jsonl of every agent exchange in a run."""

    def __init__(self, path):
        self.path = Path(path)

    def record(self, role: str, prompt: str, response: str, findings=()):
        entry = {
            "role": role,
            "prompt_digest": request_digest(role, prompt),
            "response_digest": hashlib.sha256(response.encode()).hexdigest(),
            "findings": list(findings),
        }
        with open(self.path, "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def _logged_invoke(log: AgentLog, transport, role, prompt, parse_fn,
                   validate_fn=None, max_retries: int = 2):
    calls_before = len(getattr(transport, "calls", []))
    try:
        parsed, attempts = invoke_with_retry(
            transport, role, prompt, parse_fn, validate_fn, max_retries)
    except AgentError:
        for role_, sent in getattr(transport, "calls", [])[calls_before:]:
            log.record(role_, sent, "", ["RETRIES_EXHAUSTED"])
        raise
    for attempt in attempts:
        log.record(role, prompt, attempt.response, attempt.findings)
    return parsed


# -- promotion ----------------------------------------------------------------

def promote(result: StageResult, criterion: PromotionCriterion) -> bool:
    """Decide stage advancement from the stage's evaluation records."""
    by_budget = result.budget_exhausted
    last = result.last_eval.get("eval/episode_reward", float("-inf"))
    by_reward = last >= criterion.reward_threshold
    if criterion.mode == "timesteps_exhausted":
        return by_budget
    if criterion.mode == "reward_threshold":
        return by_reward
    return by_budget or by_reward  # either


# -- seed examples for cold start ---------------------------------------------

def seed_examples() -> dict:
    """Built-in baseline files handed to the curriculum agent when the store
    is empty; generated prompts still see realistic example content."""
    root = _DATA / "bundles" / "desk"
    return {
        "workflow": (root / "workflow.yaml").read_text(),
        "reward": (root / "rewards" / "generated_reward_stage1.yaml").read_text(),
        "config": (root / "configs" / "generated_config_stage1.yaml").read_text(),
        "randomize": (root / "randomize" / "generated_randomize_stage1.yaml").read_text(),
    }


def _examples_from_artifact(artifact: RunArtifact, selection: dict) -> dict:
    base = seed_examples()
    for key, fname in selection.items():
        role = ("workflow" if key == "workflow"
                else re.match(r"([a-z]+)_stage", key).group(1))
        for rel, text in artifact.files.items():
            if Path(rel).name == fname or rel == fname:
                if role == "workflow" or f"stage1" in key or key.endswith("_stage1"):
                    base[role] = text
                break
    return base


# -- generated-file handling ---------------------------------------------------

def _classify_blocks(blocks) -> dict:
    roles = {}
    for b in blocks:
        for role in ("reward", "config", "randomize"):
            if role in b.file_name:
                roles[role] = b
                break
    return roles


def _stage_findings(blocks, stage_entry: dict) -> list:
    """Validate one stage's three generated files in isolation by wrapping
    them in a single-stage workflow; returns finding strings."""
    import tempfile

    roles = _classify_blocks(blocks)
    missing = [r for r in ("reward", "config", "randomize") if r not in roles]
    if missing:
        return [f"missing generated file for: {', '.join(missing)}"]
    with tempfile.TemporaryDirectory() as td:
        tmp = Path(td)
        for role in ("reward", "config", "randomize"):
            (tmp / roles[role].file_name).write_text(roles[role].content)
        # wrapped as a first stage, so resume stays off regardless of the
        # real entry; the full-bundle validation covers resume placement
        wf = {"workflow": {"name": "stage-check", "stages": [{
            "index": 1,
            "reward": roles["reward"].file_name,
            "config": roles["config"].file_name,
            "randomize": roles["randomize"].file_name,
            "resume_from_checkpoint": False,
        }]}}
        (tmp / "workflow.yaml").write_text(yaml.safe_dump(wf))
        try:
            report = validate(parse_bundle(tmp / "workflow.yaml"))
        except StageflowError as e:
            return [f"[{e.code}] {e.message}"]
        return [f"[{f.code}] {f.path}: {f.message}" for f in report.errors]


def _apply_overrides(config_doc: dict, overrides: dict) -> dict:
    """Dotted-path overrides, e.g. {"trainer.num_timesteps": 4000}."""
    import copy

    doc = copy.deepcopy(config_doc)
    for dotted, value in (overrides or {}).items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return doc


def _write_stage_files(run_dir: Path, index: int, blocks) -> None:
    roles = _classify_blocks(blocks)
    stage_dir = run_dir / f"stage{index}"
    stage_dir.mkdir(parents=True, exist_ok=True)
    for role in ("reward", "config", "randomize"):
        text = roles[role].content
        if role == "config":
            # point the config at the canonical stage layout
            text = re.sub(r"(randomize_config_path:\s*).*",
                          r'\g<1>"randomize.yaml"', text, count=1)
            text = re.sub(r"(reward_config_path:\s*).*",
                          r'\g<1>"reward.yaml"', text, count=1)
        (stage_dir / f"{role}.yaml").write_text(text)


def _write_workflow(run_dir: Path, wf_doc: dict) -> None:
    """Canonical run-root workflow pointing at the stageN/ file layout."""
    stages = []
    for i, entry in enumerate(wf_doc["workflow"]["stages"], start=1):
        idx = int(entry.get("index", i))
        stages.append({
            "index": idx,
            "reward": f"stage{idx}/reward.yaml",
            "config": f"stage{idx}/config.yaml",
            "randomize": f"stage{idx}/randomize.yaml",
            "resume_from_checkpoint": bool(entry.get("resume_from_checkpoint", idx > 1)),
            "feedback": bool(entry.get("feedback", True)),
            "promotion": entry.get("promotion") or {"mode": "timesteps_exhausted"},
        })
    out = {"workflow": {
        "name": wf_doc["workflow"].get("name", "generated-curriculum"),
        "task": wf_doc["workflow"].get("task", ""),
        "stages": stages,
    }}
    (run_dir / "workflow.yaml").write_text(yaml.safe_dump(out, sort_keys=False))


# -- feedback ------------------------------------------------------------------

_DECISION_RE = re.compile(r"^DECISION:\s*(proceed|revise|terminate)\s*$", re.MULTILINE)
_RATIONALE_RE = re.compile(r"^RATIONALE:\s*(.*)$", re.MULTILINE)

_ACTIONS = {
    "proceed": "proceed_unchanged",
    "revise": "proceed_with_revised_files",
    "terminate": "terminate",
}


def parse_feedback(response: str) -> FeedbackDecision:
    m = _DECISION_RE.search(response)
    if not m:
        raise AgentError("MALFORMED_BLOCK",
                         "feedback must contain a 'DECISION: proceed | revise | terminate' line")
    word = m.group(1)
    rm = _RATIONALE_RE.search(response)
    rationale = rm.group(1).strip() if rm else ""
    blocks = []
    if word == "revise":
        blocks = parse_file_blocks(response)
    return FeedbackDecision(_ACTIONS[word], rationale, blocks)


def _metrics_text(result: StageResult, limit: int = 6) -> str:
    lines = [json.dumps(rec, sort_keys=True) for rec in result.metrics[-limit:]]
    return "\n".join(lines)


# -- final scoring -------------------------------------------------------------

def policy_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    policy = Policy(ckpt.policy_sizes[1:-1], ckpt.value_sizes[1:-1],
                    seed=0, obs_dim=ckpt.obs_dim, act_dim=ckpt.act_dim)
    obs_norm = RunningNorm(ckpt.obs_dim)
    restore_policy(ckpt, policy, obs_norm)
    return policy, obs_norm


def final_scores(checkpoint_path, stage: StageBundle, seed: int = 7,
                 episodes: int = 8, horizon: int = 150) -> scoring.ScoreTriple:
    """Deployment-style evaluation of the final policy: deterministic rollout
    per episode, scored with the survival / tracking / air-time formulas."""
    policy, obs_norm = policy_from_checkpoint(checkpoint_path)
    env_cfg = stage.config_doc.get("environment", {})
    rules = stage.randomize_doc.get("randomization") or {}
    eps = []
    for e in range(episodes):
        scene = sample(rules, desk_scene(), seed=seed + 100 * e)
        env = DeskWalker(env_cfg, scene=scene, seed=seed + 100 * e)
        obs = env.reset()
        cmd, loc, air, swing, cnorm = [], [], [], [], []
        survived = horizon
        for t in range(horizon):
            act = policy.act_deterministic(obs_norm.normalize(obs))
            bindings, done = env.step(act)
            c = np.asarray(bindings["command"].tolist())
            v = np.asarray(bindings["local_vel"].tolist())
            at = np.asarray(bindings["feet_air_time"].tolist())
            contact = np.asarray(bindings["foot_contact"].tolist())
            i = int(np.argmax(at))
            cmd.append(c[:2]); loc.append(v[:2])
            air.append(at[i]); swing.append(1.0 - contact[i])
            cnorm.append(float(bindings["command_norm"].tolist()))
            if done:
                survived = t + 1
                break
            obs = env.observe()
        eps.append(scoring.Episode(
            survived=survived,
            command_vel=np.array(cmd), local_vel=np.array(loc),
            air_time=np.array(air), swing=np.array(swing),
            command_norm=np.array(cnorm),
        ))
    return scoring.score_triple(scoring.EvalBatch(episodes=eps, horizon=horizon))


# -- stage loop ----------------------------------------------------------------

def run_stage_loop(bundle, transport, run_dir, log: AgentLog, seed: int = 7,
                   paper_scale: bool = False,
                   stage_descriptions: dict | None = None):
    """Train stages in index order with the feedback agent between them.

    Returns (results, status) where status is completed, terminated_by_feedback,
    or failed(stage, reason) encoded as the triple elsewhere.
    """
    run_dir = Path(run_dir)
    results = []
    checkpoint = None
    stages = bundle.stages
    for pos, stage in enumerate(stages):
        result = train_stage(
            stage, run_dir / f"stage{stage.index}",
            checkpoint_in=checkpoint if stage.resume_from_checkpoint else None,
            seed=seed, paper_scale=paper_scale)
        results.append(result)
        checkpoint = result.checkpoint_path
        if not promote(result, stage.promotion):
            return results, ("failed", f"stage{stage.index}",
                             "promotion criterion not met")
        if pos + 1 >= len(stages) or not stage.feedback:
            continue
        nxt = stages[pos + 1]
        decision = _feedback_step(
            transport, log, stage, nxt, result, run_dir,
            (stage_descriptions or {}).get(nxt.index, ""))
        if decision.action == "terminate":
            return results, ("terminated_by_feedback", "", decision.rationale)
        if decision.action == "proceed_with_revised_files":
            _apply_revision(run_dir, nxt, decision.revised_blocks)
            # reload so the next stage trains with the revised files
            bundle = parse_bundle(run_dir / "workflow.yaml")
            stages = bundle.stages
    return results, ("completed", "", "")


def _feedback_step(transport, log, stage, next_stage, result, run_dir,
                   next_description: str) -> FeedbackDecision:
    template = load_template("feedback")
    context = (
        f"\nPrevious stage reward file:\n{stage.reward_text}\n"
        f"Previous stage config file:\n{stage.config_text}\n"
        f"Recent training metrics (jsonl):\n{_metrics_text(result)}\n\n"
        f"Next stage description:\n{next_description or '(none provided)'}\n\n"
        f"Next stage reward file:\n{next_stage.reward_text}\n"
        f"Next stage config file:\n{next_stage.config_text}\n"
        f"Next stage randomize file:\n{next_stage.randomize_text}\n"
    )
    prompt = render(template, {"current_stage": stage.index}) + context

    def check(decision: FeedbackDecision):
        if decision.action != "proceed_with_revised_files":
            return []
        merged = _merged_stage_blocks(next_stage, decision.revised_blocks)
        return _stage_findings(merged, {
            "resume_from_checkpoint": next_stage.resume_from_checkpoint})

    return _logged_invoke(log, transport, "feedback", prompt,
                          parse_feedback, check)


def _merged_stage_blocks(next_stage: StageBundle, revised) -> list:
    texts = {"reward": next_stage.reward_text,
             "config": next_stage.config_text,
             "randomize": next_stage.randomize_text}
    for role, b in _classify_blocks(revised).items():
        texts[role] = b.content
    return [GeneratedFileBlock(f"{role}.yaml", f"{role}.yaml", text)
            for role, text in texts.items()]


def _apply_revision(run_dir: Path, next_stage: StageBundle, revised) -> None:
    """Feedback may only touch the next stage's three files."""
    stage_dir = Path(run_dir) / f"stage{next_stage.index}"
    for role, block in _classify_blocks(revised).items():
        text = block.content
        if role == "config":
            text = re.sub(r"(randomize_config_path:\s*).*",
                          r'\g<1>"randomize.yaml"', text, count=1)
            text = re.sub(r"(reward_config_path:\s*).*",
                          r'\g<1>"reward.yaml"', text, count=1)
        (stage_dir / f"{role}.yaml").write_text(text)


# -- the pipeline --------------------------------------------------------------

def _next_run_id(vdb: VectorStore) -> str:
    return f"run-{len(vdb) + 1:04d}"


def run_pipeline(task_prompt: str, vdb: VectorStore, transport, out_dir,
                 run_id: str | None = None, seed: int = 7,
                 paper_scale: bool = False,
                 config_overrides: dict | None = None) -> CurriculumRun:
    run_id = run_id or _next_run_id(vdb)
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    log = AgentLog(run_dir / "agent_log.jsonl")
    run = CurriculumRun(run_id=run_id, task_prompt=task_prompt,
                        run_dir=str(run_dir))
    phase = "generation"
    try:
        examples, evaluation = _retrieve(task_prompt, vdb, transport, log, run)
        wf_doc, descriptions = _generate_curriculum(
            task_prompt, examples, evaluation, transport, log)
        _generate_stages(task_prompt, wf_doc, descriptions, examples,
                         transport, log, run_dir, config_overrides)
        phase = "validation"
        bundle = parse_bundle(run_dir / "workflow.yaml")
        report = validate(bundle)
        if not report.ok:
            raise AgentError(
                "RETRIES_EXHAUSTED",
                "generated bundle failed validation: "
                + "; ".join(f"[{f.code}] {f.message}" for f in report.errors))
        run.bundle = bundle
        phase = "training"
        results, (status, fail_stage, reason) = run_stage_loop(
            bundle, transport, run_dir, log, seed=seed,
            paper_scale=paper_scale, stage_descriptions=descriptions)
        run.stage_results = results
        if status == "failed":
            run.status, run.failure_stage, run.failure_reason = status, fail_stage, reason
            return run
        phase = "scoring"
        final_stage = bundle.stages[len(results) - 1]
        run.scores = final_scores(results[-1].checkpoint_path, final_stage,
                                  seed=seed)
        (run_dir / "scores.json").write_text(run.scores.to_json())
        phase = "store"
        _store_run(run, vdb, run_dir, evaluation)
        run.status = status
        run.failure_reason = reason if status == "terminated_by_feedback" else ""
        return run
    except StageflowError as e:
        run.status = "failed"
        run.failure_stage = phase
        run.failure_reason = f"[{e.code}] {e.message}"
        return run


def _retrieve(task_prompt, vdb, transport, log, run) -> tuple[dict, str]:
    """RAG step; bypassed on an empty store (cold start) in favor of the
    built-in seed examples."""
    if len(vdb) == 0:
        return seed_examples(), "(no prior runs available)"
    q_prompt = render(load_template("vdb_query"),
                      {"INSERT_TASK_PROMPT_HERE": task_prompt})
    q_response = transport.send("vdb_query", q_prompt)
    log.record("vdb_query", q_prompt, q_response)
    query = q_response.strip().splitlines()[-1].strip()
    top = vdb.query_topk(query, k=min(3, len(vdb)))
    artifacts = [vdb.get_run(rid) for rid, _ in top]
    evaluations = "\n---\n".join(
        f"run {a.run_id} (scores {json.dumps(a.scores, sort_keys=True)}):\n"
        f"{a.evaluation or '(no evaluation text)'}"
        for a in artifacts)
    candidates = sorted({Path(rel).name
                         for a in artifacts for rel in a.files})
    sel_prompt = render(load_template("selector"), {
        "INSERT_TASK_PROMPT_HERE": task_prompt,
        "INSERT_EVALUATIONS_HERE": evaluations,
        "INSERT_EXAMPLES_HERE": "\n".join(candidates),
    })
    selection = _logged_invoke(
        log, transport, "selector", sel_prompt,
        lambda resp: parse_selector_json(resp, candidates))
    run.retrieved = selection
    return _examples_from_artifact(artifacts[0], selection), evaluations


def _generate_curriculum(task_prompt, examples, evaluation, transport, log):
    prompt = render(load_template("curriculum"), {
        "INSERT_TASK_PROMPT_HERE": task_prompt,
        "INSERT_EVALUATION_HERE": evaluation,
        "INSERT_WORKFLOW_YAML_HERE": examples["workflow"],
        "INSERT_REWARD_YAML_HERE": examples["reward"],
        "INSERT_CONFIG_YAML_HERE": examples["config"],
        "INSERT_RANDOMIZE_YAML_HERE": examples["randomize"],
        "INSERT_ROBOT_DESCRIPTION_HERE":
            (_DATA / "docs" / "robot_description.txt").read_text(),
        "X": "{X}",  # literal in the guideline text, not a slot here
    })

    def check(blocks):
        names = [b.file_name for b in blocks]
        findings = []
        wf = next((b for b in blocks if "workflow" in b.file_name), None)
        if wf is None:
            return ["missing generated_workflow.yaml block"]
        try:
            doc = yaml.safe_load(wf.content)
        except yaml.YAMLError as e:
            return [f"workflow block is not valid YAML: {e}"]
        stages = (doc or {}).get("workflow", {}).get("stages")
        if not isinstance(stages, list) or not stages:
            return ["workflow block must define workflow.stages"]
        detail = [n for n in names if re.match(r"generated_stage\d+_details", n)]
        if len(detail) != len(stages):
            findings.append(
                f"{len(stages)} stages in the workflow but "
                f"{len(detail)} stage description files")
        return findings

    blocks = _logged_invoke(log, transport, "curriculum", prompt,
                            parse_file_blocks, check)
    wf_block = next(b for b in blocks if "workflow" in b.file_name)
    wf_doc = yaml.safe_load(wf_block.content)
    descriptions = {}
    for b in blocks:
        m = re.match(r"generated_stage(\d+)_details", b.file_name)
        if m:
            descriptions[int(m.group(1))] = b.content
    return wf_doc, descriptions


def _generate_stages(task_prompt, wf_doc, descriptions, examples, transport,
                     log, run_dir: Path, config_overrides) -> None:
    template = load_template("per_stage")
    entries = wf_doc["workflow"]["stages"]
    for i, entry in enumerate(entries, start=1):
        idx = int(entry.get("index", i))
        prompt = render(template, {
            "X": idx,
            "INSERT_TASK_PROMPT_HERE": task_prompt,
            "INSERT_STAGE_DESCRIPTION_HERE": descriptions.get(idx, ""),
            "INSERT_WORKFLOW_YAML_HERE": yaml.safe_dump(wf_doc, sort_keys=False),
            "INSERT_REWARD_YAML_HERE": examples["reward"],
            "INSERT_CONFIG_YAML_HERE": examples["config"],
            "INSERT_RANDOMIZE_YAML_HERE": examples["randomize"],
            "INSERT_SCHEMA_REWARD_EXPRESSIONS":
                (_DATA / "docs" / "reward_expressions.txt").read_text(),
            "INSERT_REWARD_VARS_HERE":
                (_DATA / "docs" / "reward_vars.txt").read_text(),
            "INSERT_REWARD_EXAMPLE_HERE":
                (_DATA / "docs" / "reward_example.yaml").read_text(),
        })
        blocks = _logged_invoke(
            log, transport, "per_stage", prompt, parse_file_blocks,
            lambda bs, entry=entry: _stage_findings(bs, entry))
        if config_overrides:
            roles = _classify_blocks(blocks)
            doc = _apply_overrides(yaml.safe_load(roles["config"].content),
                                   config_overrides)
            blocks = [b for b in blocks if b is not roles["config"]]
            blocks.append(GeneratedFileBlock(
                roles["config"].file_name, roles["config"].file_path,
                yaml.safe_dump(doc, sort_keys=False)))
        _write_stage_files(run_dir, idx, blocks)
    _write_workflow(run_dir, wf_doc)


def _store_run(run: CurriculumRun, vdb: VectorStore, run_dir: Path,
               evaluation: str) -> None:
    files = {"workflow.yaml": (run_dir / "workflow.yaml").read_text()}
    metrics_parts = []
    for stage_dir in sorted(run_dir.glob("stage*")):
        for name in _STAGE_FILE_NAMES:
            p = stage_dir / name
            if p.is_file():
                files[f"{stage_dir.name}/{name}"] = p.read_text()
        m = stage_dir / "metrics.jsonl"
        if m.is_file():
            metrics_parts.append(m.read_text())
    vdb.add_run(RunArtifact(
        run_id=run.run_id,
        prompt=run.task_prompt,
        files=files,
        metrics_jsonl="".join(metrics_parts),
        scores=run.scores.to_dict() if run.scores else {},
        evaluation="",
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    ))
