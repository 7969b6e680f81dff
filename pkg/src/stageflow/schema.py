"""Parse and statically validate curriculum bundles before any training runs.

A bundle is a workflow YAML plus, per stage, a config / reward / randomize
YAML. ``validate`` never stops at the first problem: it returns a report with
every finding. ``mutate_corpus`` produces a labeled set of broken bundles used
to exercise the validator.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import BundleError, RewardError
from .reward import compile_term

ERROR = "error"
WARNING = "warning"

SCHEMA_VERSION = 1

RANDOMIZATION_FIELDS = (
    "geom_friction",
    "actuator_kp_kd",
    "actuator_gainprm",
    "actuator_biasprm",
    "body_ipos",
    "geom_pos",
    "body_mass",
    "hfield_data",
)

RANDOMIZATION_OPERATIONS = ("add", "scale", "set")

CONFIG_SECTIONS = ("environment", "trainer", "randomization", "artifact", "ppo_network")
OPTIONAL_CONFIG_SECTIONS = ("render",)

REQUIRED_ENVIRONMENT_KEYS = (
    "scene_file",
    "reward_config_path",
    "obs_noise",
    "init_rand",
    "command_lin_vel_x_range",
    "command_lin_vel_y_range",
    "command_ang_vel_yaw_range",
    "command_stand_prob",
    "gait_frequency",
    "foot_height_range",
)

KNOWN_ENVIRONMENT_KEYS = REQUIRED_ENVIRONMENT_KEYS + (
    "imu_disturbs",
    "big_min_kick_vel", "big_max_kick_vel", "big_kick_interval",
    "small_min_kick_vel", "small_max_kick_vel", "small_kick_interval",
    "fixed_command", "cutoff_freq", "deadband_size", "low_cmd_boost_scale",
    "gaits", "max_foot_height",
)

REQUIRED_TRAINER_KEYS = (
    "num_timesteps", "num_evals", "episode_length", "learning_rate",
    "entropy_cost", "discounting", "num_envs", "batch_size",
    "unroll_length", "num_minibatches", "num_updates_per_batch",
    "clipping_epsilon", "seed",
)

KNOWN_TRAINER_KEYS = REQUIRED_TRAINER_KEYS + (
    "reward_scaling", "normalize_observations", "action_repeat",
)

REQUIRED_NETWORK_KEYS = ("policy_hidden_layer_sizes", "value_hidden_layer_sizes", "activation")
KNOWN_NETWORK_KEYS = REQUIRED_NETWORK_KEYS + ("policy_obs_key", "value_obs_key")


@dataclass
class Finding:
    severity: str
    code: str
    file: str
    path: str
    message: str

    def to_dict(self):
        return dict(
            severity=self.severity, code=self.code, file=self.file,
            path=self.path, message=self.message,
        )

    def __str__(self):
        return f"[{self.severity}] {self.code} {self.file}:{self.path}: {self.message}"


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(f.severity == ERROR for f in self.findings)

    @property
    def errors(self):
        return [f for f in self.findings if f.severity == ERROR]

    def codes(self) -> set[str]:
        return {f.code for f in self.errors}

    def to_json(self) -> str:
        return json.dumps(
            {"ok": self.ok, "findings": [f.to_dict() for f in self.findings]},
            indent=2,
        )

    def to_text(self) -> str:
        if not self.findings:
            return "ok: no findings"
        head = "ok" if self.ok else "INVALID"
        return "\n".join([head] + [str(f) for f in self.findings])


@dataclass
class PromotionCriterion:
    mode: str = "timesteps_exhausted"  # timesteps_exhausted | reward_threshold | either
    reward_threshold: float = 0.0


@dataclass
class StageBundle:
    index: int
    reward_path: str
    config_path: str
    randomize_path: str
    resume_from_checkpoint: bool
    feedback: bool
    promotion: PromotionCriterion
    reward_doc: dict = field(default_factory=dict)
    config_doc: dict = field(default_factory=dict)
    randomize_doc: dict = field(default_factory=dict)
    reward_text: str = ""
    config_text: str = ""
    randomize_text: str = ""


@dataclass
class CurriculumBundle:
    workflow_path: str
    workflow_doc: dict
    workflow_text: str
    stages: list

    @property
    def num_stages(self) -> int:
        return len(self.stages)


def _load_yaml(path: Path) -> tuple[dict, str]:
    if not path.is_file():
        raise BundleError("MISSING_FILE", f"no such file: {path}")
    text = path.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        loc = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise BundleError("PARSE_ERROR", f"{path}: invalid YAML{loc}")
    if not isinstance(doc, dict):
        raise BundleError("PARSE_ERROR", f"{path}: document is not a mapping")
    return doc, text


def parse_bundle(workflow_path: str | Path) -> CurriculumBundle:
    """Load a workflow file (or a directory containing ``workflow.yaml``) and
    every stage file it references. Purely structural: semantic checks live in
    :func:`validate`."""
    wf_path = Path(workflow_path)
    if wf_path.is_dir():
        wf_path = wf_path / "workflow.yaml"
    wf_doc, wf_text = _load_yaml(wf_path)
    wf = wf_doc.get("workflow")
    if not isinstance(wf, dict):
        raise BundleError("PARSE_ERROR", f"{wf_path}: top-level key must be 'workflow:'")
    stages_spec = wf.get("stages")
    if not isinstance(stages_spec, list) or not stages_spec:
        raise BundleError("PARSE_ERROR", f"{wf_path}: workflow.stages must be a non-empty list")

    root = wf_path.parent
    stages = []
    for entry in stages_spec:
        if not isinstance(entry, dict):
            raise BundleError("PARSE_ERROR", f"{wf_path}: stage entry must be a mapping")
        try:
            idx = int(entry["index"])
            reward_rel = entry["reward"]
            config_rel = entry["config"]
            randomize_rel = entry["randomize"]
        except KeyError as e:
            raise BundleError("PARSE_ERROR", f"{wf_path}: stage entry missing key {e}")
        reward_doc, reward_text = _load_yaml(root / reward_rel)
        if "reward" not in reward_doc:
            raise BundleError(
                "PARSE_ERROR",
                f"{root / reward_rel}: top-level key must be 'reward:'",
            )
        config_doc, config_text = _load_yaml(root / config_rel)
        randomize_doc, randomize_text = _load_yaml(root / randomize_rel)
        promo_spec = entry.get("promotion") or {}
        promotion = PromotionCriterion(
            mode=promo_spec.get("mode", "timesteps_exhausted"),
            reward_threshold=float(promo_spec.get("reward_threshold", 0.0)),
        )
        stages.append(StageBundle(
            index=idx,
            reward_path=str(reward_rel),
            config_path=str(config_rel),
            randomize_path=str(randomize_rel),
            resume_from_checkpoint=bool(entry.get("resume_from_checkpoint", False)),
            feedback=bool(entry.get("feedback", True)),
            promotion=promotion,
            reward_doc=reward_doc,
            config_doc=config_doc,
            randomize_doc=randomize_doc,
            reward_text=reward_text,
            config_text=config_text,
            randomize_text=randomize_text,
        ))
    stages.sort(key=lambda s: s.index)
    return CurriculumBundle(
        workflow_path=str(wf_path), workflow_doc=wf_doc, workflow_text=wf_text,
        stages=stages,
    )


# -- validation ---------------------------------------------------------------

def _is_power_of_two(n) -> bool:
    return isinstance(n, int) and not isinstance(n, bool) and n > 0 and (n & (n - 1)) == 0

def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)

def _is_range(x) -> bool:
    return isinstance(x, list) and len(x) == 2 and all(_is_number(v) for v in x)


def _validate_config(stage: StageBundle, out: list):
    doc = stage.config_doc
    f = stage.config_path

    def err(code, path, msg):
        out.append(Finding(ERROR, code, f, path, msg))

    def warn(code, path, msg):
        out.append(Finding(WARNING, code, f, path, msg))

    for section in CONFIG_SECTIONS:
        if section not in doc or not isinstance(doc[section], dict):
            err("MISSING_KEY", section, f"config must contain a '{section}:' mapping")
    for key in doc:
        if key not in CONFIG_SECTIONS + OPTIONAL_CONFIG_SECTIONS:
            warn("UNKNOWN_KEY", key, "unknown top-level config section")

    env = doc.get("environment")
    if isinstance(env, dict):
        for key in REQUIRED_ENVIRONMENT_KEYS:
            if key not in env:
                err("MISSING_KEY", f"environment.{key}", "required environment key missing")
        for key in env:
            if key not in KNOWN_ENVIRONMENT_KEYS:
                warn("UNKNOWN_KEY", f"environment.{key}", "unknown environment key")
        for key in ("command_lin_vel_x_range", "command_lin_vel_y_range",
                    "command_ang_vel_yaw_range", "gait_frequency", "foot_height_range"):
            rng = env.get(key)
            if rng is None:
                continue
            if not _is_range(rng):
                err("TYPE_ERROR", f"environment.{key}", "expected a [lo, hi] pair")
            elif rng[0] > rng[1]:
                err("RANGE_INVERTED", f"environment.{key}", f"lo {rng[0]} > hi {rng[1]}")
        prob = env.get("command_stand_prob")
        if prob is not None and (not _is_number(prob) or not 0.0 <= prob <= 1.0):
            err("PROB_RANGE", "environment.command_stand_prob",
                f"probability must lie in [0, 1], got {prob!r}")
        for lo_key, hi_key in (("big_min_kick_vel", "big_max_kick_vel"),
                               ("small_min_kick_vel", "small_max_kick_vel")):
            lo, hi = env.get(lo_key), env.get(hi_key)
            if _is_number(lo) and _is_number(hi) and lo > hi:
                err("RANGE_INVERTED", f"environment.{lo_key}", f"{lo_key} {lo} > {hi_key} {hi}")
        for key in ("big_kick_interval", "small_kick_interval"):
            v = env.get(key)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
                err("TYPE_ERROR", f"environment.{key}", "interval must be an integer >= 1")

    tr = doc.get("trainer")
    if isinstance(tr, dict):
        for key in REQUIRED_TRAINER_KEYS:
            if key not in tr:
                err("MISSING_KEY", f"trainer.{key}", "required trainer key missing")
        for key in tr:
            if key not in KNOWN_TRAINER_KEYS:
                warn("UNKNOWN_KEY", f"trainer.{key}", "unknown trainer key")
        for key in ("batch_size", "num_envs"):
            v = tr.get(key)
            if v is not None and not _is_power_of_two(v):
                err("POWER_OF_TWO", f"trainer.{key}", f"{key} must be a power of 2, got {v!r}")
        g = tr.get("discounting")
        if g is not None and (not _is_number(g) or not 0.0 < g < 1.0):
            err("GAMMA_RANGE", "trainer.discounting", f"discounting must be in (0, 1), got {g!r}")
        for key in ("learning_rate", "clipping_epsilon", "entropy_cost"):
            v = tr.get(key)
            if v is not None and (not _is_number(v) or v <= 0) and key != "entropy_cost":
                err("POSITIVE_REQUIRED", f"trainer.{key}", f"{key} must be > 0, got {v!r}")
            elif key == "entropy_cost" and v is not None and (not _is_number(v) or v < 0):
                err("POSITIVE_REQUIRED", f"trainer.{key}", f"{key} must be >= 0, got {v!r}")
        for key in ("num_timesteps", "num_evals", "episode_length", "unroll_length",
                    "num_minibatches", "num_updates_per_batch"):
            v = tr.get(key)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
                err("TYPE_ERROR", f"trainer.{key}", f"{key} must be an integer >= 1, got {v!r}")

    net = doc.get("ppo_network")
    if isinstance(net, dict):
        for key in REQUIRED_NETWORK_KEYS:
            if key not in net:
                err("MISSING_KEY", f"ppo_network.{key}", "required network key missing")
        for key in ("policy_hidden_layer_sizes", "value_hidden_layer_sizes"):
            sizes = net.get(key)
            if sizes is not None and (
                not isinstance(sizes, list) or not sizes
                or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in sizes)
            ):
                err("TYPE_ERROR", f"ppo_network.{key}", "expected a non-empty list of positive ints")

    rnd = doc.get("randomization")
    if isinstance(rnd, dict) and "randomize_config_path" not in rnd:
        err("MISSING_KEY", "randomization.randomize_config_path", "required key missing")


def _validate_reward(stage: StageBundle, out: list):
    doc = stage.reward_doc
    f = stage.reward_path
    if "reward" not in doc:
        out.append(Finding(ERROR, "BAD_TOP_KEY", f, "", "top-level key must be 'reward:'"))
        return
    terms = doc["reward"]
    if not isinstance(terms, dict) or not terms:
        out.append(Finding(ERROR, "BAD_TOP_KEY", f, "reward",
                           "'reward:' must map term names to term specs"))
        return
    for name, spec in terms.items():
        try:
            compile_term(name, spec)
        except RewardError as e:
            out.append(Finding(ERROR, e.code, f, f"reward.{name}", e.message))


def _numlist(x):
    if _is_number(x):
        return [float(x)]
    if isinstance(x, list) and all(_is_number(v) for v in x):
        return [float(v) for v in x]
    return None


def _validate_randomize(stage: StageBundle, out: list):
    doc = stage.randomize_doc
    f = stage.randomize_path

    def err(code, path, msg):
        out.append(Finding(ERROR, code, f, path, msg))

    if "randomization" not in doc:
        err("BAD_TOP_KEY", "", "top-level key must be 'randomization:'")
        return
    body = doc["randomization"]
    if not isinstance(body, dict):
        err("BAD_TOP_KEY", "randomization", "'randomization:' must be a mapping")
        return
    for fname, rules in body.items():
        if fname not in RANDOMIZATION_FIELDS:
            err("UNKNOWN_FIELD", f"randomization.{fname}",
                f"unknown randomization field; expected one of {', '.join(RANDOMIZATION_FIELDS)}")
            continue
        if not isinstance(rules, list):
            err("TYPE_ERROR", f"randomization.{fname}", "expected a list of rules")
            continue
        for i, rule in enumerate(rules):
            where = f"randomization.{fname}[{i}]"
            if not isinstance(rule, dict):
                err("TYPE_ERROR", where, "rule must be a mapping")
                continue
            if "target" not in rule:
                err("MISSING_KEY", f"{where}.target", "rule must name a target")
            dist = rule.get("distribution", {})
            uni = dist.get("uniform") if isinstance(dist, dict) else None
            if not isinstance(uni, dict):
                err("MISSING_KEY", f"{where}.distribution.uniform",
                    "rule must carry a uniform distribution")
                continue
            lo = _numlist(uni.get("minval"))
            hi = _numlist(uni.get("maxval"))
            if lo is None or hi is None:
                err("TYPE_ERROR", f"{where}.distribution.uniform",
                    "minval/maxval must be numbers or number lists")
                continue
            if len(lo) != len(hi):
                err("SHAPE_MISMATCH", f"{where}.distribution.uniform",
                    f"minval has {len(lo)} entries, maxval has {len(hi)}")
                continue
            if any(a > b for a, b in zip(lo, hi)):
                err("RANGE_INVERTED", f"{where}.distribution.uniform",
                    "minval must be <= maxval elementwise")
            op = rule.get("operation", "set")
            if op not in RANDOMIZATION_OPERATIONS:
                err("UNKNOWN_OPERATION", f"{where}.operation",
                    f"operation must be one of {RANDOMIZATION_OPERATIONS}, got {op!r}")


def validate(bundle: CurriculumBundle) -> ValidationReport:
    """Full static validation. Pure: same bundle, same report."""
    out: list[Finding] = []
    wf_file = bundle.workflow_path

    indices = [s.index for s in bundle.stages]
    if indices != list(range(1, len(indices) + 1)):
        out.append(Finding(ERROR, "STAGE_INDEX", wf_file, "workflow.stages",
                           f"stage indices must be contiguous from 1, got {indices}"))
    if bundle.stages and bundle.stages[0].index == 1 and bundle.stages[0].resume_from_checkpoint:
        out.append(Finding(ERROR, "RESUME_FIRST_STAGE", wf_file,
                           "workflow.stages[0].resume_from_checkpoint",
                           "stage 1 cannot resume from a checkpoint"))
    for s in bundle.stages:
        if s.promotion.mode not in ("timesteps_exhausted", "reward_threshold", "either"):
            out.append(Finding(ERROR, "UNKNOWN_PROMOTION", wf_file,
                               f"workflow.stages[{s.index}].promotion.mode",
                               f"unknown promotion mode {s.promotion.mode!r}"))

    # cross-stage: network sizes must be identical everywhere
    nets = []
    for s in bundle.stages:
        net = s.config_doc.get("ppo_network") or {}
        nets.append((net.get("policy_hidden_layer_sizes"), net.get("value_hidden_layer_sizes")))
    if len({json.dumps(n) for n in nets}) > 1:
        out.append(Finding(ERROR, "NETWORK_MISMATCH", wf_file, "ppo_network",
                           "network layer sizes must be identical across all stages"))

    for s in bundle.stages:
        rnd = s.config_doc.get("randomization") or {}
        declared = rnd.get("randomize_config_path")
        if declared is not None and Path(declared).name != Path(s.randomize_path).name:
            out.append(Finding(
                ERROR, "PATH_MISMATCH", s.config_path, "randomization.randomize_config_path",
                f"config names {Path(declared).name!r} but the workflow assigns "
                f"{Path(s.randomize_path).name!r}",
            ))
        _validate_config(s, out)
        _validate_reward(s, out)
        _validate_randomize(s, out)

    return ValidationReport(findings=out)


# -- mutation corpus ----------------------------------------------------------

@dataclass
class Mutant:
    label: str
    expected_code: str
    bundle: CurriculumBundle


def _clone(bundle: CurriculumBundle) -> CurriculumBundle:
    return copy.deepcopy(bundle)


def mutate_corpus(bundle: CurriculumBundle, seed: int = 0) -> list[Mutant]:
    """Deterministic set of >= 20 single-field mutations of a valid bundle,
    each labeled with the finding code it must trigger."""
    rng = random.Random(seed)
    stage0 = bundle.stages[0]
    term_names = sorted((stage0.reward_doc.get("reward") or {}).keys())
    victim_term = rng.choice(term_names)
    rnd_fields = sorted((stage0.randomize_doc.get("randomization") or {}).keys())
    victim_field = rng.choice(rnd_fields)

    mutants: list[Mutant] = []

    def mutant(label, code, fn):
        b = _clone(bundle)
        fn(b)
        mutants.append(Mutant(label, code, b))

    def tr(b):
        return b.stages[0].config_doc["trainer"]

    def env(b):
        return b.stages[0].config_doc["environment"]

    def term(b):
        return b.stages[0].reward_doc["reward"][victim_term]

    def rz(b):
        return b.stages[0].randomize_doc["randomization"]

    mutant("batch_size not a power of two", "POWER_OF_TWO",
           lambda b: tr(b).update(batch_size=500))
    mutant("num_envs not a power of two", "POWER_OF_TWO",
           lambda b: tr(b).update(num_envs=100))
    mutant("x velocity command range inverted", "RANGE_INVERTED",
           lambda b: env(b).update(command_lin_vel_x_range=[0.5, -0.5]))
    mutant("stand probability above 1", "PROB_RANGE",
           lambda b: env(b).update(command_stand_prob=1.5))
    mutant("discount factor outside (0,1)", "GAMMA_RANGE",
           lambda b: tr(b).update(discounting=1.5))
    mutant("negative learning rate", "POSITIVE_REQUIRED",
           lambda b: tr(b).update(learning_rate=-1.0e-4))
    mutant("zero clipping epsilon", "POSITIVE_REQUIRED",
           lambda b: tr(b).update(clipping_epsilon=0))
    mutant("num_timesteps dropped", "MISSING_KEY",
           lambda b: tr(b).pop("num_timesteps"))
    mutant("environment section dropped", "MISSING_KEY",
           lambda b: b.stages[0].config_doc.pop("environment"))
    mutant("gait_frequency range inverted", "RANGE_INVERTED",
           lambda b: env(b).update(gait_frequency=[2.5, 2.0]))
    mutant("reward top-level key renamed", "BAD_TOP_KEY",
           lambda b: b.stages[0].reward_doc.update(
               rewards=b.stages[0].reward_doc.pop("reward")))
    mutant(f"evaluation type of {victim_term!r} unknown", "UNKNOWN_EVALUATION",
           lambda b: term(b)["evaluations"][0].update(type="cubic"))
    mutant(f"parameter set of {victim_term!r} wrong", "TYPE_ARITY",
           lambda b: term(b)["evaluations"][0].update(
               parameters={"bogus_parameter": "1.0"}))
    mutant(f"input expression of {victim_term!r} unparseable", "SYNTAX_ERROR",
           lambda b: term(b).setdefault("inputs", {}).update(broken="command[0:2"))
    mutant(f"{victim_term!r} references an undeclared variable", "UNBOUND_VARIABLE",
           lambda b: term(b)["evaluations"].append(
               {"type": "sum_square", "parameters": {"vector": "no_such_name_anywhere"}}))
    mutant(f"scale of {victim_term!r} not numeric", "BAD_SCALE",
           lambda b: term(b).update(scale="big"))
    mutant(f"evaluations of {victim_term!r} emptied", "EMPTY_EVALUATIONS",
           lambda b: term(b).update(evaluations=[]))
    mutant(f"combination type of {victim_term!r} unknown", "UNKNOWN_COMBINATION",
           lambda b: term(b).update(combination={"type": "product"}))
    mutant("randomize top-level key renamed", "BAD_TOP_KEY",
           lambda b: b.stages[0].randomize_doc.update(
               random=b.stages[0].randomize_doc.pop("randomization")))
    mutant(f"randomization field {victim_field!r} misspelled", "UNKNOWN_FIELD",
           lambda b: rz(b).update(unknown_field_xyz=rz(b).pop(victim_field)))
    mutant(f"uniform bounds of {victim_field!r} inverted", "RANGE_INVERTED",
           lambda b: rz(b)[victim_field][0]["distribution"]["uniform"].update(
               minval=10.0, maxval=-10.0))
    mutant(f"operation of {victim_field!r} unknown", "UNKNOWN_OPERATION",
           lambda b: rz(b)[victim_field][0].update(operation="multiply"))
    mutant(f"uniform bound shapes of {victim_field!r} differ", "SHAPE_MISMATCH",
           lambda b: rz(b)[victim_field][0]["distribution"]["uniform"].update(
               minval=[0.0, 0.0], maxval=[1.0, 1.0, 1.0]))
    mutant("stage 1 resumes from a checkpoint", "RESUME_FIRST_STAGE",
           lambda b: setattr(b.stages[0], "resume_from_checkpoint", True))
    mutant("config randomize path disagrees with workflow", "PATH_MISMATCH",
           lambda b: b.stages[0].config_doc["randomization"].update(
               randomize_config_path="somewhere/else.yaml"))
    mutant("stage index not contiguous", "STAGE_INDEX",
           lambda b: setattr(b.stages[-1], "index", b.stages[-1].index + 1))
    if len(bundle.stages) > 1:
        mutant("network sizes differ across stages", "NETWORK_MISMATCH",
               lambda b: b.stages[1].config_doc["ppo_network"].update(
                   policy_hidden_layer_sizes=[8, 8]))
    return mutants
