"""Transfer-experiment orchestration: parents, transplanted children, the full grid.

Trial directory layout (one per trial id)::

    <trial_id>/checkpoint.rtl   final network
    <trial_id>/curve.csv        learning curve, CURVE_HEADER schema
    <trial_id>/record.json      TrialRecord; written last, marks the trial complete
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import re
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import surgery
from .agent import AgentConfig, RainbowAgent
from .envs import ENVIRONMENTS
from .surgery import Checkpoint, TransplantSpec
from .training import CurveRow, EvalConfig, train

log = logging.getLogger(__name__)

CURVE_HEADER = [
    "trial_id", "parent_env", "child_env", "k", "mode", "run",
    "env_steps", "eval_return_mean", "eval_return_std", "wall_clock_seconds",
]
MODE_WORDS = {"freeze": "frozen", "finetune": "finetuned"}
SCRATCH = "scratch"

_ENV = "[a-z][a-z0-9_]*"
TRIAL_ID_RE = re.compile(
    rf"^(?:parent-(?P<env>{_ENV})--run0"
    rf"|child(?P<k>\d+)-(?P<mode>frozen|finetuned)-(?P<parent_env>{_ENV})--on-(?P<child_env>{_ENV})--run(?P<run>\d+))$"
)

CHECKPOINT = "checkpoint.rtl"
CURVE = "curve.csv"
RECORD = "record.json"


class HarnessError(Exception):
    pass


def parent_trial_id(env: str) -> str:
    return f"parent-{env}--run0"


def child_trial_id(k: int, mode: str, parent_env: str, child_env: str, run: int) -> str:
    return f"child{k}-{MODE_WORDS[mode]}-{parent_env}--on-{child_env}--run{run}"


def trial_seed(base_seed: int, trial_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{trial_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _check_env(name: str) -> None:
    if name not in ENVIRONMENTS:
        raise HarnessError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")


@dataclass
class TrialPlan:
    trial_id: str
    parent_env: str
    child_env: str
    k: int | None = None
    mode: str = SCRATCH
    run: int = 0

    @property
    def is_parent(self) -> bool:
        return self.mode == SCRATCH


@dataclass
class TrialRecord:
    trial_id: str
    parent_env: str
    child_env: str
    k: int | None
    mode: str
    run: int
    seed: int
    config: dict
    curve: list[CurveRow] = field(default_factory=list)
    status: str = "completed"
    transplant_report: dict | None = None
    freeze_audit: dict | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["curve"] = [dataclasses.asdict(r) for r in self.curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        d = dict(d)
        d["curve"] = [CurveRow(**r) for r in d.get("curve", [])]
        return cls(**d)

    def curve_rows(self) -> list[list]:
        k = "" if self.k is None else self.k
        return [
            [self.trial_id, self.parent_env, self.child_env, k, self.mode, self.run,
             r.env_steps, r.eval_return_mean, r.eval_return_std, r.wall_clock_seconds]
            for r in self.curve
        ]


# -- file helpers --------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_curve_csv(path: Path, rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    writer.writerows(rows)
    _atomic_write_text(Path(path), buf.getvalue())


def write_record(trial_dir: Path, record: TrialRecord) -> None:
    if record.status == "completed":
        write_curve_csv(trial_dir / CURVE, record.curve_rows())
    _atomic_write_text(trial_dir / RECORD, json.dumps(record.to_dict(), indent=1))


def read_record(trial_dir: Path) -> TrialRecord | None:
    path = Path(trial_dir) / RECORD
    if not path.exists():
        return None
    return TrialRecord.from_dict(json.loads(path.read_text()))


def is_complete(trial_dir: Path) -> bool:
    rec = read_record(trial_dir)
    return rec is not None and rec.status == "completed"


# -- single trials ---------------------------------------------------------------


def _config_snapshot(agent_config: AgentConfig, eval_config: EvalConfig, steps: int, **extra) -> dict:
    return {"agent": agent_config.to_dict(), "eval": dataclasses.asdict(eval_config), "steps": steps, **extra}


def train_parent(env_name: str, steps: int, seed: int, out_path, agent_config: AgentConfig | None = None,
                 eval_config: EvalConfig | None = None) -> tuple[Checkpoint, list[CurveRow]]:
    """Train a network from scratch on ``env_name`` for a fixed step budget and save it.

    The last evaluation is taken on the parameters rounded to checkpoint
    precision, so a child built from the checkpoint reproduces it exactly.
    """
    _check_env(env_name)
    agent_config = agent_config or AgentConfig()
    eval_config = eval_config or EvalConfig()
    agent = RainbowAgent(agent_config, seed=seed)
    curve = train(agent, env_name, steps, seed, eval_config,
                  before_final_eval=lambda a: surgery.round_to_f32(a.online),
                  log=lambda r: log.info("parent %s step %d: %.3f", env_name, r.env_steps, r.eval_return_mean))
    ckpt = surgery.save(agent.online, out_path, env=env_name, training_steps=steps, seed=seed,
                        config=_config_snapshot(agent_config, eval_config, steps))
    return ckpt, curve


def run_parent_trial(env_name: str, steps: int, seed: int, out_dir, agent_config=None, eval_config=None) -> TrialRecord:
    """train_parent inside a trial directory, with a record and curve file."""
    agent_config = agent_config or AgentConfig()
    eval_config = eval_config or EvalConfig()
    trial_id = parent_trial_id(env_name)
    trial_dir = Path(out_dir) / trial_id
    _, curve = train_parent(env_name, steps, seed, trial_dir / CHECKPOINT, agent_config, eval_config)
    record = TrialRecord(trial_id, env_name, env_name, None, SCRATCH, 0, seed,
                         _config_snapshot(agent_config, eval_config, steps), curve)
    write_record(trial_dir, record)
    return record


def run_child(parent_ckpt, child_env: str, k: int, mode: str, run_seed: int, steps: int, out_dir,
              run: int = 0, agent_config: AgentConfig | None = None,
              eval_config: EvalConfig | None = None) -> TrialRecord:
    """Transplant ``k`` layers from the parent, train on ``child_env`` and log the curve."""
    _check_env(child_env)
    parent = parent_ckpt if isinstance(parent_ckpt, Checkpoint) else surgery.load(parent_ckpt)
    parent_env = parent.metadata.get("env") or "unknown"
    agent_config = agent_config or AgentConfig()
    eval_config = eval_config or EvalConfig()
    trial_id = child_trial_id(k, mode, parent_env, child_env, run)
    trial_dir = Path(out_dir) / trial_id

    child, mask = surgery.transplant(parent, TransplantSpec(k, mode, run_seed))
    report = surgery.verify_transplant(parent, child, k)
    agent = RainbowAgent(agent_config, seed=run_seed, network=child, freeze_mask=mask)
    curve = train(agent, child_env, steps, run_seed, eval_config,
                  log=lambda r: log.info("%s step %d: %.3f", trial_id, r.env_steps, r.eval_return_mean))
    audit = None
    if mode == "freeze":
        equal = surgery.layer_equality(parent, agent.online)
        frozen = sorted(mask)
        audit = {"frozen_layers": frozen, "bitwise_equal": {n: equal[n] for n in frozen},
                 "passed": all(equal[n] for n in frozen)}
    surgery.save(agent.online, trial_dir / CHECKPOINT, env=child_env, training_steps=steps, seed=run_seed,
                 transplant={"k": k, "mode": mode, "parent_env": parent_env,
                             "parent_hash": parent.architecture_hash, "frozen_layers": sorted(mask)})
    record = TrialRecord(trial_id, parent_env, child_env, k, mode, run, run_seed,
                         _config_snapshot(agent_config, eval_config, steps, reinit_seed=run_seed),
                         curve, transplant_report=report.to_dict(), freeze_audit=audit)
    write_record(trial_dir, record)
    return record


# -- the grid ----------------------------------------------------------------------


@dataclass
class ExperimentGrid:
    envs: list[str] = field(default_factory=lambda: ["corridor", "chase", "river"])
    k_values: list[int] = field(default_factory=lambda: [2, 4])
    modes: list[str] = field(default_factory=lambda: ["freeze", "finetune"])
    runs: int = 3
    parent_steps: int = 50_000
    child_steps: int = 50_000
    base_seed: int = 0
    eval_interval: int = 5000
    eval_episodes: int = 10
    pairs: str = "all"  # "all" ordered env pairs including self-pairs, or "cross" (parent != child)
    agent: dict = field(default_factory=dict)

    def __post_init__(self):
        for env in self.envs:
            _check_env(env)
        for mode in self.modes:
            if mode not in MODE_WORDS:
                raise HarnessError(f"unknown mode {mode!r}")
        if self.runs < 1:
            raise HarnessError("runs must be >= 1")
        if self.pairs not in ("all", "cross"):
            raise HarnessError(f"pairs must be 'all' or 'cross', got {self.pairs!r}")

    @property
    def eval_config(self) -> EvalConfig:
        return EvalConfig(interval=self.eval_interval, episodes=self.eval_episodes)

    @property
    def agent_config(self) -> AgentConfig:
        return AgentConfig(**self.agent)

    def parents(self) -> list[TrialPlan]:
        return [TrialPlan(parent_trial_id(e), e, e) for e in self.envs]

    def children(self) -> list[TrialPlan]:
        return [
            TrialPlan(child_trial_id(k, mode, p, c, r), p, c, k, mode, r)
            for p in self.envs
            for c in self.envs
            if self.pairs == "all" or p != c
            for k in self.k_values
            for mode in self.modes
            for r in range(self.runs)
        ]

    def planned_trials(self) -> list[TrialPlan]:
        return self.parents() + self.children()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentGrid":
        """Parse ``key = value`` lines; ``#`` starts a comment.

        Besides the grid keys, ``agent.<field>`` and ``buffer.<field>`` override
        AgentConfig / BufferConfig defaults.
        """
        kw: dict = {}
        agent: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line and ":" not in line:
                raise HarnessError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = re.split(r"\s*[=:]\s*", line, maxsplit=1)
            key, value = key.strip(), value.strip()
            if key in ("envs", "modes"):
                kw[key] = [v.strip() for v in value.split(",") if v.strip()]
            elif key == "k_values":
                kw[key] = [int(v) for v in value.split(",") if v.strip()]
            elif key == "pairs":
                kw[key] = value
            elif key in ("runs", "parent_steps", "child_steps", "base_seed", "eval_interval", "eval_episodes"):
                kw[key] = int(value)
            elif key.startswith("agent."):
                agent[key[6:]] = _number(value)
            elif key.startswith("buffer."):
                agent.setdefault("buffer", {})[key[7:]] = _number(value)
            else:
                raise HarnessError(f"line {lineno}: unknown key {key!r}")
        if agent:
            kw["agent"] = agent
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentGrid":
        return cls.from_text(Path(path).read_text())


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _execute(plan: TrialPlan, grid: ExperimentGrid, trials_dir: str) -> TrialRecord:
    seed = trial_seed(grid.base_seed, plan.trial_id)
    trials_dir = Path(trials_dir)
    try:
        if plan.is_parent:
            return run_parent_trial(plan.parent_env, grid.parent_steps, seed, trials_dir,
                                    grid.agent_config, grid.eval_config)
        parent_ckpt = trials_dir / parent_trial_id(plan.parent_env) / CHECKPOINT
        return run_child(parent_ckpt, plan.child_env, plan.k, plan.mode, seed, grid.child_steps, trials_dir,
                         plan.run, grid.agent_config, grid.eval_config)
    except Exception as exc:  # recorded per trial; the grid keeps going
        log.error("trial %s failed: %s", plan.trial_id, exc)
        record = TrialRecord(plan.trial_id, plan.parent_env, plan.child_env, plan.k, plan.mode, plan.run, seed,
                             {}, status="failed", error="".join(traceback.format_exception_only(type(exc), exc)))
        write_record(trials_dir / plan.trial_id, record)
        return record


def _run_batch(plans, grid, trials_dir, workers) -> list[TrialRecord]:
    if workers <= 1 or len(plans) <= 1:
        return [_execute(p, grid, str(trials_dir)) for p in plans]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_execute, p, grid, str(trials_dir)) for p in plans]
        return [f.result() for f in futures]


def run_grid(grid: ExperimentGrid, out_dir, workers: int = 1) -> dict:
    """Run every planned trial not already complete under ``out_dir/trials``; parents first."""
    out_dir = Path(out_dir)
    trials_dir = out_dir / "trials"
    trials_dir.mkdir(parents=True, exist_ok=True)
    summary = {"planned": [p.trial_id for p in grid.planned_trials()], "executed": [], "skipped": [], "failed": []}
    for stage in (grid.parents(), grid.children()):
        todo = []
        for plan in stage:
            if is_complete(trials_dir / plan.trial_id):
                summary["skipped"].append(plan.trial_id)
            else:
                todo.append(plan)
        for rec in _run_batch(todo, grid, trials_dir, workers):
            summary["executed"].append(rec.trial_id)
            if rec.status != "completed":
                summary["failed"].append(rec.trial_id)
    _atomic_write_text(out_dir / "grid_summary.json", json.dumps(summary, indent=1))
    return summary
