"""One episode of the perceive / reason / act loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from ..clock import SimClock
from ..controller import ActionCache, ExecutionReport, execute_subtask
from ..errors import AgentError, DetectorUnavailable, EmptyResult, LoopDetected
from ..gateway import Backend, CallCounter, open_backend
from ..oracle import OracleResponder
from ..perception import describe_scene, perceive_objects
from ..reasoning import PlanningMemory, SubTask, evaluate_status, plan_next_subtask
from ..simworld import Scenario, SimEnv, WorldState
from .config import ROLES, RunConfig

log = logging.getLogger(__name__)


class Agents:
    """Backends for every agent role, sharing one call counter.

    Roles that resolve to the same profile share one backend, so scripted
    transcripts keep a single reply cursor. Oracle backends answer from
    whatever environment is bound to :attr:`env`.
    """

    def __init__(self, config: RunConfig, clock=None, counter: Optional[CallCounter] = None):
        self.counter = counter if counter is not None else CallCounter()
        self.env: Optional[SimEnv] = None
        oracle = OracleResponder(lambda: self.env)
        opened: dict = {}
        self.by_role: dict[str, Backend] = {}
        for role in ROLES:
            profile = config.profile(role)
            if profile not in opened:
                opened[profile] = open_backend(profile, self.counter, clock, oracle)
            self.by_role[role] = opened[profile]

    def __getattr__(self, role: str) -> Backend:
        try:
            return self.__dict__["by_role"][role]
        except KeyError:
            raise AttributeError(role) from None


@dataclass
class EpisodeResult:
    task_text: str
    success: bool
    subtask_transcript: list[tuple[SubTask, ExecutionReport]] = field(default_factory=list)
    backend_call_count: int = 0
    cache_hits: int = 0
    wall_time: float = 0.0
    seed: int = 0
    final_verdict: str = ""
    termination: str = ""
    error: str = ""
    intervention: bool = False
    steps: list[dict] = field(default_factory=list)
    initial_world: Optional[WorldState] = None
    final_world: Optional[WorldState] = None

    def transcript_lines(self) -> list[str]:
        lines = [f"task: {self.task_text} (seed {self.seed})"]
        for st, rep in self.subtask_transcript:
            lines.append(f"  [{st.id}] {st.text}  keywords={st.keywords}")
            lines.append(f"      {rep.summary()}; backend calls {rep.backend_calls}")
            for s in rep.steps:
                mark = "ok" if s.ok else "FAIL"
                lines.append(f"        {mark:4} {s.action.gripper:5} {s.action.annotation}")
        lines.append(
            f"result: {'success' if self.success else 'failure'}; verdict {self.final_verdict or '-'}; "
            f"ended by {self.termination}; backend calls {self.backend_call_count}; cache hits {self.cache_hits}; "
            f"time {self.wall_time:.1f} s"
        )
        if self.error:
            lines.append(f"error: {self.error}")
        return lines


def run_episode(
    task_text: str,
    scenario: Scenario,
    config: RunConfig,
    *,
    seed: Optional[int] = None,
    env: Optional[SimEnv] = None,
    agents: Optional[Agents] = None,
    cache: Optional[ActionCache] = None,
    clock=None,
) -> EpisodeResult:
    """Run the loop until a terminal verdict, loop-guard rejection, the
    sub-task cap, the timeout or an intervention. Never raises for agent
    failures; they are encoded in the result."""
    seed = config.seed if seed is None else seed
    clock = clock or (env.clock if env is not None and env.clock else SimClock())
    if env is None:
        env = SimEnv(scenario, seed, config.noise, config.unreachable, clock=clock, step_time=config.step_time)
    agents = agents or Agents(config, clock)
    agents.env = env
    cache = cache if cache is not None else ActionCache(config.cache_path or None)

    result = EpisodeResult(task_text, False, seed=seed, initial_world=env.world)
    calls0, hits0, t0 = agents.counter.total, cache.hit_count, clock.now()
    memory = PlanningMemory()
    last_report = ""
    try:
        while True:
            if clock.now() - t0 > config.episode_timeout:
                result.termination = "timeout"
                break
            obs = env.observe()
            desc = describe_scene(obs.image, task_text, "scene_describe_v1", agents.scene)
            decision = evaluate_status(desc, task_text, memory, agents.status, last_report)
            if decision.terminal:
                result.final_verdict = decision.verdict
                result.termination = "verdict"
                break
            if len(result.subtask_transcript) >= config.episode_cap:
                result.termination = "episode cap"
                break
            try:
                subtask = plan_next_subtask(desc, task_text, memory, agents.plan, agents.keywords, config.loop_limit)
            except LoopDetected as e:
                result.final_verdict = "task_failed"
                result.termination = "loop guard"
                result.error = str(e)
                break
            try:
                perception = perceive_objects(
                    obs,
                    subtask.keywords,
                    env.cam,
                    env,
                    env,
                    agents.disambiguate,
                    subtask.descriptors,
                    config.grasp_radius,
                )
            except (EmptyResult, DetectorUnavailable) as e:
                report = ExecutionReport(subtask.id, False, "perception", error=f"{type(e).__name__}: {e}")
            else:
                report = execute_subtask(
                    subtask, perception.records, cache, agents.action, env, config.approach_height
                )
            memory.record(subtask, "succeeded" if report.success else "failed")
            result.subtask_transcript.append((subtask, report))
            last_report = report.summary()
            if report.intervention:
                result.intervention = True
                result.termination = "intervention"
                result.error = report.error
                break
    except AgentError as e:
        result.termination = "error"
        result.error = f"{type(e).__name__}: {e}"
        log.warning("episode aborted: %s", result.error)

    result.success = result.final_verdict == "task_complete" and env.success()
    result.backend_call_count = agents.counter.total - calls0
    result.cache_hits = cache.hit_count - hits0
    result.wall_time = clock.now() - t0
    result.steps = list(env.steps)
    result.final_world = env.world
    return result
