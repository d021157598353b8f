"""Rule-based agent simulation of a facility workday.

Time is integer seconds since midnight. The simulation advances in 1-second
ticks from 07:55 to 24:00; :meth:`Simulation.run` skips ticks on which no
agent has a pending event, which yields exactly the same trajectory as
calling :meth:`Simulation.step` for every tick.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from poltwin.facility import (
    FacilityLayout,
    Location,
    SpaceCategory,
    default_layout,
    load_layout_file,
)
from poltwin.movement import Walk, walk_between
from poltwin.vocab import Tag, UserClass

log = logging.getLogger(__name__)

SIM_START = 7 * 3600 + 55 * 60
SIM_END = 24 * 3600
ARRIVAL_ORIGIN = 8 * 3600

CATEGORY_TAG = {
    SpaceCategory.OFFICE: Tag.OFFICE,
    SpaceCategory.LAB: Tag.LAB,
    SpaceCategory.STORAGE: Tag.STORAGE,
    SpaceCategory.MAINTENANCE: Tag.MAINTENANCE,
    SpaceCategory.ENTRANCE: Tag.ENTRY,
}
TAG_CATEGORY = {tag: cat for cat, tag in CATEGORY_TAG.items()}


class ConfigError(ValueError):
    """Invalid simulation configuration."""


class AgentState(enum.Enum):
    MOVING = "MOVING"
    WORKING = "WORKING"
    ON_BREAK = "ON_BREAK"
    EXITED = "EXITED"


LEGAL_TRANSITIONS = {
    AgentState.MOVING: {AgentState.WORKING, AgentState.ON_BREAK, AgentState.EXITED},
    AgentState.WORKING: {AgentState.MOVING},
    AgentState.ON_BREAK: {AgentState.MOVING},
    AgentState.EXITED: set(),
}


@dataclass(frozen=True)
class TriangularSpec:
    min: float
    mode: float
    max: float

    def __post_init__(self) -> None:
        if not (0 < self.min <= self.mode <= self.max):
            raise ConfigError(f"invalid triangular spec {self}")


def sample_triangular(spec: TriangularSpec, u: float) -> float:
    """Inverse-CDF draw from a triangular distribution, in the distribution's own units."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    a, c, b = spec.min, spec.mode, spec.max
    if b == a:
        return a
    fc = (c - a) / (b - a)
    if u < fc:
        x = a + math.sqrt(u * (b - a) * (c - a))
    else:
        x = b - math.sqrt((1.0 - u) * (b - a) * (b - c))
    # b - sqrt(...) can round a hair outside [a, b]
    return min(max(x, a), b)


def _tri(lo, mode, hi):
    return TriangularSpec(float(lo), float(mode), float(hi))


DEFAULT_ELIGIBLE = {
    UserClass.FACILITY_MANAGER: (
        SpaceCategory.OFFICE, SpaceCategory.LAB, SpaceCategory.STORAGE, SpaceCategory.MAINTENANCE,
    ),
    UserClass.RAD_WORKER: (
        SpaceCategory.OFFICE, SpaceCategory.LAB, SpaceCategory.STORAGE, SpaceCategory.MAINTENANCE,
    ),
    UserClass.INVESTIGATOR: (SpaceCategory.OFFICE, SpaceCategory.LAB),
    UserClass.FACILITY_USER: (SpaceCategory.LAB, SpaceCategory.STORAGE),
}


@dataclass(frozen=True)
class BehaviorSpec:
    shift: dict[UserClass, TriangularSpec] = field(
        default_factory=lambda: {
            UserClass.FACILITY_MANAGER: _tri(420, 480, 540),
            UserClass.RAD_WORKER: _tri(420, 480, 540),
            UserClass.INVESTIGATOR: _tri(120, 240, 540),
            UserClass.FACILITY_USER: _tri(120, 240, 540),
        }
    )
    work_session: dict[SpaceCategory, TriangularSpec] = field(
        default_factory=lambda: {
            SpaceCategory.OFFICE: _tri(10, 50, 120),
            SpaceCategory.LAB: _tri(10, 50, 120),
            SpaceCategory.STORAGE: _tri(5, 10, 30),
            SpaceCategory.MAINTENANCE: _tri(5, 30, 60),
        }
    )
    inter_break: TriangularSpec = field(default_factory=lambda: _tri(20, 50, 120))
    break_duration: TriangularSpec = field(default_factory=lambda: _tri(10, 20, 60))
    outside_break_prob: float = 0.25
    eligible: dict[UserClass, tuple[SpaceCategory, ...]] = field(
        default_factory=lambda: dict(DEFAULT_ELIGIBLE)
    )

    def __post_init__(self) -> None:
        if not 0.0 <= self.outside_break_prob <= 1.0:
            raise ConfigError("outside_break_prob must lie in [0, 1]")
        for cls in UserClass:
            if cls not in self.shift:
                raise ConfigError(f"missing shift distribution for {cls.name}")
            if not self.eligible.get(cls):
                raise ConfigError(f"no eligible work categories for {cls.name}")
            for cat in self.eligible[cls]:
                if cat not in self.work_session:
                    raise ConfigError(f"no work-session distribution for {cat.value}")


@dataclass(frozen=True)
class ArrivalSchedule:
    """Arrival bins as (start, end, fraction), offsets in minutes after 08:00."""

    bins: tuple[tuple[float, float, float], ...] = (
        (0.0, 10.0, 0.30),
        (10.0, 20.0, 0.30),
        (20.0, 30.0, 0.20),
        (30.0, 40.0, 0.10),
        (40.0, 50.0, 0.10),
    )

    def __post_init__(self) -> None:
        if not self.bins:
            raise ConfigError("arrival schedule needs at least one bin")
        if abs(sum(b[2] for b in self.bins) - 1.0) > 1e-9:
            raise ConfigError("arrival fractions must sum to 1")
        prev_end = -math.inf
        for start, end, frac in self.bins:
            if not (start < end) or start < prev_end or frac < 0:
                raise ConfigError("arrival bins must be ordered, non-overlapping, non-negative")
            prev_end = end

    def sample(self, rng: np.random.Generator) -> int:
        """Entry time in seconds since midnight."""
        fracs = np.array([b[2] for b in self.bins])
        k = int(rng.choice(len(self.bins), p=fracs))
        start, end, _ = self.bins[k]
        offset = start * 60 + rng.random() * (end - start) * 60
        return ARRIVAL_ORIGIN + int(math.floor(offset))


DEFAULT_ROSTER = {
    UserClass.FACILITY_MANAGER: 1,
    UserClass.RAD_WORKER: 9,
    UserClass.INVESTIGATOR: 1,
    UserClass.FACILITY_USER: 5,
}


@dataclass(frozen=True)
class RosterConfig:
    counts: dict[UserClass, int] = field(default_factory=lambda: dict(DEFAULT_ROSTER))

    def __post_init__(self) -> None:
        if any(n < 0 for n in self.counts.values()):
            raise ConfigError("roster counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def classes(self) -> list[UserClass]:
        """One entry per agent, in class-index order."""
        return [cls for cls in UserClass for _ in range(self.counts.get(cls, 0))]


@dataclass
class TransitionRecord:
    run_id: int
    agent_id: int
    user_class: UserClass
    source_tag: Tag
    dest_tag: Tag
    seconds_since_entry: int
    stay_duration: int = 0


@dataclass(frozen=True)
class TrajectoryPoint:
    run_id: int
    agent_id: int
    user_class: UserClass
    minute: int
    x: float
    y: float
    x_norm: float
    y_norm: float
    location_id: str | None


class _Goal(enum.Enum):
    WORK = 1
    BREAK_ROOM = 2
    OUTSIDE = 3
    EXIT = 4


@dataclass
class Agent:
    id: int
    user_class: UserClass
    entry_time: int
    shift_duration: int
    entrance: str
    assigned_work_locations: list[str]
    state: AgentState | None = None  # None until spawned
    position: tuple[float, float] = (math.nan, math.nan)
    current_location: str | None = None
    walk: Walk | None = None
    goal: _Goal | None = None
    target: str | None = None
    next_break_at: int = 0
    state_deadline: int = 0
    state_entered: int = 0
    inside: bool = False
    last_tag: Tag = Tag.ENTRY
    pending: TransitionRecord | None = None
    stay_started: int = 0
    history: list[tuple[int, AgentState]] = field(default_factory=list)

    @property
    def shift_end(self) -> int:
        return self.entry_time + self.shift_duration

    @property
    def next_event(self) -> int:
        if self.state is None:
            return self.entry_time
        if self.state is AgentState.EXITED:
            return math.inf
        if self.state is AgentState.MOVING:
            return self.walk.arrival
        if self.state is AgentState.WORKING:
            return min(self.state_deadline, self.next_break_at, self.shift_end)
        return min(self.state_deadline, self.shift_end)

    def position_at(self, t: int) -> tuple[float, float]:
        if self.state is AgentState.MOVING:
            return self.walk.position(t)
        return self.position


@dataclass(frozen=True)
class SimConfig:
    layout: FacilityLayout = field(default_factory=default_layout)
    roster: RosterConfig = field(default_factory=RosterConfig)
    schedule: ArrivalSchedule = field(default_factory=ArrivalSchedule)
    behavior: BehaviorSpec = field(default_factory=BehaviorSpec)
    seed: int = 0
    start: int = SIM_START
    end: int = SIM_END


def _minutes_to_s(minutes: float) -> int:
    return int(round(minutes * 60))


def _eligible_locations(layout, behavior, cls) -> list[str]:
    out = []
    for cat in behavior.eligible[cls]:
        locs = layout.by_category(cat)
        if not locs:
            raise ConfigError(f"{cls.name} needs a {cat.value} location but the layout has none")
        out.extend(loc.id for loc in locs)
    return out


def assign_roster(
    roster: RosterConfig,
    schedule: ArrivalSchedule,
    behavior: BehaviorSpec,
    layout: FacilityLayout,
    rng: np.random.Generator,
) -> list[Agent]:
    entrances = sorted(loc.id for loc in layout.entrances())
    agents = []
    for i, cls in enumerate(roster.classes()):
        entry = schedule.sample(rng)
        shift = _minutes_to_s(sample_triangular(behavior.shift[cls], rng.random()))
        entrance = entrances[int(rng.integers(len(entrances)))]
        agents.append(
            Agent(
                id=i,
                user_class=cls,
                entry_time=entry,
                shift_duration=shift,
                entrance=entrance,
                assigned_work_locations=_eligible_locations(layout, behavior, cls),
            )
        )
    return agents


class Simulation:
    """One simulated workday. Owns its agents, RNG and output logs."""

    def __init__(self, config: SimConfig, seed: int, run_id: int = 0,
                 log_trajectories: bool = False, agents: list[Agent] | None = None):
        self.config = config
        self.layout = config.layout
        self.behavior = config.behavior
        self.rng = np.random.default_rng(seed)
        self.run_id = run_id
        self.log_trajectories = log_trajectories
        self.now = config.start
        if agents is None:
            agents = assign_roster(config.roster, config.schedule, config.behavior,
                                   config.layout, self.rng)
        self.agents = agents
        self.transitions: list[TransitionRecord] = []
        self.trajectories: list[TrajectoryPoint] = []
        self._break_rooms = self.layout.by_category(SpaceCategory.BREAK_ROOM)
        self._entrances = self.layout.entrances()

    # -- state changes -------------------------------------------------

    def _set_state(self, a: Agent, state: AgentState) -> None:
        if a.state is not None and state not in LEGAL_TRANSITIONS[a.state]:
            raise RuntimeError(f"illegal transition {a.state} -> {state} for agent {a.id}")
        a.state = state
        a.state_entered = self.now
        a.history.append((self.now, state))

    def _emit(self, a: Agent, dest: Tag) -> TransitionRecord:
        rec = TransitionRecord(self.run_id, a.id, a.user_class, a.last_tag, dest,
                               self.now - a.entry_time)
        self.transitions.append(rec)
        return rec

    def _close_stay(self, a: Agent) -> None:
        if a.pending is not None:
            a.pending.stay_duration = self.now - a.stay_started
            a.pending = None

    def _start_walk(self, a: Agent, dest: Location, goal: _Goal) -> None:
        origin = self.layout.location(a.current_location).attached_waypoint
        a.walk = walk_between(self.layout, origin, dest.attached_waypoint, self.now)
        a.goal = goal
        a.target = dest.id
        a.current_location = None
        self._set_state(a, AgentState.MOVING)

    def _walk_arrival(self, a: Agent, dest: Location) -> int:
        origin = self.layout.location(a.current_location).attached_waypoint
        return walk_between(self.layout, origin, dest.attached_waypoint, self.now).arrival

    def _nearest_entrance(self, a: Agent) -> Location:
        return self.layout.nearest(a.current_location, self._entrances)

    def _pick_work_location(self, a: Agent) -> Location:
        cats = self.behavior.eligible[a.user_class]
        cat = cats[int(self.rng.integers(len(cats)))]
        options = self.layout.by_category(cat)
        return options[int(self.rng.integers(len(options)))]

    def _depart_to_exit(self, a: Agent) -> None:
        self._emit(a, Tag.END)
        if not a.inside:
            # already outside (break): leave directly
            a.current_location = None
            self._set_state(a, AgentState.MOVING)
            self._set_state(a, AgentState.EXITED)
            return
        self._start_walk(a, self._nearest_entrance(a), _Goal.EXIT)

    def _depart_to_work(self, a: Agent) -> None:
        dest = self._pick_work_location(a)
        arrival = self._walk_arrival(a, dest)
        if arrival >= a.shift_end:
            self._depart_to_exit(a)
            return
        if arrival >= a.next_break_at:
            self._depart_to_break(a)
            return
        a.inside = True
        a.pending = self._emit(a, CATEGORY_TAG[dest.category])
        self._start_walk(a, dest, _Goal.WORK)

    def _depart_to_break(self, a: Agent) -> None:
        outside = self.rng.random() < self.behavior.outside_break_prob
        if outside:
            dest = self._nearest_entrance(a)
        else:
            dest = self.layout.nearest(a.current_location, self._break_rooms)
        if self._walk_arrival(a, dest) >= a.shift_end:
            self._depart_to_exit(a)
            return
        if outside:
            a.pending = self._emit(a, Tag.ENTRY)
            self._start_walk(a, dest, _Goal.OUTSIDE)
        else:
            self._start_walk(a, dest, _Goal.BREAK_ROOM)

    def _spawn(self, a: Agent) -> None:
        ent = self.layout.location(a.entrance)
        a.inside = True
        a.current_location = ent.id
        a.position = ent.position
        a.last_tag = Tag.ENTRY
        a.next_break_at = self.now + _minutes_to_s(
            sample_triangular(self.behavior.inter_break, self.rng.random())
        )
        self._depart_to_work(a)

    def _arrive(self, a: Agent) -> None:
        dest = self.layout.location(a.target)
        a.current_location = dest.id
        a.position = dest.position
        a.walk = None
        goal, a.goal = a.goal, None
        if goal is _Goal.EXIT:
            a.inside = False
            a.current_location = None
            self._set_state(a, AgentState.EXITED)
        elif goal is _Goal.WORK:
            a.last_tag = CATEGORY_TAG[dest.category]
            a.stay_started = self.now
            a.state_deadline = self.now + _minutes_to_s(
                sample_triangular(self.behavior.work_session[dest.category], self.rng.random())
            )
            self._set_state(a, AgentState.WORKING)
        else:
            if goal is _Goal.OUTSIDE:
                # current_location stays at the entrance used to step out
                a.inside = False
                a.last_tag = Tag.ENTRY
                a.stay_started = self.now
            a.state_deadline = self.now + _minutes_to_s(
                sample_triangular(self.behavior.break_duration, self.rng.random())
            )
            self._set_state(a, AgentState.ON_BREAK)

    def _handle(self, a: Agent) -> None:
        now = self.now
        if a.state is None:
            self._spawn(a)
        elif a.state is AgentState.MOVING:
            self._arrive(a)
        elif a.state is AgentState.WORKING:
            self._close_stay(a)
            # shift end > break > work-session expiry
            if now >= a.shift_end:
                self._depart_to_exit(a)
            elif now >= a.next_break_at:
                self._depart_to_break(a)
            else:
                self._depart_to_work(a)
        elif a.state is AgentState.ON_BREAK:
            self._close_stay(a)
            a.next_break_at = now + _minutes_to_s(
                sample_triangular(self.behavior.inter_break, self.rng.random())
            )
            if now >= a.shift_end:
                self._depart_to_exit(a)
            else:
                self._depart_to_work(a)

    # -- driving ---------------------------------------------------------

    def _process_tick(self) -> int:
        start = len(self.transitions)
        for a in self.agents:
            while a.next_event <= self.now:
                self._handle(a)
        if self.log_trajectories and self.now % 60 == 0:
            self._sample_positions()
        return start

    def step(self) -> list[TransitionRecord]:
        """Process the current tick, then advance the clock by one second."""
        start = self._process_tick()
        self.now += 1
        return self.transitions[start:]

    def _sample_positions(self) -> None:
        minute = self.now // 60
        for a in self.agents:
            if not a.inside or a.state is None or a.state is AgentState.EXITED:
                continue
            x, y = a.position_at(self.now)
            xn, yn = self.layout.normalize(x, y)
            loc = a.current_location if a.state is not AgentState.MOVING else None
            self.trajectories.append(
                TrajectoryPoint(self.run_id, a.id, a.user_class, minute, x, y, xn, yn, loc)
            )

    def run(self) -> tuple[list[TransitionRecord], list[TrajectoryPoint] | None]:
        end = self.config.end
        while self.now < end:
            self._process_tick()
            nxt = min((a.next_event for a in self.agents), default=math.inf)
            if self.log_trajectories:
                nxt = min(nxt, (self.now // 60 + 1) * 60)
            self.now = int(min(max(nxt, self.now + 1), end))
        left = [a.id for a in self.agents if a.state is not AgentState.EXITED]
        if left:
            raise RuntimeError(f"agents {left} still inside at end of day")
        return self.transitions, (self.trajectories if self.log_trajectories else None)


def run_simulation(config: SimConfig, seed: int, log_trajectories: bool = False,
                   run_id: int = 0):
    """Simulate one day; returns ``(transitions, trajectories-or-None)``."""
    return Simulation(config, seed, run_id=run_id, log_trajectories=log_trajectories).run()


def _batch_job(args):
    config, seed, run_id, log_traj = args
    return run_simulation(config, seed, log_trajectories=log_traj, run_id=run_id)


def run_batch(config: SimConfig, n_runs: int = 1000, n_trajectory_runs: int = 10,
              base_seed: int = 0, workers: int = 1):
    """Independent runs seeded ``base_seed + i``; trajectories for the first runs only."""
    if n_runs < 1:
        raise ConfigError("n_runs must be ≥1")
    if not 0 <= n_trajectory_runs <= n_runs:
        raise ConfigError("n_trajectory_runs must lie in [0, n_runs]")
    jobs = [(config, base_seed + i, i, i < n_trajectory_runs) for i in range(n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_batch_job, jobs, chunksize=max(1, n_runs // (4 * workers))))
    else:
        results = [_batch_job(j) for j in jobs]
    transitions: list[TransitionRecord] = []
    trajectories: list[TrajectoryPoint] = []
    for trans, traj in results:
        transitions.extend(trans)
        if traj:
            trajectories.extend(traj)
    return transitions, trajectories


# -- config files ------------------------------------------------------------

def _tri_from(doc) -> TriangularSpec:
    return _tri(doc["min"], doc["mode"], doc["max"])


def sim_config_from_dict(doc: dict, base_dir: FsPath | None = None) -> SimConfig:
    """Build a :class:`SimConfig` from a parsed JSON document.

    Recognised keys (all optional): ``schema_version``, ``layout`` (path,
    relative to the config file, or ``"default"``), ``roster``, ``schedule``,
    ``behavior``, ``seed``.
    """
    if doc.get("schema_version", 1) != 1:
        raise ConfigError(f"unsupported simulation schema_version {doc['schema_version']!r}")
    try:
        layout_ref = doc.get("layout", "default")
        if layout_ref == "default":
            layout = default_layout()
        else:
            p = FsPath(layout_ref)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            layout = load_layout_file(p)
        roster = RosterConfig(
            {UserClass[k]: int(v) for k, v in doc["roster"].items()}
        ) if "roster" in doc else RosterConfig()
        schedule = ArrivalSchedule(
            tuple((float(b["start"]), float(b["end"]), float(b["fraction"])) for b in doc["schedule"])
        ) if "schedule" in doc else ArrivalSchedule()
        behavior = BehaviorSpec()
        if "behavior" in doc:
            b = doc["behavior"]
            kwargs = {}
            if "shift" in b:
                kwargs["shift"] = {**behavior.shift,
                                   **{UserClass[k]: _tri_from(v) for k, v in b["shift"].items()}}
            if "work_session" in b:
                kwargs["work_session"] = {
                    **behavior.work_session,
                    **{SpaceCategory(k): _tri_from(v) for k, v in b["work_session"].items()},
                }
            if "inter_break" in b:
                kwargs["inter_break"] = _tri_from(b["inter_break"])
            if "break_duration" in b:
                kwargs["break_duration"] = _tri_from(b["break_duration"])
            if "outside_break_prob" in b:
                kwargs["outside_break_prob"] = float(b["outside_break_prob"])
            if "eligible" in b:
                kwargs["eligible"] = {
                    **behavior.eligible,
                    **{UserClass[k]: tuple(SpaceCategory(c) for c in v)
                       for k, v in b["eligible"].items()},
                }
            behavior = BehaviorSpec(**kwargs)
        for cls in roster.classes():
            _eligible_locations(layout, behavior, cls)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed simulation config: {exc}") from exc
    return SimConfig(layout, roster, schedule, behavior, int(doc.get("seed", 0)))


def load_sim_config(path: str | FsPath) -> SimConfig:
    path = FsPath(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"simulation config parse error: {exc}") from exc
    return sim_config_from_dict(doc, base_dir=path.parent)
