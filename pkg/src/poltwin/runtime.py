"""Surrogate-driven NPC scenarios: a facility day in normal or emergency mode.

NPCs choose destinations with the next-destination model and stay for
durations drawn from the stay-duration model. With ``break_overlay`` on, the
ABM break rules interrupt stays exactly as they do for ABM agents. In
emergency mode every NPC inside the facility picks a response at the trigger
minute (minute of day, so the default 780 is 13:00).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from poltwin.abm import (
    CATEGORY_TAG,
    SIM_END,
    SIM_START,
    AgentState,
    ArrivalSchedule,
    BehaviorSpec,
    ConfigError,
    RosterConfig,
    TrajectoryPoint,
    TransitionRecord,
    sample_triangular,
)
from poltwin.facility import FacilityLayout, SpaceCategory
from poltwin.movement import Walk, reroute, walk_between
from poltwin.surrogate import (
    NextDestinationModel,
    StayDurationModel,
    SurrogateError,
    predict_next,
    predict_stay,
)
from poltwin.vocab import Tag, UserClass

EVENTS_HEADER = [
    "npc_id", "minute", "decision", "source_tag", "dest_tag", "location_id",
    "predicted_stay_s", "emergency_branch",
]


class ScenarioMode(enum.Enum):
    NORMAL = "NORMAL"
    EMERGENCY = "EMERGENCY"


class Response(enum.Enum):
    EVACUATE = "EVACUATE"
    MAINTENANCE_DUTY = "MAINTENANCE_DUTY"
    SEEK_ASSISTANCE = "SEEK_ASSISTANCE"


RATIONAL_RESPONSE = {
    UserClass.FACILITY_MANAGER: Response.MAINTENANCE_DUTY,
    UserClass.RAD_WORKER: Response.MAINTENANCE_DUTY,
    UserClass.INVESTIGATOR: Response.EVACUATE,
    UserClass.FACILITY_USER: Response.EVACUATE,
}

RATIONALITY_RANGE = (0.5, 1.0)


@dataclass(frozen=True)
class BehaviorProfile:
    npc_id: int
    user_class: UserClass
    tag_to_locations: dict[Tag, tuple[str, ...]]
    rationality: float
    entry_time: int
    shift_duration: int
    entrance: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.rationality <= 1.0:
            raise ConfigError("rationality must lie in [0, 1]")
        if not self.tag_to_locations or any(not locs for locs in self.tag_to_locations.values()):
            raise ConfigError(f"NPC {self.npc_id}: every eligible tag needs ≥1 location")

    @property
    def shift_end(self) -> int:
        return self.entry_time + self.shift_duration


@dataclass(frozen=True)
class ScenarioConfig:
    mode: ScenarioMode = ScenarioMode.NORMAL
    trigger_minute: int = 780
    roster: RosterConfig = field(default_factory=RosterConfig)
    seed: int = 0
    break_overlay: bool = True
    schedule: ArrivalSchedule = field(default_factory=ArrivalSchedule)
    behavior: BehaviorSpec = field(default_factory=BehaviorSpec)
    start: int = SIM_START
    end: int = SIM_END


class DecisionModels(Protocol):
    """What the engine asks of its models; stubs implement the same two calls."""

    def next_tag(self, profile: BehaviorProfile, source_tag: Tag, seconds_since_entry: int,
                 rng: np.random.Generator, allowed: frozenset[Tag]) -> Tag: ...

    def stay_seconds(self, profile: BehaviorProfile, dest_tag: Tag, seconds_since_entry: int,
                     rng: np.random.Generator) -> float: ...


@dataclass(frozen=True)
class SurrogateModels:
    next_model: NextDestinationModel
    stay_model: StayDurationModel

    def next_tag(self, profile, source_tag, seconds_since_entry, rng, allowed):
        return predict_next(self.next_model, source_tag, profile.user_class,
                            seconds_since_entry, rng, allowed=allowed)

    def stay_seconds(self, profile, dest_tag, seconds_since_entry, rng):
        return predict_stay(self.stay_model, dest_tag, profile.user_class,
                            seconds_since_entry, rng)


def build_profiles(roster: RosterConfig, layout: FacilityLayout, behavior: BehaviorSpec,
                   rng: np.random.Generator,
                   schedule: ArrivalSchedule | None = None) -> list[BehaviorProfile]:
    schedule = schedule or ArrivalSchedule()
    entrances = sorted(loc.id for loc in layout.entrances())
    profiles = []
    for i, cls in enumerate(roster.classes()):
        tag_map = {}
        for cat in behavior.eligible[cls]:
            locs = tuple(loc.id for loc in layout.by_category(cat))
            if not locs:
                raise ConfigError(f"{cls.name} needs a {cat.value} location but the layout has none")
            tag_map[CATEGORY_TAG[cat]] = locs
        entry = schedule.sample(rng)
        shift = int(round(sample_triangular(behavior.shift[cls], rng.random()) * 60))
        entrance = entrances[int(rng.integers(len(entrances)))]
        rationality = float(rng.uniform(*RATIONALITY_RANGE))
        profiles.append(BehaviorProfile(i, cls, tag_map, rationality, entry, shift, entrance))
    return profiles


@dataclass(frozen=True)
class DecisionEvent:
    npc_id: int
    minute: int
    decision: str
    source_tag: Tag | None
    dest_tag: Tag | None
    location_id: str | None
    predicted_stay_s: float | None
    emergency_branch: Response | None


class _Goal(enum.Enum):
    WORK = 1
    BREAK_ROOM = 2
    OUTSIDE = 3
    EXIT = 4
    DUTY = 5
    ASSIST = 6


@dataclass
class NPC:
    profile: BehaviorProfile
    state: AgentState | None = None
    node: str | None = None                 # waypoint while stationary
    location: str | None = None             # location id while stationary at one
    position: tuple[float, float] = (math.nan, math.nan)
    walk: Walk | None = None
    goal: _Goal | None = None
    planned_stay: float = 0.0
    deadline: int = 0
    next_break_at: int = 0
    inside: bool = False
    last_tag: Tag = Tag.ENTRY
    pending: TransitionRecord | None = None
    stay_started: int = 0
    response: Response | None = None
    assisted: bool = False
    history: list[tuple[int, AgentState]] = field(default_factory=list)

    @property
    def id(self) -> int:
        return self.profile.npc_id

    @property
    def shift_end(self) -> int:
        return self.profile.shift_end

    @property
    def next_event(self) -> float:
        if self.state is None:
            return self.profile.entry_time
        if self.state is AgentState.EXITED:
            return math.inf
        if self.state is AgentState.MOVING:
            return self.walk.arrival
        t = min(self.deadline, self.shift_end)
        if self.state is AgentState.WORKING and self.goal is _Goal.WORK and self.response is None:
            t = min(t, self.next_break_at)
        return t

    def position_at(self, t: int) -> tuple[float, float]:
        if self.state is AgentState.MOVING:
            return self.walk.position(t)
        return self.position


@dataclass
class ScenarioResult:
    trajectories: list[TrajectoryPoint]
    events: list[DecisionEvent]
    transitions: list[TransitionRecord]
    profiles: list[BehaviorProfile]


class Scenario:
    """One surrogate-driven day. Owns its NPCs, RNG and logs."""

    def __init__(self, config: ScenarioConfig, models: DecisionModels, layout: FacilityLayout,
                 seed: int, run_id: int = 0, profiles: list[BehaviorProfile] | None = None,
                 log_trajectories: bool = True):
        self.config = config
        self.models = models
        self.layout = layout
        self.behavior = config.behavior
        self.rng = np.random.default_rng(seed)
        self.run_id = run_id
        self.log_trajectories = log_trajectories
        if profiles is None:
            profiles = build_profiles(config.roster, layout, config.behavior, self.rng,
                                      config.schedule)
        self.npcs = [NPC(p) for p in profiles]
        self.now = config.start
        self.trigger_time = (config.trigger_minute * 60
                             if config.mode is ScenarioMode.EMERGENCY else None)
        self.emergency_active = False
        self.events: list[DecisionEvent] = []
        self.transitions: list[TransitionRecord] = []
        self.trajectories: list[TrajectoryPoint] = []
        self._entrances = sorted(layout.entrances(), key=lambda loc: loc.id)
        self._break_rooms = sorted(layout.by_category(SpaceCategory.BREAK_ROOM),
                                   key=lambda loc: loc.id)
        self._maintenance = tuple(loc.id for loc in layout.by_category(SpaceCategory.MAINTENANCE))

    # -- bookkeeping ---------------------------------------------------------

    def _set_state(self, n: NPC, state: AgentState) -> None:
        if n.state is not None and state not in _LEGAL[n.state]:
            raise RuntimeError(f"illegal transition {n.state} -> {state} for NPC {n.id}")
        n.state = state
        n.history.append((self.now, state))

    def _log(self, n: NPC, decision: str, dest: Tag | None, loc: str | None,
             stay: float | None = None) -> None:
        self.events.append(DecisionEvent(n.id, self.now // 60, decision, n.last_tag, dest, loc,
                                         stay, n.response))

    def _record(self, n: NPC, dest: Tag) -> TransitionRecord:
        rec = TransitionRecord(self.run_id, n.id, n.profile.user_class, n.last_tag, dest,
                               self.now - n.profile.entry_time)
        self.transitions.append(rec)
        return rec

    def _close_stay(self, n: NPC) -> None:
        if n.pending is not None:
            n.pending.stay_duration = self.now - n.stay_started
            n.pending = None

    def _sse(self, n: NPC) -> int:
        return self.now - n.profile.entry_time

    # -- movement --------------------------------------------------------------

    def _walk_to(self, n: NPC, dst_wp: str) -> Walk:
        if n.state is AgentState.MOVING:
            return reroute(self.layout, n.walk, self.now, dst_wp)
        return walk_between(self.layout, n.node, dst_wp, self.now)

    def _start_walk(self, n: NPC, walk: Walk, goal: _Goal, target_loc: str | None) -> None:
        n.walk = walk
        n.goal = goal
        n.location = target_loc
        n.node = None
        n.inside = True
        if n.state is not AgentState.MOVING:
            self._set_state(n, AgentState.MOVING)

    def _nearest(self, n: NPC, candidates) -> tuple:
        walks = [(self._walk_to(n, c.attached_waypoint), c) for c in candidates]
        return min(walks, key=lambda wc: (wc[0].length, wc[1].id))

    # -- decisions ---------------------------------------------------------------

    def _allowed(self, n: NPC) -> frozenset[Tag]:
        return frozenset(n.profile.tag_to_locations) | {Tag.ENTRY, Tag.END}

    def _exit(self, n: NPC, decision: str) -> None:
        self._log(n, decision, Tag.END, None)
        self._record(n, Tag.END)
        if not n.inside:
            if n.state is not AgentState.MOVING:
                self._set_state(n, AgentState.MOVING)
            self._set_state(n, AgentState.EXITED)
            return
        walk, ent = self._nearest(n, self._entrances)
        self._start_walk(n, walk, _Goal.EXIT, ent.id)

    def _take_break(self, n: NPC) -> None:
        outside = self.rng.random() < self.behavior.outside_break_prob
        walk, dest = self._nearest(n, self._entrances if outside else self._break_rooms)
        if walk.arrival >= n.shift_end:
            self._exit(n, "SHIFT_END")
            return
        if outside:
            self._log(n, "BREAK", Tag.ENTRY, dest.id)
            n.pending = self._record(n, Tag.ENTRY)
            self._start_walk(n, walk, _Goal.OUTSIDE, dest.id)
        else:
            self._log(n, "BREAK", None, dest.id)
            self._start_walk(n, walk, _Goal.BREAK_ROOM, dest.id)

    def _decide(self, n: NPC, allowed: frozenset[Tag] | None = None) -> None:
        """Next destination once a stay or break is over."""
        if n.response is not None:
            self._respond(n)
            return
        if self.now >= n.shift_end:
            self._exit(n, "SHIFT_END")
            return
        allowed = self._allowed(n) if allowed is None else allowed
        tag = self.models.next_tag(n.profile, n.last_tag, self._sse(n), self.rng, allowed)
        tag = Tag(tag)
        if tag not in allowed:
            raise SurrogateError(f"NPC {n.id}: model chose {tag.name}, allowed {sorted(t.name for t in allowed)}")
        if tag is Tag.END:
            self._exit(n, "MODEL")
            return
        if tag is Tag.ENTRY:
            walk, ent = self._nearest(n, self._entrances)
            if walk.arrival >= n.shift_end:
                self._exit(n, "SHIFT_END")
                return
            self._log(n, "MODEL", Tag.ENTRY, ent.id)
            n.pending = self._record(n, Tag.ENTRY)
            self._start_walk(n, walk, _Goal.OUTSIDE, ent.id)
            return
        locs = n.profile.tag_to_locations[tag]
        loc = self.layout.location(locs[int(self.rng.integers(len(locs)))])
        walk = self._walk_to(n, loc.attached_waypoint)
        if walk.arrival >= n.shift_end:
            self._exit(n, "SHIFT_END")
            return
        if self.config.break_overlay and walk.arrival >= n.next_break_at:
            self._take_break(n)
            return
        stay = self.models.stay_seconds(n.profile, tag, self._sse(n), self.rng)
        self._log(n, "MODEL", tag, loc.id, stay)
        n.pending = self._record(n, tag)
        n.planned_stay = stay
        self._start_walk(n, walk, _Goal.WORK, loc.id)

    # -- emergency ------------------------------------------------------------

    def trigger_emergency(self) -> None:
        self.emergency_active = True
        for n in self.npcs:
            if n.state is None or n.state is AgentState.EXITED:
                continue
            self._assign_response(n)

    def _assign_response(self, n: NPC) -> None:
        rational = self.rng.random() < n.profile.rationality
        n.response = RATIONAL_RESPONSE[n.profile.user_class] if rational else Response.SEEK_ASSISTANCE
        if n.state in (AgentState.WORKING, AgentState.ON_BREAK):
            self._close_stay(n)
        if n.state is AgentState.MOVING and n.pending is not None:
            # walk abandoned: the logged stay is zero
            n.pending.stay_duration = 0
            n.pending = None
        self._log(n, "EMERGENCY", None, None)
        self._respond(n)

    def _respond(self, n: NPC) -> None:
        if n.response is Response.SEEK_ASSISTANCE and not n.assisted:
            n.assisted = True
            helper = self._nearest_other(n)
            if helper is not None:
                wp, loc = helper
                walk = self._walk_to(n, wp)
                self._log(n, "ASSIST", None, loc)
                self._start_walk(n, walk, _Goal.ASSIST, loc)
                return
        response = n.response
        if response is Response.SEEK_ASSISTANCE:
            response = RATIONAL_RESPONSE[n.profile.user_class]
        if response is Response.EVACUATE or self.now >= n.shift_end:
            self._exit(n, "EMERGENCY_EXIT" if response is Response.EVACUATE else "SHIFT_END")
            return
        loc = self.layout.location(self._maintenance[int(self.rng.integers(len(self._maintenance)))])
        walk = self._walk_to(n, loc.attached_waypoint)
        stay = self.models.stay_seconds(n.profile, Tag.MAINTENANCE, self._sse(n), self.rng)
        self._log(n, "DUTY", Tag.MAINTENANCE, loc.id, stay)
        n.pending = self._record(n, Tag.MAINTENANCE)
        n.planned_stay = stay
        self._start_walk(n, walk, _Goal.DUTY, loc.id)

    def _nearest_other(self, n: NPC):
        here = n.position_at(self.now)
        best = None
        for other in self.npcs:
            if other is n or not other.inside or other.state in (None, AgentState.EXITED):
                continue
            pos = other.position_at(self.now)
            d = math.dist(here, pos)
            if best is None or d < best[0]:
                best = (d, other, pos)
        if best is None:
            return None
        _, other, pos = best
        if other.state is not AgentState.MOVING and other.node is not None:
            return other.node, other.location
        wp = min(self.layout.waypoints, key=lambda w: (math.dist((w.x, w.y), pos), w.id))
        return wp.id, None

    # -- event handling ---------------------------------------------------------

    def _spawn(self, n: NPC) -> None:
        ent = self.layout.location(n.profile.entrance)
        n.node = ent.attached_waypoint
        n.location = ent.id
        n.position = ent.position
        n.inside = True
        n.last_tag = Tag.ENTRY
        n.next_break_at = self.now + _minutes_s(
            sample_triangular(self.behavior.inter_break, self.rng.random()))
        if self.emergency_active:
            self._assign_response(n)
            return
        # a fresh arrival heads for work first, as ABM agents do
        self._decide(n, frozenset(n.profile.tag_to_locations))

    def _arrive(self, n: NPC) -> None:
        walk, goal = n.walk, n.goal
        n.node = walk.destination
        n.position = (self.layout.location(n.location).position if n.location
                      else walk.points[-1])
        n.walk = None
        if goal is _Goal.EXIT:
            n.inside = False
            n.node = n.location = None
            self._set_state(n, AgentState.EXITED)
        elif goal in (_Goal.WORK, _Goal.DUTY):
            n.last_tag = CATEGORY_TAG[self.layout.location(n.location).category]
            n.stay_started = self.now
            n.deadline = self.now + max(1, int(round(n.planned_stay)))
            self._set_state(n, AgentState.WORKING)
        elif goal is _Goal.ASSIST:
            n.deadline = self.now + _minutes_s(
                sample_triangular(self.behavior.break_duration, self.rng.random()))
            self._set_state(n, AgentState.ON_BREAK)
        else:
            if goal is _Goal.OUTSIDE:
                n.inside = False
                n.last_tag = Tag.ENTRY
                n.stay_started = self.now
            n.deadline = self.now + _minutes_s(
                sample_triangular(self.behavior.break_duration, self.rng.random()))
            self._set_state(n, AgentState.ON_BREAK)

    def _handle(self, n: NPC) -> None:
        now = self.now
        if n.state is None:
            self._spawn(n)
        elif n.state is AgentState.MOVING:
            self._arrive(n)
        elif n.state is AgentState.WORKING:
            self._close_stay(n)
            if now >= n.shift_end:
                self._exit(n, "SHIFT_END")
            elif (self.config.break_overlay and n.response is None
                  and now >= n.next_break_at and now < n.deadline):
                self._take_break(n)
            else:
                self._decide(n)
        elif n.state is AgentState.ON_BREAK:
            self._close_stay(n)
            if n.goal is not _Goal.ASSIST:
                n.next_break_at = now + _minutes_s(
                    sample_triangular(self.behavior.inter_break, self.rng.random()))
            if now >= n.shift_end:
                self._exit(n, "SHIFT_END")
            else:
                self._decide(n)

    def _process_tick(self) -> None:
        if self.trigger_time is not None and self.now == self.trigger_time:
            self.trigger_emergency()
        for n in self.npcs:
            while n.next_event <= self.now:
                self._handle(n)
        if self.log_trajectories and self.now % 60 == 0:
            self._sample_positions()

    def _sample_positions(self) -> None:
        minute = self.now // 60
        for n in self.npcs:
            if not n.inside or n.state is None or n.state is AgentState.EXITED:
                continue
            x, y = n.position_at(self.now)
            xn, yn = self.layout.normalize(x, y)
            loc = n.location if n.state is not AgentState.MOVING else None
            self.trajectories.append(
                TrajectoryPoint(self.run_id, n.id, n.profile.user_class, minute, x, y, xn, yn, loc)
            )

    def run(self) -> ScenarioResult:
        end = self.config.end
        while self.now < end:
            self._process_tick()
            nxt = min((n.next_event for n in self.npcs), default=math.inf)
            if self.log_trajectories:
                nxt = min(nxt, (self.now // 60 + 1) * 60)
            if self.trigger_time is not None and self.now < self.trigger_time:
                nxt = min(nxt, self.trigger_time)
            self.now = int(min(max(nxt, self.now + 1), end))
        profiles = [n.profile for n in self.npcs]
        return ScenarioResult(self.trajectories, self.events, self.transitions, profiles)


_LEGAL = {
    AgentState.MOVING: {AgentState.WORKING, AgentState.ON_BREAK, AgentState.EXITED},
    AgentState.WORKING: {AgentState.MOVING},
    AgentState.ON_BREAK: {AgentState.MOVING},
    AgentState.EXITED: set(),
}


def _minutes_s(minutes: float) -> int:
    return int(round(minutes * 60))


def run_scenario(config: ScenarioConfig, models: DecisionModels, layout: FacilityLayout,
                 seed: int | None = None, run_id: int = 0) -> ScenarioResult:
    """Full-day scenario run; deterministic given ``seed`` (defaults to ``config.seed``)."""
    seed = config.seed if seed is None else seed
    return Scenario(config, models, layout, seed, run_id=run_id).run()


def write_events(path, events: list[DecisionEvent]) -> None:
    def name(v):
        return "" if v is None else (v.name if isinstance(v, Tag) else v.value)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENTS_HEADER)
        for e in events:
            stay = "" if e.predicted_stay_s is None else repr(float(e.predicted_stay_s))
            w.writerow([e.npc_id, e.minute, e.decision, name(e.source_tag), name(e.dest_tag),
                        e.location_id or "", stay, name(e.emergency_branch)])
