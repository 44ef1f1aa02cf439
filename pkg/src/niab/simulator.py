"""Deterministic text-level world simulator.

Atomic action tokens expand into primitive steps (``move_to``, ``pickup``,
``put``, ``toggle``, ``apply``) against a world of object locations, boolean
object flags, and agent positions. Every primitive costs exactly one step,
so HSS is integer-valued.

Execution protocol for assisted runs:

* the robot's expansion runs to completion in the inter-step window before
  the predicted human step; robot primitives are logged but never counted
  in ``H_assist``;
* a human atomic step whose postcondition already holds is skipped at zero
  cost (skip semantics);
* the robot may not pick up an object the human currently holds and may not
  put onto the receptacle targeted by the human's imminent step; on conflict
  the whole robot action is abandoned and logged;
* a robot that would end its window holding an object parks it at its
  current location, so it never retains a resource across windows.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources

from .episodes import NO_OP, Episode
from .errors import ExecutionFault, NoExpansion, PreconditionUnsatisfiable
from .vocab import SceneVocabulary

HUMAN = "agent_human"
ROBOT = "agent_robot"
DOORWAY = "doorway"
FLAGS = ("washed", "sliced", "toasted", "on", "clean", "open")
VERB_FLAG = {"wash": "washed", "slice": "sliced", "toast": "toasted", "clean": "clean"}


@dataclass(frozen=True)
class PrimitiveStep:
    kind: str  # move_to | pickup | put | toggle | apply
    args: tuple[str, ...]

    @property
    def sig(self) -> str:
        return f"{self.kind}({','.join(self.args)})"

    def __repr__(self):
        return self.sig


def _prim(kind: str, *args: str) -> PrimitiveStep:
    return PrimitiveStep(kind, tuple(args))


@dataclass
class WorldState:
    """Object locations, boolean flags, and agent positions.

    ``places`` are the immovable location names (receptacles, fixtures, and
    the doorway); any place can hold any number of objects. Held objects
    have location ``agent_human`` / ``agent_robot``.
    """

    object_locations: dict[str, str]
    object_flags: dict[str, set[str]]
    agent_pos: dict[str, str]
    places: frozenset[str]

    def clone(self) -> "WorldState":
        return WorldState(
            object_locations=dict(self.object_locations),
            object_flags={k: set(v) for k, v in self.object_flags.items()},
            agent_pos=dict(self.agent_pos),
            places=self.places,
        )

    def holding(self, agent: str) -> str | None:
        for obj, loc in self.object_locations.items():
            if loc == agent:
                return obj
        return None

    def location_of(self, obj: str) -> str:
        """Physical place of an object: its own name for immovables,
        the holder's position for held objects."""
        if obj in self.places:
            return obj
        loc = self.object_locations[obj]
        if loc in (HUMAN, ROBOT):
            return self.agent_pos[loc]
        return loc

    def has_flag(self, obj: str, flag: str) -> bool:
        return flag in self.object_flags.get(obj, set())


_LAYOUTS = None
_EXPANSIONS_RAW = None


def _load_data(name: str) -> dict:
    with resources.files("niab").joinpath(f"data/sim/{name}").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def default_layouts() -> dict:
    global _LAYOUTS
    if _LAYOUTS is None:
        _LAYOUTS = _load_data("layouts.json")
    return _LAYOUTS


def initial_world(scene: str, vocab: SceneVocabulary, layouts: dict | None = None) -> WorldState:
    """The canonical deterministic starting world for a scene."""
    layouts = layouts if layouts is not None else default_layouts()
    layout = layouts[scene]
    places = {DOORWAY}
    for obj in vocab.objects:
        if not obj.pickupable:
            places.add(obj.name)
    locations = {}
    for obj in vocab.objects:
        if obj.pickupable:
            place = layout["placements"].get(obj.name)
            if place is None or place not in places:
                raise ValueError(f"{scene}: no valid placement for {obj.name!r}")
            locations[obj.name] = place
        else:
            locations[obj.name] = obj.name
    start = layout.get("agent_start", DOORWAY)
    return WorldState(
        object_locations=locations,
        object_flags={o.name: set() for o in vocab.objects},
        agent_pos={HUMAN: start, ROBOT: start},
        places=frozenset(places),
    )


# -- token matching ----------------------------------------------------------

_PREFIX_TEMPLATES = [
    ("find_", "find_{x}"),
    ("wash_", "wash_{x}"),
    ("cut_", "cut_{x}"),
    ("toggle_", "toggle_{x}"),
    ("toast_", "toast_{x}"),
    ("clean_", "clean_{y}"),
]


def match_token(token: str) -> tuple[str, dict[str, str]] | None:
    """Map an action token to (template, slot bindings); None if unmatched."""
    if token.startswith("bring_"):
        body = token[len("bring_"):]
        if "_to_" in body:
            x, y = body.split("_to_", 1)
            if x and y:
                return "bring_{x}_to_{y}", {"x": x, "y": y}
        return None
    for prefix, template in _PREFIX_TEMPLATES:
        if token.startswith(prefix) and len(token) > len(prefix):
            slot = "y" if template == "clean_{y}" else "x"
            return template, {slot: token[len(prefix):]}
    return None


@dataclass
class ExpansionTable:
    """Template recipes plus pre/postcondition predicates."""

    entries: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "ExpansionTable":
        global _EXPANSIONS_RAW
        if _EXPANSIONS_RAW is None:
            _EXPANSIONS_RAW = _load_data("expansions.json")
        return cls(entries={e["template"]: e for e in _EXPANSIONS_RAW["entries"]})

    @classmethod
    def from_file(cls, path) -> "ExpansionTable":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(entries={e["template"]: e for e in raw["entries"]})

    def entry_for(self, token: str) -> tuple[dict, dict[str, str]]:
        m = match_token(token)
        if m is None:
            raise NoExpansion(f"no expansion for token {token!r}")
        template, binds = m
        entry = self.entries.get(template)
        if entry is None:
            raise NoExpansion(f"no table entry for template {template!r}")
        return entry, binds

    # -- postconditions -------------------------------------------------

    def postcondition(self, token: str) -> tuple:
        entry, binds = self.entry_for(token)
        kind, *args = entry["post"]
        return (kind, *[a.format(**binds) for a in args])

    def goal(self, token: str) -> tuple:
        """Goal predicate for a final step: its postcondition, strengthened
        for ``cut`` to require the object at rest on a surface."""
        entry, binds = self.entry_for(token)
        kind, *args = entry.get("goal", entry["post"])
        return (kind, *[a.format(**binds) for a in args])

    def post_holds(self, token: str, world: WorldState) -> bool:
        post = self.postcondition(token)
        return _eval_post(post, world)

    def put_target(self, token: str) -> str | None:
        """Receptacle a step explicitly targets (bring destination), else None."""
        m = match_token(token)
        if m and m[0] == "bring_{x}_to_{y}":
            return m[1]["y"]
        return None

    # -- expansion -------------------------------------------------------

    def expand(self, token: str, world: WorldState, agent: str = HUMAN) -> list[PrimitiveStep]:
        """State-sensitive primitive expansion; does not mutate ``world``."""
        return self._run_recipe(token, world.clone(), agent)

    def expand_and_apply(self, token: str, world: WorldState, agent: str = HUMAN) -> list[PrimitiveStep]:
        """Expand and execute against ``world`` in one pass."""
        return self._run_recipe(token, world, agent)

    def _run_recipe(self, token: str, world: WorldState, agent: str) -> list[PrimitiveStep]:
        entry, binds = self.entry_for(token)
        prims: list[PrimitiveStep] = []

        def emit(p: PrimitiveStep):
            _apply_primitive(p, world, agent)
            prims.append(p)

        def goto(place: str):
            if place not in world.places:
                raise PreconditionUnsatisfiable(f"{token}: unknown place {place!r}")
            if world.agent_pos[agent] != place:
                emit(_prim("move_to", place))

        def goto_obj(obj: str):
            if obj not in world.object_locations:
                raise PreconditionUnsatisfiable(f"{token}: unknown object {obj!r}")
            goto(world.location_of(obj))

        def stash_held():
            held = world.holding(agent)
            if held is not None:
                emit(_prim("put", held, world.agent_pos[agent]))

        def acquire(obj: str):
            if obj not in world.object_locations:
                raise PreconditionUnsatisfiable(f"{token}: unknown object {obj!r}")
            loc = world.object_locations[obj]
            if loc == agent:
                return
            other = ROBOT if agent == HUMAN else HUMAN
            if loc == other:
                raise PreconditionUnsatisfiable(f"{token}: {obj!r} held by the other agent")
            if obj in world.places:
                raise PreconditionUnsatisfiable(f"{token}: {obj!r} is immovable")
            stash_held()
            goto(loc)
            emit(_prim("pickup", obj))

        for op in entry["recipe"]:
            name, *raw = op
            args = [a.format(**binds) for a in raw]
            if name == "goto":
                goto(args[0])
            elif name == "goto_obj":
                goto_obj(args[0])
            elif name == "acquire":
                acquire(args[0])
            elif name == "stash":
                if world.holding(agent) == args[0]:
                    stash_held()
            elif name == "put":
                goto(args[1])
                emit(_prim("put", args[0], args[1]))
            elif name == "toggle":
                goto_obj(args[0])
                emit(_prim("toggle", args[0]))
            elif name == "apply":
                verb, obj = args
                if verb == "slice" and not _tool_present(world, "knife", obj):
                    raise PreconditionUnsatisfiable(f"{token}: no knife at {obj!r}")
                emit(_prim("apply", verb, obj))
            elif name == "ensure_tool":
                tool, target = args
                if tool not in world.object_locations:
                    raise PreconditionUnsatisfiable(f"{token}: scene has no {tool!r}")
                if target not in world.object_locations:
                    raise PreconditionUnsatisfiable(f"{token}: unknown object {target!r}")
                dest = world.location_of(target)
                if world.location_of(tool) != dest or world.object_locations[tool] in (HUMAN, ROBOT):
                    acquire(tool)
                    goto(dest)
                    emit(_prim("put", tool, dest))
            else:
                raise NoExpansion(f"unknown recipe op {name!r}")
        return prims


def _tool_present(world: WorldState, tool: str, target: str) -> bool:
    if tool not in world.object_locations:
        return False
    if world.object_locations[tool] in (HUMAN, ROBOT):
        return False
    return world.location_of(tool) == world.location_of(target)


def _apply_primitive(p: PrimitiveStep, world: WorldState, agent: str) -> None:
    kind, args = p.kind, p.args
    if kind == "move_to":
        world.agent_pos[agent] = args[0]
    elif kind == "pickup":
        obj = args[0]
        if world.object_locations.get(obj) in (HUMAN, ROBOT):
            raise PreconditionUnsatisfiable(f"pickup({obj}): already held")
        if world.location_of(obj) != world.agent_pos[agent]:
            raise PreconditionUnsatisfiable(f"pickup({obj}): not at object")
        if world.holding(agent) is not None:
            raise PreconditionUnsatisfiable(f"pickup({obj}): hand not empty")
        world.object_locations[obj] = agent
    elif kind == "put":
        obj, place = args
        if world.object_locations.get(obj) != agent:
            raise PreconditionUnsatisfiable(f"put({obj}): not holding")
        if world.agent_pos[agent] != place:
            raise PreconditionUnsatisfiable(f"put({obj},{place}): not at place")
        world.object_locations[obj] = place
    elif kind == "toggle":
        obj = args[0]
        flags = world.object_flags.setdefault(obj, set())
        flags.symmetric_difference_update({"on"})
    elif kind == "apply":
        verb, obj = args
        flag = VERB_FLAG.get(verb)
        if flag is None:
            raise PreconditionUnsatisfiable(f"apply: unknown verb {verb!r}")
        world.object_flags.setdefault(obj, set()).add(flag)
    else:
        raise PreconditionUnsatisfiable(f"unknown primitive {kind!r}")


def _eval_post(post: tuple, world: WorldState) -> bool:
    kind = post[0]
    if kind == "obj_at":
        _, obj, place = post
        return obj in world.object_locations and world.object_locations[obj] == place
    if kind == "flag":
        _, obj, flag = post
        return world.has_flag(obj, flag)
    if kind == "flag_resting":
        _, obj, flag = post
        return world.has_flag(obj, flag) and world.object_locations.get(obj) not in (HUMAN, ROBOT)
    if kind == "agent_at_obj":
        _, obj = post
        if obj not in world.object_locations:
            return False
        return world.agent_pos[HUMAN] == world.location_of(obj)
    raise ValueError(f"unknown postcondition kind {kind!r}")


# -- runs ---------------------------------------------------------------------

@dataclass
class TraceEntry:
    step_idx: int  # human atomic step index the primitive belongs to
    prim: PrimitiveStep

    def to_list(self) -> list:
        return [self.step_idx, self.prim.sig]


@dataclass
class RunReport:
    episode_id: str
    h_human: int
    h_assist: int
    hss: int
    success: bool
    human_trace: list[TraceEntry]
    robot_trace: list[TraceEntry]
    prediction: tuple[int, str] | None
    skipped_steps: list[int]
    robot_abandoned: str | None = None

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "h_human": self.h_human,
            "h_assist": self.h_assist,
            "hss": self.hss,
            "success": self.success,
            "prediction": list(self.prediction) if self.prediction else None,
            "skipped_steps": self.skipped_steps,
            "robot_abandoned": self.robot_abandoned,
            "human_trace": [t.to_list() for t in self.human_trace],
            "robot_trace": [t.to_list() for t in self.robot_trace],
        }


def _plan_robot_action(
    action: str, world: WorldState, table: ExpansionTable, imminent_token: str
) -> tuple[list[PrimitiveStep] | None, str | None]:
    """Robot expansion for its window, or (None, reason) when abandoned."""
    try:
        probe = world.clone()
        prims = table.expand_and_apply(action, probe, agent=ROBOT)
        held = probe.holding(ROBOT)
        if held is not None:
            park = _prim("put", held, probe.agent_pos[ROBOT])
            _apply_primitive(park, probe, ROBOT)
            prims = prims + [park]
    except (NoExpansion, PreconditionUnsatisfiable) as exc:
        return None, f"infeasible: {exc}"
    human_target = table.put_target(imminent_token)
    held_by_human = world.holding(HUMAN)
    for p in prims:
        if p.kind == "pickup" and p.args[0] == held_by_human:
            return None, f"conflict: human holds {held_by_human}"
        if p.kind == "put" and human_target is not None and p.args[1] == human_target:
            return None, f"conflict: human step targets {human_target}"
    return prims, None


def _simulate(
    episode: Episode,
    world0: WorldState,
    table: ExpansionTable,
    prediction: tuple[int, str] | None,
) -> tuple[list[TraceEntry], list[TraceEntry], list[int], bool, str | None]:
    world = world0.clone()
    human_trace: list[TraceEntry] = []
    robot_trace: list[TraceEntry] = []
    skipped: list[int] = []
    abandoned: str | None = None

    for i, token in enumerate(episode.human_task_seq):
        if prediction is not None and prediction[0] == i and prediction[1] != NO_OP:
            prims, reason = _plan_robot_action(prediction[1], world, table, token)
            if prims is None:
                abandoned = reason
            else:
                for p in prims:
                    _apply_primitive(p, world, ROBOT)
                    robot_trace.append(TraceEntry(i, p))
        try:
            if table.post_holds(token, world):
                skipped.append(i)
                continue
            prims = table.expand_and_apply(token, world, agent=HUMAN)
        except (NoExpansion, PreconditionUnsatisfiable) as exc:
            raise ExecutionFault(i, str(exc)) from exc
        for p in prims:
            human_trace.append(TraceEntry(i, p))

    success = check_success(episode, world, table)
    return human_trace, robot_trace, skipped, success, abandoned


def run_unassisted(episode: Episode, world0: WorldState, table: ExpansionTable) -> RunReport:
    human_trace, robot_trace, skipped, success, _ = _simulate(episode, world0, table, None)
    n = len(human_trace)
    return RunReport(
        episode_id=episode.episode_id,
        h_human=n,
        h_assist=n,
        hss=0,
        success=success,
        human_trace=human_trace,
        robot_trace=robot_trace,
        prediction=None,
        skipped_steps=skipped,
    )


def run_assisted(
    episode: Episode,
    world0: WorldState,
    table: ExpansionTable,
    prediction: tuple[int, str],
) -> RunReport:
    step, action = prediction
    if action not in episode.robot_vocab:
        raise PreconditionUnsatisfiable(f"{action!r} not in robot_vocab")
    if not 0 <= step < episode.n_steps:
        raise PreconditionUnsatisfiable(f"prediction step {step} out of range")
    baseline, _, _, _, _ = _simulate(episode, world0, table, None)
    human_trace, robot_trace, skipped, success, abandoned = _simulate(
        episode, world0, table, (step, action)
    )
    h_human = len(baseline)
    h_assist = len(human_trace)
    return RunReport(
        episode_id=episode.episode_id,
        h_human=h_human,
        h_assist=h_assist,
        hss=h_human - h_assist,
        success=success,
        human_trace=human_trace,
        robot_trace=robot_trace,
        prediction=(step, action),
        skipped_steps=skipped,
        robot_abandoned=abandoned,
    )


def check_success(episode: Episode, world: WorldState, table: ExpansionTable) -> bool:
    """Goal predicate: the final atomic step's goal condition holds."""
    return _eval_post(goal_predicate(episode, table), world)


def goal_predicate(episode: Episode, table: ExpansionTable) -> tuple:
    return table.goal(episode.human_task_seq[-1])
