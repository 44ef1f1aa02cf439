import pytest

from niab.episodes import Episode, OracleLabel
from niab.errors import ExecutionFault, NoExpansion, PreconditionUnsatisfiable
from niab.simulator import (
    HUMAN,
    ROBOT,
    ExpansionTable,
    check_success,
    initial_world,
    match_token,
    run_assisted,
    run_unassisted,
)

from conftest import make_episode


@pytest.fixture()
def kitchen(vocabs):
    return initial_world("kitchen", vocabs["kitchen"])


class TestExpansion:
    def test_bring_from_far_is_four_primitives(self, kitchen, table):
        prims = table.expand("bring_knife_to_countertop", kitchen)
        assert [p.sig for p in prims] == [
            "move_to(dish_rack)",
            "pickup(knife)",
            "move_to(countertop)",
            "put(knife,countertop)",
        ]

    def test_wash_while_holding_at_sink_is_one_primitive(self, kitchen, table):
        kitchen.object_locations["tomato"] = HUMAN
        kitchen.agent_pos[HUMAN] = "sink"
        prims = table.expand("wash_tomato", kitchen)
        assert [p.sig for p in prims] == ["apply(wash,tomato)"]

    def test_cut_without_any_knife_is_unsatisfiable(self, kitchen, table):
        del kitchen.object_locations["knife"]
        with pytest.raises(PreconditionUnsatisfiable):
            table.expand("cut_tomato", kitchen)

    def test_cut_fetches_knife_when_missing(self, kitchen, table):
        kitchen.object_locations["tomato"] = "countertop"
        prims = table.expand("cut_tomato", kitchen)
        assert [p.sig for p in prims] == [
            "move_to(dish_rack)",
            "pickup(knife)",
            "move_to(countertop)",
            "put(knife,countertop)",
            "apply(slice,tomato)",
        ]

    def test_expansion_is_pure(self, kitchen, table):
        before = kitchen.clone()
        table.expand("bring_knife_to_countertop", kitchen)
        assert kitchen.object_locations == before.object_locations
        assert kitchen.agent_pos == before.agent_pos

    def test_unknown_token_has_no_expansion(self, kitchen, table):
        with pytest.raises(NoExpansion):
            table.expand("juggle_tomato", kitchen)
        assert match_token("juggle_tomato") is None
        assert match_token("bring_knife_to_countertop") == (
            "bring_{x}_to_{y}",
            {"x": "knife", "y": "countertop"},
        )


# the six-step preparation sequence used in the corpus format docs,
# spelled with this package's kitchen vocabulary
TOMATO_SEQ = [
    "find_tomato",
    "bring_tomato_to_sink",
    "wash_tomato",
    "bring_tomato_to_countertop",
    "bring_knife_to_countertop",
    "cut_tomato",
]


def tomato_episode(**kw):
    base = dict(
        episode_id="kitchen-tomato",
        scene="kitchen",
        human_task_seq=TOMATO_SEQ,
        robot_vocab=["no_op", "bring_knife_to_countertop", "bring_knife_to_cabinet", "clean_stove"],
        oracle_labels=[OracleLabel(2, "bring_knife_to_countertop")],
    )
    base.update(kw)
    return Episode(**base)


class TestRuns:
    def test_unassisted_counts_match_trace_recount(self, kitchen, table):
        ep = tomato_episode()
        rep = run_unassisted(ep, kitchen, table)
        # independent recount: walk the trace and count primitives per step
        per_step = {}
        for entry in rep.human_trace:
            per_step[entry.step_idx] = per_step.get(entry.step_idx, 0) + 1
        assert sum(per_step.values()) == rep.h_human
        assert rep.h_assist == rep.h_human
        assert rep.hss == 0
        assert rep.success
        # hand-walked expansion sizes for the canonical start world:
        # find(1: move to fridge); bring to sink(3: pickup, move, put);
        # wash(2: pickup, apply); bring to countertop(2: still holding, so
        # move + put); bring knife(4: move, pickup, move, put); cut(1: apply)
        assert [per_step[i] for i in range(6)] == [1, 3, 2, 2, 4, 1]
        assert rep.h_human == 13

    def test_runs_are_deterministic(self, kitchen, table):
        ep = tomato_episode()
        r1 = run_unassisted(ep, kitchen, table)
        r2 = run_unassisted(ep, kitchen, table)
        assert [t.to_list() for t in r1.human_trace] == [t.to_list() for t in r2.human_trace]
        assert r1.to_dict() == r2.to_dict()

    def test_no_op_is_trace_identical_to_unassisted(self, kitchen, table):
        ep = tomato_episode()
        base = run_unassisted(ep, kitchen, table)
        rep = run_assisted(ep, kitchen, table, (3, "no_op"))
        assert [t.to_list() for t in rep.human_trace] == [t.to_list() for t in base.human_trace]
        assert rep.hss == 0
        assert rep.robot_trace == []

    def test_oracle_assistance_saves_the_knife_fetch(self, kitchen, table):
        ep = tomato_episode()
        rep = run_assisted(ep, kitchen, table, (2, "bring_knife_to_countertop"))
        assert rep.robot_abandoned is None
        assert rep.skipped_steps == [4]
        assert rep.hss == 4  # the whole four-primitive knife fetch is skipped
        assert rep.success
        # robot primitives never count toward human effort
        assert rep.h_assist == rep.h_human - 4
        assert len(rep.robot_trace) == 4

    def test_late_oracle_action_conflicts_and_is_abandoned(self, kitchen, table):
        # window before step 4: the imminent human step targets the same
        # receptacle the robot would put onto
        ep = tomato_episode()
        rep = run_assisted(ep, kitchen, table, (4, "bring_knife_to_countertop"))
        assert rep.robot_abandoned is not None
        assert rep.hss == 0
        assert rep.success

    def test_harmful_action_yields_negative_hss(self, kitchen, table):
        # the robot moves the knife away right before cut_tomato: the human
        # already placed it on the countertop at step 4 and must re-fetch
        ep = tomato_episode()
        rep = run_assisted(ep, kitchen, table, (5, "bring_knife_to_cabinet"))
        assert rep.robot_abandoned is None
        assert rep.hss < 0
        assert rep.success  # the human recovers; the task still completes

    def test_robot_parks_held_object_at_window_end(self, vocabs, table):
        world = initial_world("kitchen", vocabs["kitchen"])
        ep = tomato_episode(
            robot_vocab=["no_op", "wash_plate"],
            oracle_labels=[],
        )
        rep = run_assisted(ep, world, table, (0, "wash_plate"))
        sigs = [t.prim.sig for t in rep.robot_trace]
        assert sigs[-1] == "put(plate,sink)"  # never retains a resource

    def test_robot_infeasible_action_is_abandoned_not_fatal(self, vocabs, table):
        world = initial_world("kitchen", vocabs["kitchen"])
        world.object_locations["plate"] = HUMAN  # human is holding the plate
        ep = tomato_episode(robot_vocab=["no_op", "wash_plate"], oracle_labels=[])
        rep = run_assisted(ep, world, table, (0, "wash_plate"))
        assert rep.robot_abandoned is not None
        assert rep.hss <= 0

    def test_human_step_failure_raises_execution_fault(self, vocabs, table):
        world = initial_world("kitchen", vocabs["kitchen"])
        del world.object_locations["knife"]
        ep = tomato_episode(robot_vocab=["no_op"], oracle_labels=[])
        with pytest.raises(ExecutionFault) as exc:
            run_unassisted(ep, world, table)
        assert exc.value.step_idx == 4 or exc.value.step_idx == 5


class TestSuccess:
    def test_cut_goal_requires_sliced_on_a_surface(self, kitchen, table):
        ep = tomato_episode()
        kitchen.object_flags["tomato"].add("sliced")
        kitchen.object_locations["tomato"] = "countertop"
        assert check_success(ep, kitchen, table)
        kitchen.object_locations["tomato"] = HUMAN
        assert not check_success(ep, kitchen, table)

    def test_unsliced_tomato_fails_goal(self, kitchen, table):
        ep = tomato_episode()
        assert not check_success(ep, kitchen, table)

    def test_every_unassisted_generated_run_succeeds(self, small_corpus, vocabs, table):
        for ep in small_corpus:
            world = initial_world(ep.scene, vocabs[ep.scene])
            rep = run_unassisted(ep, world, table)
            assert rep.success, ep.episode_id


class TestAccountingInvariants:
    def test_hss_identity_and_non_intrusion_on_oracle_replays(self, small_corpus, vocabs, table):
        for ep in small_corpus:
            world = initial_world(ep.scene, vocabs[ep.scene])
            base = run_unassisted(ep, world, table)
            base_sigs = [t.prim.sig for t in base.human_trace]
            for lab in ep.oracle_labels:
                rep = run_assisted(ep, world, table, (lab.human_step_idx, lab.best_robot_action))
                # recount from traces, independently of the report fields
                assert rep.hss == len(base.human_trace) - len(rep.human_trace)
                assert rep.h_assist == len(rep.human_trace)
                # subsequence-with-skips: robot never perturbs a human primitive
                it = iter(base_sigs)
                assert all(
                    any(s == f for f in it) for s in [t.prim.sig for t in rep.human_trace]
                ), ep.episode_id

    def test_robot_primitives_never_increment_h_assist(self, small_corpus, vocabs, table):
        labeled = [e for e in small_corpus if e.oracle_labels][:10]
        for ep in labeled:
            world = initial_world(ep.scene, vocabs[ep.scene])
            lab = ep.oracle_labels[0]
            rep = run_assisted(ep, world, table, (lab.human_step_idx, lab.best_robot_action))
            assert rep.robot_trace  # the robot did act
            assert rep.h_assist == len(rep.human_trace)
