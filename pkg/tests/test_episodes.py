import json

import pytest

from niab.episodes import (
    Corpus,
    Episode,
    OracleLabel,
    parse_corpus,
    serialize_corpus,
)
from niab.errors import (
    ActionNotInVocab,
    DuplicateEpisodeId,
    LabelOutOfRange,
    MalformedRecord,
    UnknownScene,
)

from conftest import make_episode

# the canonical six-step preparation episode used throughout the docs
EXAMPLE_RECORD = {
    "episode_id": "kitchen-0002",
    "scene": "kitchen",
    "human_task_seq": [
        "find_tomato",
        "bring_tomato_to_sink",
        "wash_tomato",
        "bring_tomato_to_counter",
        "bring_knife_to_counter",
        "cut_tomato",
    ],
    "robot_vocab": ["no_op", "find_knife", "clean_countertop", "bring_knife_to_countertop"],
    "oracle_labels": [{"human_step_idx": 2, "best_robot_action": "bring_knife_to_countertop"}],
}


def canonical_bytes(record: dict) -> bytes:
    return (json.dumps(record, separators=(",", ":")) + "\n").encode()


class TestParse:
    def test_example_round_trips_byte_identically(self):
        raw = canonical_bytes(EXAMPLE_RECORD)
        corpus = parse_corpus(raw)
        assert len(corpus) == 1
        ep = corpus.episodes[0]
        assert ep.human_task_seq[2] == "wash_tomato"
        assert ep.oracle_labels[0].human_step_idx == 2
        assert serialize_corpus(corpus) == raw

    def test_zero_label_record_parses(self):
        rec = dict(EXAMPLE_RECORD, oracle_labels=[])
        corpus = parse_corpus(canonical_bytes(rec))
        assert corpus.episodes[0].oracle_labels == ()

    def test_label_index_equal_to_length_rejected(self):
        rec = dict(
            EXAMPLE_RECORD,
            oracle_labels=[{"human_step_idx": 6, "best_robot_action": "bring_knife_to_countertop"}],
        )
        with pytest.raises(LabelOutOfRange):
            parse_corpus(canonical_bytes(rec))

    def test_unknown_scene(self):
        rec = dict(EXAMPLE_RECORD, scene="garage")
        with pytest.raises(UnknownScene):
            parse_corpus(canonical_bytes(rec))

    def test_action_not_in_vocab(self):
        rec = dict(
            EXAMPLE_RECORD,
            oracle_labels=[{"human_step_idx": 2, "best_robot_action": "toggle_stove"}],
        )
        with pytest.raises(ActionNotInVocab):
            parse_corpus(canonical_bytes(rec))

    def test_duplicate_episode_id(self):
        raw = canonical_bytes(EXAMPLE_RECORD) + canonical_bytes(EXAMPLE_RECORD)
        with pytest.raises(DuplicateEpisodeId):
            parse_corpus(raw)

    def test_malformed_json_reports_line(self):
        raw = canonical_bytes(EXAMPLE_RECORD) + b"{not json}\n"
        with pytest.raises(MalformedRecord) as exc:
            parse_corpus(raw)
        assert exc.value.line_no == 2

    def test_missing_and_extra_fields_rejected(self):
        rec = {k: v for k, v in EXAMPLE_RECORD.items() if k != "scene"}
        with pytest.raises(MalformedRecord):
            parse_corpus(canonical_bytes(rec))
        rec = dict(EXAMPLE_RECORD, bogus=1)
        with pytest.raises(MalformedRecord):
            parse_corpus(canonical_bytes(rec))

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda r: r.update(robot_vocab=r["robot_vocab"] + ["find_knife"]),  # duplicate token
            lambda r: r.update(robot_vocab=[v for v in r["robot_vocab"] if v != "no_op"]),
            lambda r: r.update(human_task_seq=[]),
            lambda r: r.update(human_task_seq=r["human_task_seq"][:2] + ["Bad Token"]),
            lambda r: r.update(
                oracle_labels=[
                    {"human_step_idx": -1, "best_robot_action": "bring_knife_to_countertop"}
                ]
            ),
            lambda r: r.update(
                oracle_labels=[
                    {"human_step_idx": 1, "best_robot_action": "bring_knife_to_countertop"},
                    {"human_step_idx": 1, "best_robot_action": "find_knife"},
                ]
            ),
            lambda r: r.update(
                oracle_labels=[
                    {"human_step_idx": s, "best_robot_action": "find_knife"} for s in (0, 1, 2)
                ]
            ),
        ],
        ids=[
            "dup-vocab-token", "no-noop", "empty-seq", "bad-token",
            "negative-index", "overlapping-labels", "three-labels",
        ],
    )
    def test_rejection_completeness(self, mutate):
        rec = json.loads(json.dumps(EXAMPLE_RECORD))
        mutate(rec)
        with pytest.raises(Exception) as exc:
            parse_corpus(canonical_bytes(rec))
        assert isinstance(
            exc.value,
            (MalformedRecord, UnknownScene, LabelOutOfRange, ActionNotInVocab, DuplicateEpisodeId),
        )


class TestSerialize:
    def test_empty_corpus_serializes_to_nothing(self):
        assert serialize_corpus(Corpus([], split="train")) == b""

    def test_round_trip_structural_equality(self, small_corpus):
        blob = serialize_corpus(small_corpus)
        again = parse_corpus(blob, split=small_corpus.split)
        assert again.episodes == small_corpus.episodes
        assert serialize_corpus(again) == blob

    def test_label_order_is_semantic(self):
        ep1 = make_episode(
            human_task_seq=["find_tomato", "wash_tomato", "cut_tomato", "clean_sink"],
            robot_vocab=["no_op", "bring_knife_to_countertop", "find_knife"],
            oracle_labels=[
                OracleLabel(0, "bring_knife_to_countertop"),
                OracleLabel(2, "find_knife"),
            ],
        )
        ep2 = make_episode(
            human_task_seq=ep1.human_task_seq,
            robot_vocab=ep1.robot_vocab,
            oracle_labels=list(reversed(ep1.oracle_labels)),
        )
        b1 = serialize_corpus(Corpus([ep1]))
        b2 = serialize_corpus(Corpus([ep2]))
        assert b1 != b2

    def test_fixed_key_order(self):
        blob = serialize_corpus(Corpus([make_episode()]))
        rec = blob.decode().strip()
        keys = list(json.loads(rec).keys())
        assert keys == ["episode_id", "scene", "human_task_seq", "robot_vocab", "oracle_labels"]
        assert b" " not in blob  # no extra whitespace in canonical form


class TestEpisodeInvariants:
    def test_noop_required_exactly_once(self):
        with pytest.raises(ValueError):
            make_episode(robot_vocab=["no_op", "no_op", "find_knife"])

    def test_two_labels_allowed(self):
        ep = make_episode(
            human_task_seq=["find_tomato", "wash_tomato", "cut_tomato"],
            robot_vocab=["no_op", "find_knife", "clean_sink"],
            oracle_labels=[OracleLabel(0, "find_knife"), OracleLabel(2, "clean_sink")],
        )
        assert len(ep.oracle_labels) == 2
