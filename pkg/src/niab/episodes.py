"""Episode records, action-token conventions, and the on-disk corpus format.

A corpus file is UTF-8, one JSON record per line, extension ``.niab.jsonl``.
Record keys appear in this exact order with no extra whitespace:

    episode_id, scene, human_task_seq, robot_vocab, oracle_labels

``oracle_labels`` entries carry ``human_step_idx`` (0-based index into
``human_task_seq``) then ``best_robot_action``. Indices are 0-based
everywhere in this package.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import (
    ActionNotInVocab,
    DuplicateEpisodeId,
    LabelOutOfRange,
    MalformedRecord,
    UnknownScene,
)

TOKEN_RE = re.compile(r"^[a-z0-9]+(_[a-z0-9]+)*$")
NO_OP = "no_op"
SCENES = ("kitchen", "bedroom", "livingroom", "bathroom")
SPLITS = ("train", "val", "test")
MAX_ORACLE_LABELS = 2


def is_action_token(text: str) -> bool:
    return isinstance(text, str) and bool(TOKEN_RE.match(text))


def check_action_token(text: str) -> str:
    if not is_action_token(text):
        raise ValueError(f"invalid action token: {text!r}")
    return text


@dataclass(frozen=True)
class OracleLabel:
    """One desirable assistance: act at ``human_step_idx`` with ``best_robot_action``."""

    human_step_idx: int
    best_robot_action: str

    def to_dict(self) -> dict:
        return {
            "human_step_idx": self.human_step_idx,
            "best_robot_action": self.best_robot_action,
        }


@dataclass(frozen=True)
class Episode:
    episode_id: str
    scene: str
    human_task_seq: tuple[str, ...]
    robot_vocab: tuple[str, ...]
    oracle_labels: tuple[OracleLabel, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "human_task_seq", tuple(self.human_task_seq))
        object.__setattr__(self, "robot_vocab", tuple(self.robot_vocab))
        object.__setattr__(self, "oracle_labels", tuple(self.oracle_labels))
        self.validate()

    def validate(self) -> None:
        if not self.episode_id or not isinstance(self.episode_id, str):
            raise ValueError("episode_id must be a non-empty string")
        if self.scene not in SCENES:
            raise UnknownScene(f"unknown scene {self.scene!r}")
        if len(self.human_task_seq) < 1:
            raise ValueError(f"{self.episode_id}: human_task_seq must be non-empty")
        for tok in self.human_task_seq:
            check_action_token(tok)
        for tok in self.robot_vocab:
            check_action_token(tok)
        if self.robot_vocab.count(NO_OP) != 1:
            raise ValueError(
                f"{self.episode_id}: robot_vocab must contain {NO_OP} exactly once"
            )
        if len(set(self.robot_vocab)) != len(self.robot_vocab):
            raise ValueError(f"{self.episode_id}: robot_vocab has duplicate tokens")
        if len(self.oracle_labels) > MAX_ORACLE_LABELS:
            raise LabelOutOfRange(
                f"{self.episode_id}: at most {MAX_ORACLE_LABELS} oracle labels allowed"
            )
        seen_steps = set()
        for lab in self.oracle_labels:
            if not isinstance(lab.human_step_idx, int) or isinstance(lab.human_step_idx, bool):
                raise LabelOutOfRange(f"{self.episode_id}: human_step_idx must be int")
            if not 0 <= lab.human_step_idx < len(self.human_task_seq):
                raise LabelOutOfRange(
                    f"{self.episode_id}: human_step_idx {lab.human_step_idx} "
                    f"outside [0, {len(self.human_task_seq)})"
                )
            if lab.human_step_idx in seen_steps:
                raise LabelOutOfRange(
                    f"{self.episode_id}: overlapping oracle labels at step {lab.human_step_idx}"
                )
            seen_steps.add(lab.human_step_idx)
            if lab.best_robot_action not in self.robot_vocab:
                raise ActionNotInVocab(
                    f"{self.episode_id}: {lab.best_robot_action!r} not in robot_vocab"
                )

    @property
    def n_steps(self) -> int:
        return len(self.human_task_seq)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "scene": self.scene,
            "human_task_seq": list(self.human_task_seq),
            "robot_vocab": list(self.robot_vocab),
            "oracle_labels": [lab.to_dict() for lab in self.oracle_labels],
        }


@dataclass
class Corpus:
    episodes: list[Episode] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for ep in self.episodes:
            if ep.episode_id in seen:
                raise DuplicateEpisodeId(ep.episode_id)
            seen.add(ep.episode_id)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    def by_id(self, episode_id: str) -> Episode:
        for ep in self.episodes:
            if ep.episode_id == episode_id:
                return ep
        raise KeyError(episode_id)


_RECORD_KEYS = ["episode_id", "scene", "human_task_seq", "robot_vocab", "oracle_labels"]
_LABEL_KEYS = ["human_step_idx", "best_robot_action"]


def _episode_from_dict(rec: dict, line_no: int) -> Episode:
    if not isinstance(rec, dict):
        raise MalformedRecord(line_no, "record is not an object")
    missing = [k for k in _RECORD_KEYS if k not in rec]
    if missing:
        raise MalformedRecord(line_no, f"missing fields: {missing}")
    extra = [k for k in rec if k not in _RECORD_KEYS]
    if extra:
        raise MalformedRecord(line_no, f"unknown fields: {extra}")
    labels_raw = rec["oracle_labels"]
    if not isinstance(labels_raw, list):
        raise MalformedRecord(line_no, "oracle_labels must be an array")
    labels = []
    for lr in labels_raw:
        if not isinstance(lr, dict) or set(lr) != set(_LABEL_KEYS):
            raise MalformedRecord(line_no, f"bad oracle label object: {lr!r}")
        labels.append(OracleLabel(lr["human_step_idx"], lr["best_robot_action"]))
    if not isinstance(rec["human_task_seq"], list) or not isinstance(rec["robot_vocab"], list):
        raise MalformedRecord(line_no, "human_task_seq and robot_vocab must be arrays")
    try:
        return Episode(
            episode_id=rec["episode_id"],
            scene=rec["scene"],
            human_task_seq=rec["human_task_seq"],
            robot_vocab=rec["robot_vocab"],
            oracle_labels=labels,
        )
    except (UnknownScene, LabelOutOfRange, ActionNotInVocab):
        raise
    except (ValueError, TypeError) as exc:
        raise MalformedRecord(line_no, str(exc)) from exc


def parse_corpus(data: bytes, split: str = "train") -> Corpus:
    """Parse a line-delimited corpus byte stream into a validated Corpus.

    Raises MalformedRecord, UnknownScene, DuplicateEpisodeId, LabelOutOfRange
    or ActionNotInVocab on the first offending record.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    episodes = []
    for line_no, raw in enumerate(data.split(b"\n"), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
        episodes.append(_episode_from_dict(rec, line_no))
    return Corpus(episodes=episodes, split=split)


def serialize_corpus(corpus: Corpus) -> bytes:
    """Canonical byte serialization: fixed key order, no extra whitespace,
    one record per line. ``parse_corpus(serialize_corpus(c))`` round-trips.
    """
    lines = []
    for ep in corpus.episodes:
        lines.append(json.dumps(ep.to_dict(), separators=(",", ":"), ensure_ascii=False))
    out = "\n".join(lines)
    if lines:
        out += "\n"
    return out.encode("utf-8")


def load_corpus(path, split: str = "train") -> Corpus:
    with open(path, "rb") as fh:
        return parse_corpus(fh.read(), split=split)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_corpus(corpus))
