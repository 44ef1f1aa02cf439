"""Seeded procedural corpus generation with causally-constructed oracle labels.

Each labeled episode plants a helper-dependency: a human sub-chain (for
example ``bring_knife_to_countertop`` preceding ``cut_tomato``) whose effect
a single robot action can pre-satisfy. The oracle action is that robot
action; the oracle step is the latest step at or before the dependent step
whose window the robot can use without a resource conflict (for a robot
``bring`` targeting R, windows in front of human steps that also target R
are conflicted). Distractor actions never move or re-flag any object a
human step references, so only the planted action can change the human's
trace.

Every generated episode is verified by replay before it is emitted:
the unassisted run must succeed with no skipped steps, and each label's
assisted run must be a subsequence-with-skips of the unassisted trace with
HSS >= 1 and success.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .episodes import NO_OP, SCENES, Corpus, Episode, OracleLabel
from .errors import EmptyStratum, VocabTooSmall
from .simulator import (
    ExpansionTable,
    RunReport,
    initial_world,
    match_token,
    run_assisted,
    run_unassisted,
)
from .vocab import SceneVocabulary

_MAX_ATTEMPTS = 64


@dataclass(frozen=True)
class GenConfig:
    seed: int
    n_episodes: int
    label_mix: tuple[float, float, float] = (0.75, 0.20, 0.05)  # one, two, zero labels
    min_steps: int = 4
    max_steps: int = 12
    vocab_size_range: tuple[int, int] = (24, 40)

    def __post_init__(self):
        if abs(sum(self.label_mix) - 1.0) > 1e-9:
            raise ValueError("label_mix must sum to 1")
        if any(f < 0 for f in self.label_mix):
            raise ValueError("label_mix fractions must be non-negative")
        if not 1 <= self.min_steps <= self.max_steps:
            raise ValueError("need 1 <= min_steps <= max_steps")
        lo, hi = self.vocab_size_range
        if not 2 <= lo <= hi:
            raise ValueError("vocab_size_range must satisfy 2 <= lo <= hi")
        if self.n_episodes < 0:
            raise ValueError("n_episodes must be >= 0")


def _exact_counts(n: int, mix: tuple[float, float, float]) -> list[int]:
    """Largest-remainder apportionment: counts sum to n exactly."""
    raw = [f * n for f in mix]
    counts = [int(r) for r in raw]
    short = n - sum(counts)
    order = sorted(range(len(mix)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(short):
        counts[order[i]] += 1
    return counts


@dataclass
class _Activity:
    steps: list[str]
    referenced: set[str]
    labeled_local: int | None = None
    oracle_action: str | None = None


class _EpisodeBuilder:
    """Builds one episode against a live simulated world."""

    def __init__(self, scene, vocab, table, layouts, rng):
        self.scene = scene
        self.vocab = vocab
        self.table = table
        self.rng = rng
        self.world = initial_world(scene, vocab, layouts)
        self.used: set[str] = set()
        self.seq: list[str] = []

    # -- world-consistent appending --------------------------------------

    def _can_append(self, token: str) -> bool:
        try:
            if self.table.post_holds(token, self.world):
                return False
            self.table.expand(token, self.world, agent="agent_human")
        except Exception:
            return False
        return True

    def _append(self, token: str) -> None:
        assert self._can_append(token), token
        self.table.expand_and_apply(token, self.world, agent="agent_human")
        self.seq.append(token)

    # -- object pools ------------------------------------------------------

    def _pool(self, capability: str, exclude: set[str] = frozenset()) -> list[str]:
        return sorted(
            n for n in self.vocab.names(capability) if n not in self.used and n not in exclude
        )

    def _pick(self, pool: list[str]) -> str | None:
        return self.rng.choice(pool) if pool else None

    # -- chains ------------------------------------------------------------

    def _chain_cut(self) -> _Activity | None:
        if not self.vocab.has_object("knife") or "knife" in self.used:
            return None
        xs = self._pool("sliceable", exclude={"knife"})
        x = self._pick(xs)
        if x is None:
            return None
        surfs = [
            r
            for r in self._pool("receptacle")
            if r != self.world.object_locations.get(x) and r != self.world.object_locations.get("knife")
        ]
        surf = self._pick(surfs)
        if surf is None:
            return None
        steps = []
        if self.rng.random() < 0.6:
            steps.append(f"find_{x}")
        washable = self.vocab.object(x).washable and self.vocab.has_object("sink")
        if washable and self.rng.random() < 0.6 and self.world.object_locations.get(x) != "sink":
            steps += [f"bring_{x}_to_sink", f"wash_{x}"]
        steps.append(f"bring_{x}_to_{surf}")
        steps.append(f"bring_knife_to_{surf}")
        steps.append(f"cut_{x}")
        return _Activity(
            steps=steps,
            referenced={x, "knife", surf},
            labeled_local=len(steps) - 2,
            oracle_action=f"bring_knife_to_{surf}",
        )

    def _chain_deliver(self) -> _Activity | None:
        t = self._pick(self._pool("pickupable"))
        if t is None:
            return None
        rs = [r for r in self._pool("receptacle") if r != self.world.object_locations.get(t)]
        r = self._pick(rs)
        if r is None:
            return None
        token = f"bring_{t}_to_{r}"
        return _Activity(steps=[token], referenced={t, r}, labeled_local=0, oracle_action=token)

    def _chain_wash(self) -> _Activity | None:
        if not self.vocab.has_object("sink"):
            return None
        xs = [
            x
            for x in self._pool("washable")
            if x in self.vocab.names("pickupable") and self.world.object_locations.get(x) != "sink"
        ]
        x = self._pick(xs)
        if x is None:
            return None
        token = f"bring_{x}_to_sink"
        return _Activity(
            steps=[token, f"wash_{x}"],
            referenced={x, "sink"},
            labeled_local=0,
            oracle_action=token,
        )

    def _chain_toggle(self) -> _Activity | None:
        x = self._pick(self._pool("toggleable"))
        if x is None:
            return None
        token = f"toggle_{x}"
        return _Activity(steps=[token], referenced={x}, labeled_local=0, oracle_action=token)

    def _chain_clean(self) -> _Activity | None:
        y = self._pick(self._pool("receptacle"))
        if y is None:
            return None
        token = f"clean_{y}"
        return _Activity(steps=[token], referenced={y}, labeled_local=0, oracle_action=token)

    _CHAIN_MAX_LEN = {"cut": 6, "wash": 2, "deliver": 1, "toggle": 1, "clean": 1}

    def _build_chain(self, budget: int) -> _Activity | None:
        builders = {
            "cut": self._chain_cut,
            "deliver": self._chain_deliver,
            "wash": self._chain_wash,
            "toggle": self._chain_toggle,
            "clean": self._chain_clean,
        }
        if self.scene == "kitchen":
            weighted = ["cut"] * 35 + ["deliver"] * 20 + ["wash"] * 20 + ["toggle"] * 15 + ["clean"] * 10
        elif self.scene == "bathroom":
            weighted = ["wash"] * 30 + ["deliver"] * 30 + ["toggle"] * 20 + ["clean"] * 20
        else:
            weighted = ["deliver"] * 45 + ["toggle"] * 35 + ["clean"] * 20
        weighted = [k for k in weighted if self._CHAIN_MAX_LEN[k] <= budget]
        if not weighted:
            return None
        kind = self.rng.choice(weighted)
        act = builders[kind]()
        if act is None:  # fall back to kinds that need fewer affordances
            for fallback in ("deliver", "toggle", "clean"):
                act = builders[fallback]()
                if act is not None:
                    break
        return act

    # -- fillers -------------------------------------------------------------

    def _build_filler(self) -> _Activity | None:
        kinds = ["find"] * 30 + ["toggle"] * 15 + ["clean"] * 15 + ["move"] * 25
        if self.vocab.has_object("sink"):
            kinds += ["wash"] * 10
        if self.vocab.has_object("toaster"):
            kinds += ["toast"] * 5
        for kind in self.rng.sample(kinds, len(kinds)):
            if kind == "find":
                z = self._pick(self._pool("pickupable"))
                if z:
                    return _Activity([f"find_{z}"], {z})
            elif kind == "toggle":
                z = self._pick(self._pool("toggleable"))
                if z:
                    return _Activity([f"toggle_{z}"], {z})
            elif kind == "clean":
                y = self._pick(self._pool("receptacle"))
                if y:
                    return _Activity([f"clean_{y}"], {y})
            elif kind == "move":
                z = self._pick(self._pool("pickupable"))
                if z is None:
                    continue
                rs = [r for r in self._pool("receptacle") if r != self.world.object_locations.get(z)]
                r = self._pick(rs)
                if r:
                    return _Activity([f"bring_{z}_to_{r}"], {z, r})
            elif kind == "wash":
                z = self._pick(self._pool("washable"))
                if z:
                    return _Activity([f"wash_{z}"], {z, "sink"})
            elif kind == "toast":
                z = self._pick(self._pool("sliceable"))
                if z:
                    return _Activity([f"toast_{z}"], {z, "toaster"})
        return None

    # -- assembly --------------------------------------------------------------

    def _append_activity(self, act: _Activity) -> bool:
        for tok in act.steps:
            if not self._can_append(tok):
                return False
            self._append(tok)
        self.used |= act.referenced
        return True

    def _append_filler(self) -> bool:
        for _ in range(8):
            act = self._build_filler()
            if act is not None and self._can_append(act.steps[0]):
                return self._append_activity(act)
        return False

    def build(
        self, n_labels: int, target_len: int, max_len: int
    ) -> tuple[list[str], list[tuple[int, str]]] | None:
        """Returns (human_task_seq, [(oracle_step, oracle_action), ...]) or None."""
        overhead = 1 + (2 if n_labels == 2 else 0)  # lead filler + separators
        chains = []
        for k in range(n_labels):
            budget = (max_len - overhead) // n_labels if n_labels else 0
            c = self._build_chain(budget)
            if c is None:
                return None
            chains.append(c)
            self.used |= c.referenced  # reserve before building the next chain
        chain_len = sum(len(c.steps) for c in chains)
        need = chain_len + overhead if chains else 1
        length = min(max(target_len, need), max_len)
        if length < need:
            return None

        n_fill = length - chain_len
        lead = 1 if chains else n_fill
        sep = 2 if n_labels == 2 else 0
        tail = n_fill - lead - sep
        extra = [0] * (n_labels + 1)
        for _ in range(max(tail, 0)):
            extra[self.rng.randrange(len(extra))] += 1

        if chains:
            # slot k: fillers before chain k; last slot: fillers after the final chain
            slots = [lead + extra[0]]
            slots += [sep + extra[k] for k in range(1, n_labels)]
            slots += [extra[n_labels]]
        else:
            slots = [lead]
        label_spans: list[tuple[int, _Activity]] = []
        for k, c in enumerate(chains):
            for _ in range(slots[k]):
                if not self._append_filler():
                    return None
            start = len(self.seq)
            if not self._append_activity(c):
                return None
            label_spans.append((start + c.labeled_local, c))
        for _ in range(slots[-1] if chains else slots[0]):
            if not self._append_filler():
                return None

        labels = []
        for j, c in label_spans:
            s_star = self._latest_safe_window(c.oracle_action, j)
            if s_star is None:
                return None
            labels.append((s_star, c.oracle_action))
        labels.sort()
        steps_used = [s for s, _ in labels]
        if len(set(steps_used)) != len(steps_used):
            return None
        if len(labels) == 2 and abs(labels[0][0] - labels[1][0]) < 2:
            return None
        return self.seq, labels

    def _latest_safe_window(self, action: str, j: int) -> int | None:
        """Latest step s <= j whose pre-step window fits the robot action."""
        target = self.table.put_target(action)
        for s in range(j, -1, -1):
            if target is None or self.table.put_target(self.seq[s]) != target:
                return s
        return None


def _admissible_distractors(vocab: SceneVocabulary, used: set[str], human_seq: list[str]) -> list[str]:
    """Scene actions that cannot perturb or pre-satisfy any human step.

    A distractor is admissible when the objects it would move or re-flag are
    disjoint from everything the human's steps reference. Pure put-targets
    (the destination of a ``bring``) and walked-to objects (``find``) are
    exempt: extra objects on a receptacle never change a human expansion.
    """
    human = set(human_seq)
    out = []
    for token in vocab.all_actions():
        if token in human:
            continue
        template, binds = match_token(token)
        if template == "bring_{x}_to_{y}":
            touched = {binds["x"]}
        elif template == "find_{x}":
            touched = set()
        elif template == "cut_{x}":
            touched = {binds["x"], "knife"}
        else:
            touched = set(binds.values())
        if touched & used:
            continue
        out.append(token)
    return sorted(set(out))


def _is_subsequence(sub: list[str], full: list[str]) -> bool:
    it = iter(full)
    return all(any(s == f for f in it) for s in sub)


def verify_episode(
    episode: Episode,
    vocab: SceneVocabulary,
    table: ExpansionTable,
    layouts: dict | None = None,
) -> tuple[RunReport, list[RunReport]]:
    """Replay an episode: unassisted run plus one assisted run per label.

    Raises AssertionError when the causal-soundness contract is violated:
    unassisted success with no skips; per label HSS >= 1, success, robot
    not abandoned, and human trace a subsequence of the unassisted trace.
    """
    world0 = initial_world(episode.scene, vocab, layouts)
    base = run_unassisted(episode, world0, table)
    assert base.success, f"{episode.episode_id}: unassisted run failed"
    assert not base.skipped_steps, f"{episode.episode_id}: unassisted run skipped steps"
    base_sigs = [t.prim.sig for t in base.human_trace]
    reports = []
    for lab in episode.oracle_labels:
        rep = run_assisted(episode, world0, table, (lab.human_step_idx, lab.best_robot_action))
        assert rep.robot_abandoned is None, f"{episode.episode_id}: oracle action abandoned"
        assert rep.hss >= 1, f"{episode.episode_id}: oracle HSS {rep.hss} < 1"
        assert rep.success, f"{episode.episode_id}: assisted run failed"
        sigs = [t.prim.sig for t in rep.human_trace]
        assert _is_subsequence(sigs, base_sigs), f"{episode.episode_id}: human trace perturbed"
        reports.append(rep)
    return base, reports


def generate_episode(
    scene: str,
    index: int,
    n_labels: int,
    config: GenConfig,
    vocab: SceneVocabulary,
    table: ExpansionTable,
    layouts: dict | None = None,
) -> Episode:
    for attempt in range(_MAX_ATTEMPTS):
        rng = random.Random(f"{config.seed}:{index}:{attempt}")
        # later attempts aim for shorter sequences: fewer used objects, larger distractor pool
        hi = max(config.min_steps, config.max_steps - attempt)
        target_len = rng.randint(config.min_steps, hi)
        builder = _EpisodeBuilder(scene, vocab, table, layouts, rng)
        built = builder.build(n_labels, target_len, config.max_steps)
        if built is None:
            continue
        seq, labels = built
        pool = _admissible_distractors(vocab, builder.used, seq)
        size = rng.randint(*config.vocab_size_range)
        n_distract = size - 1 - len(labels)
        if n_distract > len(pool):
            if attempt < _MAX_ATTEMPTS - 1:
                continue
            raise VocabTooSmall(
                f"{scene}: need {n_distract} distractors, pool has {len(pool)}"
            )
        distractors = rng.sample(pool, n_distract)
        vocab_tokens = [NO_OP] + [a for _, a in labels] + distractors
        rng.shuffle(vocab_tokens)
        episode = Episode(
            episode_id=f"{scene}-{index:05d}",
            scene=scene,
            human_task_seq=seq,
            robot_vocab=vocab_tokens,
            oracle_labels=[OracleLabel(s, a) for s, a in labels],
        )
        try:
            verify_episode(episode, vocab, table, layouts)
        except AssertionError:
            continue
        return episode
    raise VocabTooSmall(f"could not generate a valid episode for {scene} #{index}")


def generate_corpus(
    config: GenConfig,
    vocabs: dict[str, SceneVocabulary],
    table: ExpansionTable | None = None,
    layouts: dict | None = None,
) -> Corpus:
    """Deterministic in (seed, config, vocabs); label counts match label_mix exactly."""
    missing = [s for s in SCENES if s not in vocabs]
    if missing:
        raise ValueError(f"vocabs must cover all scenes; missing {missing}")
    table = table or ExpansionTable.default()
    n1, n2, n0 = _exact_counts(config.n_episodes, config.label_mix)
    label_counts = [1] * n1 + [2] * n2 + [0] * n0
    random.Random(f"{config.seed}:mix").shuffle(label_counts)
    episodes = []
    for i in range(config.n_episodes):
        scene = SCENES[i % len(SCENES)]
        episodes.append(
            generate_episode(scene, i, label_counts[i], config, vocabs[scene], table, layouts)
        )
    return Corpus(episodes=episodes, split="train")


def split_corpus(
    corpus: Corpus, fractions: tuple[float, float], seed: int
) -> tuple[Corpus, Corpus]:
    """Stratified train/val split on (scene, label count); deterministic in seed."""
    f_train, f_val = fractions
    if abs(f_train + f_val - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if f_train < 0 or f_val < 0:
        raise ValueError("fractions must be non-negative")
    if not corpus.episodes:
        raise EmptyStratum("cannot split an empty corpus")
    cells: dict[tuple[str, int], list[int]] = {}
    for idx, ep in enumerate(corpus.episodes):
        cells.setdefault((ep.scene, len(ep.oracle_labels)), []).append(idx)
    train_idx: set[int] = set()
    rng = random.Random(seed)
    for key in sorted(cells):
        members = list(cells[key])
        rng.shuffle(members)
        n_train = int(len(members) * f_train + 0.5)
        train_idx.update(members[:n_train])
    train_eps = [ep for i, ep in enumerate(corpus.episodes) if i in train_idx]
    val_eps = [ep for i, ep in enumerate(corpus.episodes) if i not in train_idx]
    return Corpus(train_eps, split="train"), Corpus(val_eps, split="val")
