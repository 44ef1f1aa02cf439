"""Metrics over a corpus: SelectionAcc, mean HSS, SuccessAcc.

Policies: ``model`` (a trained ranker), ``random``, ``cosine_top1``,
``oracle`` (replays ground-truth labels; upper bound on generated corpora),
and ``no_op`` (never assists; mean HSS is exactly 0 by the no-op neutrality
of the simulator).

SelectionAcc counts (episode, label) units: multi-label episodes contribute
one unit per label against the single top-1 prediction, and zero-label
episodes contribute one unit scored correct iff the prediction is ``no_op``.
The strict score requires the (step, action) pair to match; the
``action_only`` variant is also reported.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .embedding import Embedder, build_candidates, cosine, embed, embed_tokens
from .episodes import NO_OP, Corpus, Episode, serialize_corpus
from .errors import MissingPrediction
from .ranker import RankerConfig, forward
from .simulator import ExpansionTable, initial_world, run_assisted, run_unassisted

POLICIES = ("model", "random", "cosine_top1", "oracle", "no_op")


@dataclass
class Prediction:
    episode_id: str
    step: int
    action: str
    logits: np.ndarray | None = None

    @property
    def chosen(self) -> tuple[int, str]:
        return (self.step, self.action)


def _argmax_unmasked(values: np.ndarray) -> tuple[int, int]:
    """First maximum in row-major order = lowest flattened index tie-break."""
    flat = int(np.argmax(values))
    return flat // values.shape[1], flat % values.shape[1]


def predict(
    params: dict[str, np.ndarray],
    config: RankerConfig,
    episode: Episode,
    embedder: Embedder,
    K: int = 5,
    K_ep: int = 20,
    ablation: str = "full",
    keep_logits: bool = False,
) -> Prediction:
    """Top-1 (step, action) for one episode; retrieval without teacher forcing."""
    return predict_batch(
        params, config, [episode], embedder, K=K, K_ep=K_ep,
        ablation=ablation, keep_logits=keep_logits,
    )[0]


def predict_batch(
    params: dict[str, np.ndarray],
    config: RankerConfig,
    episodes: list[Episode],
    embedder: Embedder,
    K: int = 5,
    K_ep: int = 20,
    ablation: str = "full",
    batch_size: int = 64,
    emb_cache: dict | None = None,
    keep_logits: bool = False,
) -> list[Prediction]:
    cache = emb_cache if emb_cache is not None else {}
    action_only = ablation == "action_only"
    preds: list[Prediction] = []
    for lo in range(0, len(episodes), batch_size):
        chunk = episodes[lo : lo + batch_size]
        cand_lists = [
            build_candidates(ep, embedder, ablation, K, K_ep, config.max_candidates)
            for ep in chunk
        ]
        B = len(chunk)
        S = max(ep.n_steps for ep in chunk)
        C = max(len(c) for c in cand_lists)
        dim = config.input_dim
        H = np.zeros((B, S, dim))
        A = np.zeros((B, C, dim))
        step_mask = np.zeros((B, S), dtype=bool)
        cand_mask = np.zeros((B, C), dtype=bool)
        for b, (ep, cands) in enumerate(zip(chunk, cand_lists)):
            H[b, : ep.n_steps] = embed_tokens(ep.human_task_seq, embedder, cache)
            A[b, : len(cands)] = embed_tokens(cands, embedder, cache)
            step_mask[b, : ep.n_steps] = True
            cand_mask[b, : len(cands)] = True
        out, fcache = forward(
            params, config, H, A, step_mask, cand_mask,
            action_only=action_only, want_cache=True,
        )
        for b, (ep, cands) in enumerate(zip(chunk, cand_lists)):
            if action_only:
                c_hat = int(np.argmax(out.values[b, 0]))
                # step picked from the chosen candidate's cross-attention
                # weights over steps, averaged over heads
                w = fcache["cross"]["w"][b].mean(axis=0)  # (C, S)
                s_hat = int(np.argmax(np.where(step_mask[b], w[c_hat], -np.inf)))
            else:
                s_hat, c_hat = _argmax_unmasked(out.values[b])
            preds.append(
                Prediction(
                    episode_id=ep.episode_id,
                    step=s_hat,
                    action=cands[c_hat],
                    logits=out.values[b].copy() if keep_logits else None,
                )
            )
    return preds


# -- decision-level metric ---------------------------------------------------------

def _units(episode: Episode, pred: Prediction, action_only_match: bool) -> list[bool]:
    if not episode.oracle_labels:
        return [pred.action == NO_OP]
    units = []
    for lab in episode.oracle_labels:
        if action_only_match:
            units.append(pred.action == lab.best_robot_action)
        else:
            units.append(
                pred.step == lab.human_step_idx and pred.action == lab.best_robot_action
            )
    return units


def selection_acc(
    predictions: list[Prediction], corpus: Corpus, action_only_match: bool = False
) -> float:
    """Fraction of (episode, label) units matched exactly by the top-1 pair."""
    by_id = {p.episode_id: p for p in predictions}
    hits, total = 0, 0
    for ep in corpus:
        pred = by_id.get(ep.episode_id)
        if pred is None:
            raise MissingPrediction(ep.episode_id)
        for ok in _units(ep, pred, action_only_match):
            hits += int(ok)
            total += 1
    return hits / total if total else 0.0


# -- policies -----------------------------------------------------------------------

def _rng_for(seed: int, episode_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{episode_id}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def policy_random(episode: Episode, seed: int) -> Prediction:
    rng = _rng_for(seed, episode.episode_id)
    s = int(rng.integers(episode.n_steps))
    c = int(rng.integers(len(episode.robot_vocab)))
    return Prediction(episode.episode_id, s, episode.robot_vocab[c])


def policy_cosine_top1(episode: Episode, embedder: Embedder) -> Prediction:
    best = (-2.0, 0, 0)
    h_vecs = [embed(embedder, t) for t in episode.human_task_seq]
    a_vecs = [embed(embedder, t) for t in episode.robot_vocab]
    for s, hv in enumerate(h_vecs):
        for c, av in enumerate(a_vecs):
            sim = cosine(hv, av)
            if sim > best[0]:
                best = (sim, s, c)
    return Prediction(episode.episode_id, best[1], episode.robot_vocab[best[2]])


def policy_oracle(episode: Episode) -> Prediction:
    if not episode.oracle_labels:
        return Prediction(episode.episode_id, 0, NO_OP)
    lab = min(episode.oracle_labels, key=lambda l: l.human_step_idx)
    return Prediction(episode.episode_id, lab.human_step_idx, lab.best_robot_action)


def policy_no_op(episode: Episode) -> Prediction:
    return Prediction(episode.episode_id, 0, NO_OP)


# -- task-level evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    policy: str
    corpus_id: str
    config_hash: str
    n_episodes: int
    n_units: int
    selection_acc: float
    selection_acc_action_only: float
    mean_hss: float  # mean of |HSS| per episode, per the metric definition
    mean_signed_hss: float
    success_acc: float
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "corpus_id": self.corpus_id,
            "config_hash": self.config_hash,
            "n_episodes": self.n_episodes,
            "n_units": self.n_units,
            "selection_acc": self.selection_acc,
            "selection_acc_action_only": self.selection_acc_action_only,
            "mean_hss": self.mean_hss,
            "mean_signed_hss": self.mean_signed_hss,
            "success_acc": self.success_acc,
        }

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "episodes": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = [
            "episode_id", "scene", "n_labels", "pred_step", "pred_action",
            "h_human", "h_assist", "hss", "success", "robot_abandoned",
        ]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: row[k] for k in fields})
        return buf.getvalue()


def corpus_id_of(corpus: Corpus) -> str:
    return hashlib.sha256(serialize_corpus(corpus)).hexdigest()[:12]


def config_hash_of(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def evaluate(
    corpus: Corpus,
    policy: str,
    vocabs: dict,
    table: ExpansionTable | None = None,
    layouts: dict | None = None,
    params: dict | None = None,
    config: RankerConfig | None = None,
    embedder: Embedder | None = None,
    K: int = 5,
    K_ep: int = 20,
    ablation: str = "full",
    seed: int = 0,
) -> EvalReport:
    """Predict with the chosen policy, replay every episode assisted and
    unassisted, and aggregate the three metrics. Episodes are processed in
    sorted episode_id order so aggregation is deterministic."""
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    table = table or ExpansionTable.default()

    episodes = sorted(corpus.episodes, key=lambda e: e.episode_id)
    if policy == "model":
        if params is None or config is None or embedder is None:
            raise ValueError("model policy needs params, config and embedder")
        preds = predict_batch(
            params, config, episodes, embedder, K=K, K_ep=K_ep, ablation=ablation
        )
        pred_by_id = {p.episode_id: p for p in preds}
    else:
        pred_by_id = {}
        for ep in episodes:
            if policy == "random":
                pred_by_id[ep.episode_id] = policy_random(ep, seed)
            elif policy == "cosine_top1":
                if embedder is None:
                    raise ValueError("cosine_top1 policy needs an embedder")
                pred_by_id[ep.episode_id] = policy_cosine_top1(ep, embedder)
            elif policy == "oracle":
                pred_by_id[ep.episode_id] = policy_oracle(ep)
            else:
                pred_by_id[ep.episode_id] = policy_no_op(ep)

    rows = []
    abs_hss, signed_hss, successes = [], [], []
    for ep in episodes:
        pred = pred_by_id[ep.episode_id]
        world0 = initial_world(ep.scene, vocabs[ep.scene], layouts)
        report = run_assisted(ep, world0, table, pred.chosen)
        rows.append(
            {
                "episode_id": ep.episode_id,
                "scene": ep.scene,
                "n_labels": len(ep.oracle_labels),
                "pred_step": pred.step,
                "pred_action": pred.action,
                "h_human": report.h_human,
                "h_assist": report.h_assist,
                "hss": report.hss,
                "success": report.success,
                "robot_abandoned": report.robot_abandoned,
                "skipped_steps": report.skipped_steps,
                "oracle_labels": [list(l.to_dict().values()) for l in ep.oracle_labels],
            }
        )
        abs_hss.append(abs(report.hss))
        signed_hss.append(report.hss)
        successes.append(report.success)

    preds_list = [pred_by_id[ep.episode_id] for ep in episodes]
    report = EvalReport(
        policy=policy,
        corpus_id=corpus_id_of(corpus),
        config_hash=config_hash_of(
            {
                "policy": policy,
                "K": K,
                "K_ep": K_ep,
                "ablation": ablation,
                "seed": seed,
                "ranker": None if config is None else config.__dict__,
            }
        ),
        n_episodes=len(episodes),
        n_units=sum(max(1, len(ep.oracle_labels)) for ep in episodes),
        selection_acc=selection_acc(preds_list, corpus),
        selection_acc_action_only=selection_acc(preds_list, corpus, action_only_match=True),
        mean_hss=float(np.mean(abs_hss)) if abs_hss else 0.0,
        mean_signed_hss=float(np.mean(signed_hss)) if signed_hss else 0.0,
        success_acc=float(np.mean(successes)) if successes else 0.0,
        rows=rows,
    )
    return report
