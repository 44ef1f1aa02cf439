"""Flattened cross-entropy training with exact manual gradients and AdamW.

Every labeled episode yields one training example per oracle label
(multi-label episodes are duplicated); zero-label episodes get the target
(step 0, ``no_op``) by default, or are skipped with
``zero_label_mode="skip"``. The oracle action is teacher-forced into the
retrieved candidate set during training only.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .embedding import Embedder, build_candidates, embed, embed_tokens
from .episodes import NO_OP, Corpus, Episode
from .errors import TargetMasked
from .ranker import (
    LogitMatrix,
    RankerConfig,
    backward,
    forward,
    init_params,
    save_checkpoint,
    zeros_like_params,
)

ABLATIONS = ("full", "no_retrieval", "action_only")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 12
    batch_size: int = 64
    seed: int = 0
    ablation: str = "full"
    zero_label_mode: str = "noop_target"  # or "skip"

    def __post_init__(self):
        if min(self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.epsilon) < 0:
            raise ValueError("rates must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.zero_label_mode not in ("noop_target", "skip"):
            raise ValueError("zero_label_mode must be noop_target or skip")


@dataclass
class TrainExample:
    episode_id: str
    human_tokens: tuple[str, ...]
    candidates: tuple[str, ...]
    target_step: int
    target_cand: int


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params))


def ce_loss(
    logits: LogitMatrix, targets: list[tuple[int, int]]
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the flattened unmasked (step, candidate) grid.

    Returns (loss, grad) with grad = (softmax - onehot) / B at unmasked
    positions and exactly zero at masked positions.
    """
    values = logits.values
    mask = logits.mask
    B, S, C = values.shape
    if len(targets) != B:
        raise ValueError(f"need {B} targets, got {len(targets)}")
    flat = values.reshape(B, S * C)
    fmask = mask.reshape(B, S * C)
    t_idx = np.empty(B, dtype=np.int64)
    for b, (s, c) in enumerate(targets):
        if not (0 <= s < S and 0 <= c < C):
            raise TargetMasked(f"target ({s},{c}) outside ({S},{C})")
        if not mask[b, s, c]:
            raise TargetMasked(f"target ({s},{c}) is masked in example {b}")
        t_idx[b] = s * C + c

    neg = np.where(fmask, flat, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    e = np.exp(neg - m)  # exp(-inf) = 0 for masked
    z = e.sum(axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(z[:, 0])
    picked = flat[np.arange(B), t_idx]
    loss = float(np.mean(log_z - picked))

    p = e / z
    p[np.arange(B), t_idx] -= 1.0
    grad = (p / B).reshape(B, S, C)
    return loss, grad


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """Decoupled weight decay update, in place:
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, theta in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        theta -= config.learning_rate * (
            m_hat / (np.sqrt(v_hat) + config.epsilon) + config.weight_decay * theta
        )


# -- example construction ---------------------------------------------------------

def build_examples(
    corpus: Corpus,
    embedder: Embedder,
    config: TrainConfig,
    C_max: int,
    K: int = 5,
    K_ep: int = 20,
) -> list[TrainExample]:
    examples = []
    for ep in corpus:
        if ep.oracle_labels:
            targets = [(lab.human_step_idx, lab.best_robot_action) for lab in ep.oracle_labels]
        elif config.zero_label_mode == "skip":
            continue
        else:
            targets = [(0, NO_OP)]
        for s_star, action in targets:
            cands = build_candidates(
                ep, embedder, config.ablation, K, K_ep, C_max, force_include=action
            )
            examples.append(
                TrainExample(
                    episode_id=ep.episode_id,
                    human_tokens=ep.human_task_seq,
                    candidates=tuple(cands),
                    target_step=s_star,
                    target_cand=cands.index(action),
                )
            )
    return examples


def assemble_batch(
    examples: list[TrainExample], embedder: Embedder, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Pad to the batch's own max S and max C; masks carry the truth."""
    B = len(examples)
    S = max(len(ex.human_tokens) for ex in examples)
    C = max(len(ex.candidates) for ex in examples)
    dim = embed(embedder, examples[0].human_tokens[0]).shape[0]
    H = np.zeros((B, S, dim))
    A = np.zeros((B, C, dim))
    step_mask = np.zeros((B, S), dtype=bool)
    cand_mask = np.zeros((B, C), dtype=bool)
    targets = []
    for b, ex in enumerate(examples):
        s_len, c_len = len(ex.human_tokens), len(ex.candidates)
        H[b, :s_len] = embed_tokens(ex.human_tokens, embedder, cache)
        A[b, :c_len] = embed_tokens(ex.candidates, embedder, cache)
        step_mask[b, :s_len] = True
        cand_mask[b, :c_len] = True
        targets.append((ex.target_step, ex.target_cand))
    return H, A, step_mask, cand_mask, targets


def _batch_targets(examples: list[TrainExample], action_only: bool) -> list[tuple[int, int]]:
    if action_only:
        return [(0, ex.target_cand) for ex in examples]
    return [(ex.target_step, ex.target_cand) for ex in examples]


# -- training loop ------------------------------------------------------------------

def train(
    corpus: Corpus,
    embedder: Embedder,
    ranker_config: RankerConfig,
    train_config: TrainConfig,
    val_corpus: Corpus | None = None,
    val_fraction: float = 0.1,
    K: int = 5,
    K_ep: int = 20,
    out_dir: str | None = None,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Returns (best-validation parameters, per-epoch history).

    Deterministic in train_config.seed: fixed init, fixed shuffle order.
    With ``out_dir`` set, writes ``metrics.jsonl``, ``last.ckpt`` and
    ``best.ckpt`` (the best-validation snapshot).
    """
    from .evaluate import selection_acc  # local import; evaluate builds on trainer-free modules
    from .evaluate import predict_batch
    from .scenegen import split_corpus

    if val_corpus is None:
        if corpus.episodes and 0.0 < val_fraction < 1.0:
            corpus, val_corpus = split_corpus(corpus, (1.0 - val_fraction, val_fraction), train_config.seed)
        else:
            val_corpus = Corpus([], split="val")

    action_only = train_config.ablation == "action_only"
    cache: dict = {}
    examples = build_examples(corpus, embedder, train_config, ranker_config.max_candidates, K, K_ep)
    params = init_params(ranker_config, seed=train_config.seed)
    state = OptimizerState.fresh(params)
    shuffle_rng = np.random.default_rng(train_config.seed + 1)

    best_params = {k: v.copy() for k, v in params.items()}
    best_acc = -1.0
    history: list[dict] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        metrics_fh = open(metrics_path, "w", encoding="utf-8")
    else:
        metrics_fh = None

    try:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.monotonic()
            order = shuffle_rng.permutation(len(examples))
            total, count = 0.0, 0
            for lo in range(0, len(examples), train_config.batch_size):
                batch = [examples[i] for i in order[lo : lo + train_config.batch_size]]
                H, A, sm, cm, _ = assemble_batch(batch, embedder, cache)
                logits, fcache = forward(
                    params, ranker_config, H, A, sm, cm,
                    action_only=action_only, want_cache=True,
                )
                targets = _batch_targets(batch, action_only)
                loss, grad = ce_loss(logits, targets)
                grads = backward(params, ranker_config, fcache, grad)
                adamw_step(params, grads, state, train_config)
                total += loss * len(batch)
                count += len(batch)
            train_loss = total / count if count else 0.0

            if val_corpus.episodes:
                preds = predict_batch(
                    params, ranker_config, val_corpus.episodes, embedder,
                    K=K, K_ep=K_ep, ablation=train_config.ablation, emb_cache=cache,
                )
                val_acc = selection_acc(preds, val_corpus)
            else:
                val_acc = 0.0

            wall_ms = int((time.monotonic() - t0) * 1000)
            row = {
                "epoch": epoch,
                "train_loss": round(train_loss, 10),
                "val_selection_acc": round(val_acc, 10),
                "wall_ms": wall_ms,
            }
            history.append(row)
            if metrics_fh:
                metrics_fh.write(json.dumps(row) + "\n")
                metrics_fh.flush()
            if val_acc > best_acc:
                best_acc = val_acc
                best_params = {k: v.copy() for k, v in params.items()}
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "last.ckpt"), params, ranker_config)
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), best_params, ranker_config)
    finally:
        if metrics_fh:
            metrics_fh.close()

    return best_params, history


# -- gradient checking (shared by the test suites) -----------------------------------

def finite_difference_check(
    params: dict[str, np.ndarray],
    config: RankerConfig,
    H: np.ndarray,
    A: np.ndarray,
    step_mask: np.ndarray,
    cand_mask: np.ndarray,
    targets: list[tuple[int, int]],
    h: float = 1e-4,
    max_entries_per_tensor: int = 6,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients,
    per parameter tensor, probing up to ``max_entries_per_tensor`` entries."""

    def loss_at() -> float:
        out = forward(params, config, H, A, step_mask, cand_mask)
        return ce_loss(out, targets)[0]

    logits, cache = forward(params, config, H, A, step_mask, cand_mask, want_cache=True)
    _, grad_logits = ce_loss(logits, targets)
    grads = backward(params, config, cache, grad_logits)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        n = flat.shape[0]
        idxs = rng.choice(n, size=min(max_entries_per_tensor, n), replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[i]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
        errors[name] = worst
    return errors
