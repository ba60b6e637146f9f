"""AdamW, warmup+cosine schedule, clipping, and the training stages.

Training examples are ``(tokens, loss_mask)`` pairs of equal length: position
``t`` of ``loss_mask`` says whether token ``t`` is a prediction target.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .model import LoraConfig, Transformer, apply_lora, set_trainability
from .numerics import Parameter
from .pkm import count_accesses
from .selection import BackgroundStats, ScoringConfig, score, select_top_T

logger = logging.getLogger(__name__)

Example = tuple[np.ndarray, np.ndarray]


@dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    warmup_steps: int = 100
    max_grad_norm: float = 1.0
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    max_seq_len: int = 1024

    @classmethod
    def paper(cls, method: str) -> "TrainConfig":
        lr = {"sparse": 5e-4, "retrofit": 5e-4, "lora": 2e-4, "full_ft": 5e-5}[method]
        return cls(lr=lr, epochs=2 if method == "retrofit" else 3)


@dataclass
class StageRecord:
    stage: str
    steps: int = 0
    losses: list[float] = field(default_factory=list)
    popcounts: list[dict[int, int]] = field(default_factory=list)
    masks: list[dict[int, np.ndarray]] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    optimizer: "AdamW | None" = None


class AdamW:
    """Decoupled-decay Adam keyed by parameter name.

    Parameters carrying a ``row_mask`` only update (and only advance moments
    for) the selected rows. Other parameters skip rows whose gradient and
    moments are all exactly zero.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: Iterable[Parameter], lr: float) -> None:
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        for p in params:
            if not p.trainable or p.grad is None:
                continue
            st = self.state.get(p.name)
            if st is None:
                st = self.state[p.name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            adamw_update(p, st, lr, self.b1, self.b2, self.eps, self.weight_decay)


def adamw_update(p: Parameter, st: dict, lr: float, b1: float, b2: float, eps: float, wd: float) -> None:
    g, m, v = p.grad, st["m"], st["v"]
    if p.row_mask is not None:
        rows = p.row_mask
    else:
        reduce_axes = tuple(range(1, g.ndim))
        idle = (g == 0) & (m == 0) & (v == 0)
        rows = ~idle.all(axis=reduce_axes) if reduce_axes else ~idle
    if not rows.any():
        return
    st["t"] += 1
    t = st["t"]
    gr = g[rows]
    mr = b1 * m[rows] + (1 - b1) * gr
    vr = b2 * v[rows] + (1 - b2) * gr * gr
    m[rows] = mr
    v[rows] = vr
    mhat = mr / (1 - b1**t)
    vhat = vr / (1 - b2**t)
    w = p.data[rows]
    w = w * (1 - lr * wd) - lr * mhat / (np.sqrt(vhat) + eps)
    p.data[rows] = w


def adamw_step(params: Sequence[Parameter], state: AdamW, lr_t: float) -> None:
    state.step(params, lr_t)


def lr_at(step: int, lr: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``lr``, then cosine decay to 0 at ``total``."""
    if total <= warmup:
        raise ValueError(f"total steps ({total}) must exceed warmup ({warmup})")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup:
        return lr * step / warmup
    frac = min(1.0, (step - warmup) / (total - warmup))
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale grads in place so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.trainable and p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        coef = max_norm / (total + 1e-12)
        for g in grads:
            g *= coef
    return total


# ---------------------------------------------------------------- batching


def pad_batch(examples: Sequence[Example], max_len: int | None = None):
    """Right-pad to the longest example. Returns (inputs, targets, weights, valid)."""
    L = max(len(t) for t, _ in examples)
    if max_len is not None:
        L = min(L, max_len + 1)
    B = len(examples)
    toks = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.float64)
    valid = np.zeros((B, L - 1), dtype=bool)
    for i, (t, m) in enumerate(examples):
        t, m = t[:L], m[:L]
        toks[i, : len(t)] = t
        mask[i, : len(m)] = m
        valid[i, : len(t) - 1] = True
    return toks[:, :-1], toks[:, 1:], mask[:, 1:], valid


def iterate_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(examples))
    for s in range(0, len(order), batch_size):
        yield [examples[i] for i in order[s: s + batch_size]]


def lm_loss(model: Transformer, batch, retrievals: dict | None = None):
    inp, tgt, w, _ = batch
    logits = model.forward(inp, retrievals=retrievals)
    V = logits.shape[-1]
    return nx.cross_entropy(nx.reshape(logits, (-1, V)), tgt.reshape(-1), w.reshape(-1))


# ---------------------------------------------------------------- loop


class RunLog:
    """JSON-lines step log; also kept in memory."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "a") if path else None

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _train(model: Transformer, examples: Sequence[Example], cfg: TrainConfig, stage: str,
           log: RunLog | None = None, sparse: tuple[dict, ScoringConfig] | None = None,
           keep_masks: bool = False, callback: Callable[[int, dict], None] | None = None) -> StageRecord:
    """Shared loop. ``callback(step, masks)`` runs after each optimizer step."""
    if not examples:
        raise ValueError(f"{stage}: no training examples")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = min(cfg.warmup_steps, total - 1)
    opt = AdamW(cfg.betas, cfg.eps, cfg.weight_decay)
    params = model.trainable_params()
    record = StageRecord(stage)
    if log is not None:
        log.write({"stage": stage, "event": "start", "config": asdict(cfg), "total_steps": total})
    model.training = True
    step = 0
    try:
        for _ in range(cfg.epochs):
            for chunk in iterate_batches(examples, cfg.batch_size, rng):
                batch = pad_batch(chunk, cfg.max_seq_len)
                retrievals: dict = {} if sparse else None
                loss = lm_loss(model, batch, retrievals)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError(f"{stage}: non-finite loss at step {step}")
                pops = {}
                masks = {}
                if sparse:
                    stats, scfg = sparse
                    for layer, res in sorted(retrievals.items()):
                        counts = count_accesses(res, model.cfg.memory.M, token_mask=batch[3])
                        sm = select_top_T(score(counts, stats[layer], scfg), scfg.T, layer)
                        model.memory[layer].values.row_mask = sm.selected
                        pops[layer] = sm.popcount
                        masks[layer] = sm.selected
                for p in params:
                    p.grad = None
                nx.backward(loss)
                gnorm = clip_grad_norm(params, cfg.max_grad_norm)
                lr = lr_at(step, cfg.lr, warmup, total)
                opt.step(params, lr)
                for p in params:
                    p.row_mask = None
                record.losses.append(loss.item())
                record.popcounts.append(pops)
                if keep_masks:
                    record.masks.append(masks)
                rec = {"step": step, "stage": stage, "loss": loss.item(), "lr": lr,
                       "popcount": {str(k): v for k, v in pops.items()}, "grad_norm": gnorm}
                record.log.append(rec)
                if log is not None:
                    log.write(rec)
                if callback is not None:
                    callback(step, masks)
                step += 1
    finally:
        model.training = False
        for p in params:
            p.grad = None
    record.steps = step
    record.optimizer = opt
    logger.info("%s: %d steps, loss %.4f -> %.4f", stage, step, record.losses[0], record.losses[-1])
    return record


def stage1_retrofit(model: Transformer, corpus: Sequence[Example], cfg: TrainConfig,
                    log: RunLog | None = None) -> StageRecord:
    """Dense training of the memory parameters with the base model frozen."""
    if not model.memory:
        raise ValueError("stage 1 needs a model with memory layers")
    set_trainability(model, "retrofit")
    return _train(model, corpus, cfg, "retrofit", log)


def stage2_sparse(model: Transformer, task: Sequence[Example], stats: dict[int, BackgroundStats],
                  scfg: ScoringConfig, cfg: TrainConfig, log: RunLog | None = None,
                  keep_masks: bool = False, callback=None) -> StageRecord:
    """Per-batch top-T masked updates of memory value rows."""
    if set(stats) != set(model.memory):
        raise ValueError(f"stats layers {sorted(stats)} do not match memory layers {sorted(model.memory)}")
    set_trainability(model, "sparse_task")
    return _train(model, task, cfg, f"sparse_{scfg.rule}", log, sparse=(stats, scfg), keep_masks=keep_masks,
                  callback=callback)


def run_baseline(model: Transformer, task: Sequence[Example], kind: str, cfg: TrainConfig,
                 lora: LoraConfig | None = None, log: RunLog | None = None) -> StageRecord:
    if kind == "lora":
        if model.lora is None:
            apply_lora(model, lora or LoraConfig(), seed=cfg.seed)
        set_trainability(model, "lora")
    elif kind == "full_ft":
        set_trainability(model, "full_ft")
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return _train(model, task, cfg, kind, log)


def pretrain(model: Transformer, corpus: Sequence[Example], cfg: TrainConfig, log: RunLog | None = None) -> StageRecord:
    """Train every base parameter from scratch (toy base model)."""
    set_trainability(model, "full_ft")
    return _train(model, corpus, cfg, "pretrain", log)


def collect_background_stats(model: Transformer, batches: Sequence[Sequence[Example]]) -> dict[int, BackgroundStats]:
    """Forward-only pass over background batches; one BackgroundStats per memory layer."""
    if not model.memory:
        raise ValueError("model has no memory layers")
    if not batches:
        raise ValueError("background collection needs at least one batch")
    M = model.cfg.memory.M
    stats = {i: BackgroundStats(M=M, layer_id=i) for i in model.memory}
    with nx.no_grad():
        for chunk in batches:
            inp, _, _, valid = pad_batch(chunk, model.cfg.max_seq_len)
            ret: dict = {}
            model.forward(inp, retrievals=ret)
            for i, res in ret.items():
                stats[i].update(count_accesses(res, M, token_mask=valid))
    return stats
