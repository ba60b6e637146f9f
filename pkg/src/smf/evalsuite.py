"""Task accuracy, general-text perplexity, and alias-substring recall.

Every function takes any ``model`` exposing ``logits(tokens) -> (B, L, V)``.
"""

from __future__ import annotations

import json
import math
import re
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import McItem, QaItem, continuation, decode, encode


@dataclass(frozen=True)
class EvalConfig:
    window: int = 64
    stride: int = 32
    max_new_tokens: int = 16
    slice_size: int = 200
    batch_size: int = 32

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise ValueError(f"need 0 < stride <= window, got stride={self.stride} window={self.window}")

    @classmethod
    def paper(cls) -> "EvalConfig":
        return cls(window=1024, stride=512, max_new_tokens=32, slice_size=1000)


@dataclass
class EvalReport:
    mc_accuracy: float
    perplexity: float
    qa_accuracy: float
    n_mc: int
    n_qa: int
    n_ppl_tokens: int
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- perplexity


def window_plan(n: int, window: int, stride: int) -> list[tuple[int, int, int]]:
    """Windows ``(start, end, first_counted)`` over a length-``n`` token sequence.

    The window feeds ``tokens[start:end]`` and predicts positions
    ``start+1 .. end``; only positions ``>= first_counted`` add to the loss, so
    each position 1..n-1 is counted exactly once.
    """
    if n < 2:
        raise ValueError("need at least two tokens")
    if not 0 < stride <= window:
        raise ValueError("need 0 < stride <= window")
    plan, covered, start = [], 0, 0
    while covered < n - 1:
        end = min(start + window, n - 1)
        plan.append((start, end, covered + 1))
        covered = end
        start += stride
    return plan


def sliding_nll(model, tokens, cfg: EvalConfig) -> tuple[float, int]:
    tokens = np.asarray(tokens, dtype=np.int64)
    plan = window_plan(len(tokens), cfg.window, cfg.stride)
    total, count = 0.0, 0
    # group equal-length windows so they batch together
    groups: dict[int, list[tuple[int, int, int]]] = {}
    for w in plan:
        groups.setdefault(w[1] - w[0], []).append(w)
    for length in sorted(groups):
        ws = groups[length]
        for b in range(0, len(ws), cfg.batch_size):
            chunk = ws[b: b + cfg.batch_size]
            inp = np.stack([tokens[s:e] for s, e, _ in chunk])
            lp = _log_softmax(model.logits(inp))
            for row, (s, e, first) in enumerate(chunk):
                tgt = tokens[s + 1: e + 1]
                pos = np.arange(s + 1, e + 1)
                keep = pos >= first
                total -= float(lp[row, np.arange(length)[keep], tgt[keep]].sum())
                count += int(keep.sum())
    return total, count


def sliding_perplexity(model, tokens, cfg: EvalConfig) -> float:
    if len(tokens) == 0:
        raise ValueError("perplexity of empty text")
    total, count = sliding_nll(model, tokens, cfg)
    return math.exp(total / count)


# ---------------------------------------------------------------- multiple choice


def _option_sequences(item: McItem):
    p = encode(item.prompt)
    if len(p) == 0:
        raise ValueError("multiple-choice prompt must be non-empty")
    seqs = []
    for i, opt in enumerate(item.options):
        if not opt:
            raise ValueError(f"option {i} is empty")
        c = encode(continuation(i, opt))
        seqs.append((np.concatenate([p, c]), len(p), len(c)))
    return seqs


def _mean_loglik(model, seqs, batch_size: int) -> list[float]:
    """Mean per-token log-likelihood of each continuation given its prefix."""
    scores = [0.0] * len(seqs)
    for b in range(0, len(seqs), batch_size):
        chunk = seqs[b: b + batch_size]
        L = max(len(t) for t, _, _ in chunk) - 1
        inp = np.zeros((len(chunk), L), dtype=np.int64)
        for r, (t, _, _) in enumerate(chunk):
            inp[r, : len(t) - 1] = t[:-1]
        lp = _log_softmax(model.logits(inp))
        for r, (t, plen, clen) in enumerate(chunk):
            pos = np.arange(plen - 1, plen - 1 + clen)
            scores[b + r] = float(lp[r, pos, t[plen: plen + clen]].mean())
    return scores


def _argmax_first(xs) -> int:
    best = 0
    for i, x in enumerate(xs):
        if x > xs[best]:
            best = i
    return best


def score_mc(model, item: McItem, batch_size: int = 32) -> tuple[int, list[float]]:
    scores = _mean_loglik(model, _option_sequences(item), batch_size)
    return _argmax_first(scores), scores


def score_mc_batch(model, items: list[McItem], batch_size: int = 32) -> list[tuple[int, list[float]]]:
    seqs, spans = [], []
    for it in items:
        s = _option_sequences(it)
        spans.append((len(seqs), len(s)))
        seqs.extend(s)
    flat = _mean_loglik(model, seqs, batch_size)
    out = []
    for start, n in spans:
        sc = flat[start: start + n]
        out.append((_argmax_first(sc), sc))
    return out


# ---------------------------------------------------------------- QA

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower().translate(_PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def alias_match(prediction: str, aliases: list[str]) -> bool:
    pred = normalize_answer(prediction)
    return any(a and a in pred for a in (normalize_answer(x) for x in aliases))


def greedy_decode(model, prompts: list[np.ndarray], max_new_tokens: int, max_len: int | None = None) -> list[np.ndarray]:
    """Batched greedy continuation; right padding is safe under causal attention."""
    B = len(prompts)
    lens = np.array([len(p) for p in prompts])
    if (lens == 0).any():
        raise ValueError("cannot decode from an empty prompt")
    L = int(lens.max()) + max_new_tokens
    if max_len is not None and L > max_len:
        raise ValueError(f"prompt plus {max_new_tokens} new tokens exceeds max length {max_len}")
    buf = np.zeros((B, L), dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, : len(p)] = p
    cur = lens.copy()
    rows = np.arange(B)
    for _ in range(max_new_tokens):
        width = int(cur.max())
        logits = model.logits(buf[:, :width])
        nxt = np.argmax(logits[rows, cur - 1], axis=-1)
        buf[rows, cur] = nxt
        cur += 1
    return [buf[i, lens[i]: cur[i]] for i in range(B)]


def score_qa(model, item: QaItem, cfg: EvalConfig) -> bool:
    out = greedy_decode(model, [encode(item.question)], cfg.max_new_tokens)[0]
    return alias_match(decode(out), item.aliases)


def score_qa_batch(model, items: list[QaItem], cfg: EvalConfig) -> list[bool]:
    results = []
    for b in range(0, len(items), cfg.batch_size):
        chunk = items[b: b + cfg.batch_size]
        outs = greedy_decode(model, [encode(it.question) for it in chunk], cfg.max_new_tokens)
        results.extend(alias_match(decode(o), it.aliases) for o, it in zip(outs, chunk))
    return results


# ---------------------------------------------------------------- report


def evaluate(model, mc_items: list[McItem], qa_items: list[QaItem], text_tokens, cfg: EvalConfig,
             seed: int | None = None) -> EvalReport:
    if not mc_items or not qa_items or len(text_tokens) == 0:
        raise ValueError("evaluation needs non-empty MC, QA and text datasets")
    mc = mc_items[: cfg.slice_size]
    qa = qa_items[: cfg.slice_size]
    mc_hits = [int(chosen == it.answer_index) for (chosen, _), it in zip(score_mc_batch(model, mc, cfg.batch_size), mc)]
    qa_hits = [int(x) for x in score_qa_batch(model, qa, cfg)]
    nll, count = sliding_nll(model, text_tokens, cfg)
    return EvalReport(
        mc_accuracy=sum(mc_hits) / len(mc_hits),
        perplexity=math.exp(nll / count),
        qa_accuracy=sum(qa_hits) / len(qa_hits),
        n_mc=len(mc), n_qa=len(qa), n_ppl_tokens=count,
        config=asdict(cfg), seed=seed,
    )
