"""Byte-level tokenizer, dataset readers, and the synthetic toy corpora.

Task A is general text: grammar-generated prose plus a table of invented
"world facts" the base model memorises during pretraining (the recall probe).
Task B is a closed table of invented drug/condition facts asked as 4-choice
questions (the target task).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LABELS = "ABCD"


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def decode(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")


@dataclass
class McItem:
    prompt: str
    options: list[str]
    answer_index: int

    def __post_init__(self):
        if not self.options:
            raise ValueError("McItem needs at least one option")
        if not 0 <= self.answer_index < len(self.options):
            raise ValueError(f"answer_index {self.answer_index} out of range")


@dataclass
class QaItem:
    question: str
    aliases: list[str]

    def __post_init__(self):
        if not self.aliases:
            raise ValueError("QaItem needs at least one alias")


def continuation(label_index: int, option: str) -> str:
    return f"{LABELS[label_index]}. {option}"


# ---------------------------------------------------------------- readers


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(asdict(r) if not isinstance(r, dict) else r, sort_keys=True) + "\n")


def read_mc(path) -> list[McItem]:
    return [McItem(r["prompt"], list(r["options"]), int(r["answer_index"])) for r in read_jsonl(path)]


def read_qa(path) -> list[QaItem]:
    return [QaItem(r["question"], list(r["aliases"])) for r in read_jsonl(path)]


def read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


# ---------------------------------------------------------------- training examples


def text_examples(text: str, seq_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping chunks of ``seq_len + 1`` tokens, every token a target."""
    toks = encode(text)
    n = seq_len + 1
    out = []
    for s in range(0, len(toks) - 1, seq_len):
        chunk = toks[s: s + n]
        if len(chunk) >= 2:
            out.append((chunk, np.ones(len(chunk))))
    return out


def prompt_examples(pairs) -> list[tuple[np.ndarray, np.ndarray]]:
    """(prompt, completion) text pairs; only completion tokens are targets."""
    out = []
    for prompt, completion in pairs:
        p, c = encode(prompt), encode(completion)
        toks = np.concatenate([p, c])
        mask = np.concatenate([np.zeros(len(p)), np.ones(len(c))])
        out.append((toks, mask))
    return out


def mc_examples(items: list[McItem]) -> list[tuple[np.ndarray, np.ndarray]]:
    return prompt_examples((it.prompt, continuation(it.answer_index, it.options[it.answer_index]))
                           for it in items)


# ---------------------------------------------------------------- synthetic corpora

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "tr", "st", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "s", "l", "k", "th"]

_SUBJECTS = ["the farmer", "a child", "the old man", "my sister", "the teacher", "a sailor", "the baker",
             "our neighbor", "the doctor", "a stranger", "the king", "the young girl", "a soldier", "the poet"]
_VERBS = ["saw", "found", "carried", "painted", "sold", "lost", "bought", "remembered", "built", "opened",
          "cleaned", "watched", "followed", "visited"]
_OBJECTS = ["a small boat", "the red door", "an old map", "the silver key", "a basket of apples", "the garden",
            "a wooden chair", "the letter", "a bright lamp", "the tall tower", "a warm coat", "the river bank"]
_PLACES = ["near the market", "in the village", "by the sea", "under the bridge", "at the station",
           "in the forest", "on the hill", "behind the church", "across the field", "inside the house"]
_TIMES = ["in the morning", "at noon", "before dinner", "after the rain", "late at night", "last winter",
          "on sunday", "every day", "in the spring", "long ago"]
_LINKS = ["and then", "but later", "so", "because", "while"]

CONDITIONS = ["fever", "gout", "acne", "asthma", "anemia", "migraine", "insomnia", "eczema",
              "malaria", "arthritis", "bronchitis", "rickets", "scurvy", "vertigo", "jaundice", "measles"]


def _word(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS))
    return "".join(parts)


def _unique_words(rng: np.random.Generator, n: int, syllables: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = _word(rng, syllables)
        if w not in taken and len(w) <= 10:
            taken.add(w)
            out.append(w)
    return out


def _sentence(rng: np.random.Generator) -> str:
    clause = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)} {rng.choice(_PLACES)}"
    r = rng.random()
    if r < 0.3:
        clause += f" {rng.choice(_TIMES)}"
    elif r < 0.5:
        clause += f" {rng.choice(_LINKS)} {rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
    return clause[0].upper() + clause[1:] + "."


def general_text(rng: np.random.Generator, n_chars: int) -> str:
    out, size = [], 0
    while size < n_chars:
        para = " ".join(_sentence(rng) for _ in range(int(rng.integers(3, 7))))
        out.append(para)
        size += len(para) + 1
    return "\n".join(out)


def qa_prompt(country: str) -> str:
    return f"Question: What is the capital of {country}?\nAnswer:"


def mc_prompt(question: str) -> str:
    # options are not listed: each "{label}. {option}" continuation is scored on its own
    return f"Question: {question}\nAnswer: "


def _mc_item(rng, question, gold, pool) -> McItem:
    distract = [x for x in pool if x != gold]
    picks = list(rng.choice(distract, size=3, replace=False))
    opts = picks + [gold]
    order = rng.permutation(4)
    opts = [str(opts[i]) for i in order]
    return McItem(mc_prompt(question), opts, opts.index(gold))


@dataclass
class ToyData:
    pretrain_text: str
    retrofit_text: str
    eval_text: str
    world_facts: list[tuple[str, str]]
    world_mc: list[McItem]
    qa_eval: list[QaItem]
    mc_train: list[McItem]
    mc_eval: list[McItem]
    task_facts: list[tuple[str, str]]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "general_pretrain.txt").write_text(self.pretrain_text, encoding="utf-8")
        (out / "general_retrofit.txt").write_text(self.retrofit_text, encoding="utf-8")
        (out / "general_eval.txt").write_text(self.eval_text, encoding="utf-8")
        write_jsonl(out / "world_facts.jsonl", [{"entity": e, "value": v} for e, v in self.world_facts])
        write_jsonl(out / "world_mc.jsonl", self.world_mc)
        write_jsonl(out / "qa_eval.jsonl", self.qa_eval)
        write_jsonl(out / "task_facts.jsonl", [{"entity": e, "value": v} for e, v in self.task_facts])
        write_jsonl(out / "mc_train.jsonl", self.mc_train)
        write_jsonl(out / "mc_eval.jsonl", self.mc_eval)

    @classmethod
    def read(cls, data_dir) -> "ToyData":
        d = Path(data_dir)
        missing = [n for n in ("general_pretrain.txt", "general_retrofit.txt", "general_eval.txt",
                               "world_facts.jsonl", "world_mc.jsonl", "qa_eval.jsonl", "task_facts.jsonl",
                               "mc_train.jsonl", "mc_eval.jsonl") if not (d / n).exists()]
        if missing:
            raise FileNotFoundError(f"corpus directory {d} is missing {', '.join(missing)}")
        facts = lambda p: [(r["entity"], r["value"]) for r in read_jsonl(d / p)]  # noqa: E731
        return cls(read_text(d / "general_pretrain.txt"), read_text(d / "general_retrofit.txt"),
                   read_text(d / "general_eval.txt"), facts("world_facts.jsonl"), read_mc(d / "world_mc.jsonl"),
                   read_qa(d / "qa_eval.jsonl"), read_mc(d / "mc_train.jsonl"), read_mc(d / "mc_eval.jsonl"),
                   facts("task_facts.jsonl"))

    def fact_lines(self) -> list[tuple[str, str]]:
        qa = [(qa_prompt(e), f" {v}\n") for e, v in self.world_facts]
        stmt = [("", f"The capital of {e} is {v}.") for e, v in self.world_facts]
        return qa + stmt

    def pretrain_examples(self, seq_len: int, fact_repeats: int = 8) -> list:
        ex = text_examples(self.pretrain_text, seq_len)
        ex += prompt_examples(self.fact_lines()) * fact_repeats
        ex += mc_examples(self.world_mc)
        return ex

    def retrofit_examples(self, seq_len: int) -> list:
        """Task-A material for the dense retrofit and background statistics:
        general text chunks plus the world-fact lines, every token a target."""
        ex = text_examples(self.retrofit_text, seq_len)
        ex += prompt_examples(("", p + a) for p, a in self.fact_lines())
        return ex


def generate_toy_data(seed: int = 0, n_world: int = 48, n_task: int = 48, pretrain_chars: int = 60_000,
                      retrofit_chars: int = 20_000, eval_chars: int = 4_000, mc_train_per_fact: int = 8,
                      mc_eval_per_fact: int = 4, world_mc_per_fact: int = 2) -> ToyData:
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    countries = _unique_words(rng, n_world, 3, taken)
    cities = _unique_words(rng, n_world, 2, taken)
    world = list(zip(countries, cities))
    drugs = _unique_words(rng, n_task, 3, taken)
    task = [(dr, str(rng.choice(CONDITIONS))) for dr in drugs]

    world_mc = [_mc_item(rng, f"What is the capital of {e}?", v, cities)
                for e, v in world for _ in range(world_mc_per_fact)]
    qa_eval = [QaItem(qa_prompt(e), [v]) for e, v in world]
    q = "Which condition is treated by {}?"
    mc_train = [_mc_item(rng, q.format(dr), c, CONDITIONS) for dr, c in task for _ in range(mc_train_per_fact)]
    seen = {(it.prompt, tuple(it.options)) for it in mc_train}
    mc_eval = []
    for dr, c in task:
        made = 0
        while made < mc_eval_per_fact:
            it = _mc_item(rng, q.format(dr), c, CONDITIONS)
            if (it.prompt, tuple(it.options)) not in seen:
                seen.add((it.prompt, tuple(it.options)))
                mc_eval.append(it)
                made += 1
    return ToyData(
        pretrain_text=general_text(rng, pretrain_chars),
        retrofit_text=general_text(rng, retrofit_chars),
        eval_text=general_text(rng, eval_chars),
        world_facts=world, world_mc=world_mc, qa_eval=qa_eval,
        mc_train=mc_train, mc_eval=mc_eval, task_facts=task,
    )
