"""Toy-scale experiment runner: the nine conditions, seed sweeps, summaries,
Pareto frontiers, and report files.

Run directory layout under ``out``::

    base/model.ckpt                      pretrained toy base model
    retrofit/{arch}/seed{n}/model.ckpt   stage-1 checkpoint (+ stats.json)
    runs/{condition}/seed{n}/            report.json, log.jsonl, model.ckpt
    results.csv, summaries.json, pareto_*.json, plot_*.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .data import ToyData, encode, generate_toy_data, mc_examples
from .evalsuite import EvalConfig, EvalReport, evaluate
from .model import LoraConfig, ModelConfig, Transformer, load_checkpoint, save_checkpoint
from .pkm import MemoryConfig
from .selection import ScoringConfig, load_stats, save_stats
from .trainer import (RunLog, TrainConfig, collect_background_stats, pretrain, run_baseline,
                      stage1_retrofit, stage2_sparse)

logger = logging.getLogger(__name__)

CONDITIONS = ("base", "replacement_kl", "replacement_tfidf", "additive_kl", "additive_tfidf",
              "additive_s_kl", "additive_s_tfidf", "lora", "full_ft")

LABELS = {
    "base": "Base", "replacement_kl": "Replacement sparse (KL)", "replacement_tfidf": "Replacement sparse (TF-IDF)",
    "additive_kl": "Additive sparse (KL)", "additive_tfidf": "Additive sparse (TF-IDF)",
    "additive_s_kl": "Additive sparse +S (KL)", "additive_s_tfidf": "Additive sparse +S (TF-IDF)",
    "lora": "LoRA", "full_ft": "Full finetune",
}

CSV_COLUMNS = ("condition", "medtask_acc_mean", "medtask_acc_std", "ppl_mean", "ppl_std",
               "qa_acc_mean", "qa_acc_std")


def parse_condition(name: str) -> tuple[str, str | None]:
    """'additive_s_kl' -> ('additive_s', 'kl'); 'lora' -> ('lora', None)."""
    if name not in CONDITIONS:
        raise ValueError(f"unknown condition {name!r}; expected one of {', '.join(CONDITIONS)}")
    for rule in ("kl", "tfidf"):
        if name.endswith("_" + rule):
            return name[: -len(rule) - 1], rule
    return name, None


def family(name: str) -> str:
    return parse_condition(name)[0]


def marker(name: str) -> str:
    rule = parse_condition(name)[1]
    return {"kl": "circle", "tfidf": "triangle"}.get(rule, "square")


# ---------------------------------------------------------------- config


DEFAULTS: dict = {
    "conditions": list(CONDITIONS),
    "seeds": [0, 1, 2],
    "paths.data": "data",
    "paths.out": "runs",
    "data.seed": 0,
    "data.n_world": 48,
    "data.n_task": 48,
    "data.pretrain_chars": 60000,
    "data.retrofit_chars": 20000,
    "data.eval_chars": 4000,
    "data.mc_train_per_fact": 8,
    "data.mc_eval_per_fact": 4,
    "model.vocab_size": 256,
    "model.d": 64,
    "model.n_layers": 4,
    "model.attn_heads": 4,
    "model.kv_heads": 2,
    "model.d_ff": 176,
    "model.max_seq_len": 256,
    "model.memory_layers": [1, 2],
    "model.alpha_init": 0.01,
    "memory.n_k": 32,
    "memory.heads": 2,
    "memory.k": 4,
    "memory.key_dim": 32,
    "train.batch_size": 16,
    "train.warmup_steps": 5,
    "train.max_grad_norm": 1.0,
    "train.weight_decay": 0.01,
    "pretrain.seed": 0,
    "pretrain.lr": 3e-3,
    "pretrain.epochs": 16,
    "pretrain.seq_len": 96,
    "pretrain.warmup_steps": 50,
    "retrofit.lr": 1e-2,
    "retrofit.epochs": 6,
    "retrofit.seq_len": 96,
    "background.batches": 128,
    "sparse.lr": 5e-2,
    "sparse.epochs": 3,
    "sparse.T": 32,
    "sparse.epsilon": 1e-10,
    "lora.lr": 2e-2,
    "lora.epochs": 3,
    "lora.rank": 4,
    "lora.alpha": 8.0,
    "lora.dropout": 0.05,
    "full_ft.lr": 5e-3,
    "full_ft.epochs": 3,
    "eval.window": 64,
    "eval.stride": 32,
    "eval.max_new_tokens": 16,
    "eval.slice_size": 200,
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    source_text: str = ""

    def __getitem__(self, key):
        return self.values[key]

    @property
    def conditions(self) -> list[str]:
        return list(self.values["conditions"])

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.values["seeds"]]

    @property
    def out(self) -> Path:
        return Path(self.values["paths.out"])

    @property
    def data_dir(self) -> Path:
        return Path(self.values["paths.data"])

    def model_config(self) -> ModelConfig:
        v = self.values
        mem = MemoryConfig(n_k=v["memory.n_k"], heads=v["memory.heads"], k=v["memory.k"],
                           key_dim=v["memory.key_dim"], d=v["model.d"])
        return ModelConfig(vocab_size=v["model.vocab_size"], d=v["model.d"], n_layers=v["model.n_layers"],
                           attn_heads=v["model.attn_heads"], kv_heads=v["model.kv_heads"], d_ff=v["model.d_ff"],
                           max_seq_len=v["model.max_seq_len"], memory_layers=tuple(v["model.memory_layers"]),
                           memory=mem, alpha_init=float(v["model.alpha_init"]))

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        v = self.values
        warm = v.get(f"{stage}.warmup_steps", v["train.warmup_steps"])
        return TrainConfig(lr=float(v[f"{stage}.lr"]), epochs=int(v[f"{stage}.epochs"]),
                           batch_size=int(v["train.batch_size"]), warmup_steps=int(warm),
                           max_grad_norm=float(v["train.max_grad_norm"]),
                           weight_decay=float(v["train.weight_decay"]), seed=seed,
                           max_seq_len=int(v["model.max_seq_len"]))

    def scoring_config(self, rule: str) -> ScoringConfig:
        return ScoringConfig(rule=rule, T=int(self.values["sparse.T"]), epsilon=float(self.values["sparse.epsilon"]))

    def lora_config(self) -> LoraConfig:
        v = self.values
        return LoraConfig(rank=int(v["lora.rank"]), alpha=float(v["lora.alpha"]), dropout=float(v["lora.dropout"]))

    def eval_config(self) -> EvalConfig:
        v = self.values
        return EvalConfig(window=int(v["eval.window"]), stride=int(v["eval.stride"]),
                          max_new_tokens=int(v["eval.max_new_tokens"]), slice_size=int(v["eval.slice_size"]))

    def validate(self) -> None:
        unknown = [c for c in self.conditions if c not in CONDITIONS]
        if unknown:
            raise ValueError(f"unknown conditions in config: {unknown}")
        if "base" not in self.conditions:
            raise ValueError("config must include the 'base' condition: drift is measured against it")
        if not self.seeds:
            raise ValueError("config needs at least one seed")
        self.model_config()


_STAGE_WARMUPS = {f"{st}.warmup_steps" for st in ("retrofit", "sparse", "lora", "full_ft")}


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config of flat dotted keys (nested mappings are flattened)."""
    text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of config keys")
    flat = _flatten(raw)
    flat.update(overrides or {})
    unknown = sorted(set(flat) - set(DEFAULTS) - _STAGE_WARMUPS)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    values = dict(DEFAULTS)
    values.update({k: _coerce(k, v) for k, v in flat.items()})
    cfg = ExperimentConfig(values, text)
    cfg.validate()
    return cfg


def _coerce(key: str, value):
    default = DEFAULTS.get(key, 0)
    try:
        if isinstance(default, bool) or isinstance(default, (list, str)):
            return value
        if isinstance(default, float):
            return float(value)
        return int(value)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r}: cannot interpret {value!r} as {type(default).__name__}") from None


def _architecture(mc: ModelConfig) -> dict:
    d = mc.to_dict()
    for k in ("memory", "memory_layers", "alpha_init", "integration"):
        d.pop(k)
    return d


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


# ---------------------------------------------------------------- runner


class Runner:
    """Executes pipeline steps for one config, caching artifacts under ``cfg.out``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.out
        self._data: ToyData | None = None

    # data
    def generate_data(self) -> ToyData:
        v = self.cfg.values
        data = generate_toy_data(
            seed=int(v["data.seed"]), n_world=int(v["data.n_world"]), n_task=int(v["data.n_task"]),
            pretrain_chars=int(v["data.pretrain_chars"]), retrofit_chars=int(v["data.retrofit_chars"]),
            eval_chars=int(v["data.eval_chars"]), mc_train_per_fact=int(v["data.mc_train_per_fact"]),
            mc_eval_per_fact=int(v["data.mc_eval_per_fact"]))
        data.write(self.cfg.data_dir)
        self._data = data
        return data

    @property
    def data(self) -> ToyData:
        if self._data is None:
            if not self.cfg.data_dir.exists():
                raise FileNotFoundError(
                    f"corpus directory {self.cfg.data_dir} does not exist; run generate-data first")
            self._data = ToyData.read(self.cfg.data_dir)
        return self._data

    def _ensure_out(self, path: Path) -> Path:
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {path}: {e}") from e
        return path

    def _open_log(self, d: Path) -> RunLog:
        """Fresh JSON-lines log whose first record echoes the config verbatim."""
        (d / "log.jsonl").unlink(missing_ok=True)
        log = RunLog(d / "log.jsonl")
        log.write({"event": "config", "text": self.cfg.source_text or yaml.safe_dump(self.cfg.values)})
        return log

    def _write_echo(self, d: Path) -> None:
        (d / "config.yaml").write_text(self.cfg.source_text or yaml.safe_dump(self.cfg.values))

    # base
    @property
    def base_path(self) -> Path:
        return self.out / "base" / "model.ckpt"

    def pretrain_base(self) -> Transformer:
        d = self._ensure_out(self.out / "base")
        v = self.cfg.values
        seed = int(v["pretrain.seed"])
        model = Transformer(self.cfg.model_config(), seed=seed)
        ex = self.data.pretrain_examples(int(v["pretrain.seq_len"]))
        log = self._open_log(d)
        try:
            pretrain(model, ex, self.cfg.train_config("pretrain", seed), log)
        finally:
            log.close()
        save_checkpoint(model, self.base_path)
        return model

    def base_model(self) -> Transformer:
        """The pretrained base, carrying this config's memory settings for later insertion."""
        if not self.base_path.exists():
            return self.pretrain_base()
        model = load_checkpoint(self.base_path)
        want = self.cfg.model_config()
        if _architecture(model.cfg) != _architecture(want):
            raise ValueError(f"base checkpoint {self.base_path} does not match the configured architecture; "
                             "re-run pretrain-toy or point paths.out elsewhere")
        model.cfg = replace(want, integration=model.cfg.integration)
        return model

    # stage 1 + stats
    def _retrofit_dir(self, arch: str, seed: int) -> Path:
        return self.out / "retrofit" / ("replacement" if arch == "replacement" else "additive") / f"seed{seed}"

    def retrofit(self, arch: str, seed: int) -> Transformer:
        d = self._retrofit_dir(arch, seed)
        ckpt = d / "model.ckpt"
        if ckpt.exists():
            return load_checkpoint(ckpt)
        self._ensure_out(d)
        model = self.base_model()
        model.insert_memory("replacement" if arch == "replacement" else "additive", seed=seed)
        ex = self.data.retrofit_examples(int(self.cfg["retrofit.seq_len"]))
        log = self._open_log(d)
        try:
            stage1_retrofit(model, ex, self.cfg.train_config("retrofit", seed), log)
        finally:
            log.close()
        save_checkpoint(model, ckpt)
        return model

    def background_batches(self) -> list:
        """Single-example background batches, a fixed shuffle of the retrofit material."""
        ex = self.data.retrofit_examples(int(self.cfg["retrofit.seq_len"]))
        order = np.random.default_rng(int(self.cfg["data.seed"])).permutation(len(ex))
        n = min(int(self.cfg["background.batches"]), len(ex))
        return [[ex[i]] for i in order[:n]]

    def collect_stats(self, arch: str, seed: int) -> dict:
        path = self._retrofit_dir(arch, seed) / "stats.json"
        if path.exists():
            return load_stats(path)
        model = self.retrofit(arch, seed)
        stats = collect_background_stats(model, self.background_batches())
        save_stats(path, stats)
        return stats

    # stage 2 / baselines
    def run_dir(self, condition: str, seed: int) -> Path:
        return self.out / "runs" / condition / f"seed{seed}"

    def train(self, condition: str, seed: int) -> Transformer:
        arch, rule = parse_condition(condition)
        d = self._ensure_out(self.run_dir(condition, seed))
        self._write_echo(d)
        task = mc_examples(self.data.mc_train)
        log = self._open_log(d)
        try:
            if arch == "base":
                model = self.base_model()
            elif rule is not None:
                model = self.retrofit(arch, seed)
                stats = self.collect_stats(arch, seed)
                model.integration = arch
                stage2_sparse(model, task, stats, self.cfg.scoring_config(rule),
                              self.cfg.train_config("sparse", seed), log)
            else:
                model = self.base_model()
                run_baseline(model, task, arch, self.cfg.train_config(arch, seed),
                             lora=self.cfg.lora_config(), log=log)
        finally:
            log.close()
        save_checkpoint(model, d / "model.ckpt")
        return model

    def evaluate(self, condition: str, seed: int, model: Transformer | None = None) -> EvalReport:
        d = self._ensure_out(self.run_dir(condition, seed))
        if model is None:
            ckpt = d / "model.ckpt"
            model = load_checkpoint(ckpt) if ckpt.exists() else self.train(condition, seed)
        data = self.data
        rep = evaluate(model, data.mc_eval, data.qa_eval, encode(data.eval_text), self.cfg.eval_config(), seed=seed)
        rep.save(d / "report.json")
        return rep

    def run(self, condition: str, seed: int) -> EvalReport:
        model = self.train(condition, seed)
        return self.evaluate(condition, seed, model)


# ---------------------------------------------------------------- aggregation


@dataclass
class ConditionSummary:
    condition: str
    n_seeds: int
    mc_mean: float
    mc_std: float
    ppl_mean: float
    ppl_std: float
    qa_mean: float
    qa_std: float

    def row(self) -> list:
        return [self.condition, self.mc_mean, self.mc_std, self.ppl_mean, self.ppl_std, self.qa_mean, self.qa_std]


def mean_std(xs) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for one value."""
    xs = [float(x) for x in xs]
    if not xs:
        raise ValueError("mean_std of no values")
    m = math.fsum(xs) / len(xs)
    if len(xs) < 2:
        return m, 0.0
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def summarize(condition: str, reports: list[EvalReport]) -> ConditionSummary:
    mc = mean_std(r.mc_accuracy for r in reports)
    ppl = mean_std(r.perplexity for r in reports)
    qa = mean_std(r.qa_accuracy for r in reports)
    return ConditionSummary(condition, len(reports), *mc, *ppl, *qa)


@dataclass
class ParetoSet:
    axis: str
    members: list[str]
    dominated: list[str]


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """Both coordinates are maximised."""
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


def pareto(points: dict[str, tuple[float, float]], axis: str) -> ParetoSet:
    """Non-dominated conditions for (task accuracy, ppl) or (task accuracy, qa).

    ``points`` maps condition -> (task accuracy, forgetting metric). Perplexity
    is minimised, QA accuracy maximised.
    """
    if axis not in ("wikitext", "qa"):
        raise ValueError(f"unknown pareto axis {axis!r}")
    if not points:
        raise ValueError("pareto needs at least one point")
    sign = -1.0 if axis == "wikitext" else 1.0
    pts = {c: (acc, sign * m) for c, (acc, m) in points.items()}
    # sort by task accuracy desc, then forgetting desc: a sweep keeps the best-so-far
    order = sorted(pts, key=lambda c: (-pts[c][0], -pts[c][1], c))
    members, dominated = [], []
    best_acc, best_y = -math.inf, -math.inf
    for c in order:
        acc, y = pts[c]
        if y > best_y or (y == best_y and acc == best_acc):
            members.append(c)
            if y > best_y:
                best_acc, best_y = acc, y
        else:
            dominated.append(c)
    keep = set(members)
    return ParetoSet(axis, [c for c in points if c in keep], [c for c in points if c not in keep])


def plot_data(summaries: list[ConditionSummary], axis: str) -> list[dict]:
    rows = []
    for s in summaries:
        if axis == "wikitext":
            x, xe = s.ppl_mean, s.ppl_std
        else:
            x, xe = s.qa_mean, s.qa_std
        rows.append({"x": x, "y": s.mc_mean, "x_err": xe, "y_err": s.mc_std, "label": LABELS[s.condition],
                     "condition": s.condition, "family": family(s.condition), "marker": marker(s.condition)})
    return rows


def results_csv(summaries: list[ConditionSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in summaries:
        w.writerow([s.condition] + [repr(float(x)) for x in s.row()[1:]])
    return buf.getvalue()


def read_results_csv(path) -> list[ConditionSummary]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            out.append(ConditionSummary(r["condition"], 0, float(r["medtask_acc_mean"]), float(r["medtask_acc_std"]),
                                        float(r["ppl_mean"]), float(r["ppl_std"]), float(r["qa_acc_mean"]),
                                        float(r["qa_acc_std"])))
    return out


def frontiers(summaries: list[ConditionSummary]) -> dict[str, ParetoSet]:
    return {
        "wikitext": pareto({s.condition: (s.mc_mean, s.ppl_mean) for s in summaries}, "wikitext"),
        "qa": pareto({s.condition: (s.mc_mean, s.qa_mean) for s in summaries}, "qa"),
    }


def emit_reports(summaries: list[ConditionSummary], out, frontier: dict[str, ParetoSet] | None = None) -> dict[str, Path]:
    if not summaries:
        raise ValueError("no summaries to report")
    out = Path(out)
    frontier = frontier or frontiers(summaries)
    files = {
        "results.csv": results_csv(summaries),
        "summaries.json": json.dumps([asdict(s) for s in summaries], indent=2),
        "pareto_wikitext.json": json.dumps(asdict(frontier["wikitext"]), indent=2),
        "pareto_qa.json": json.dumps(asdict(frontier["qa"]), indent=2),
        "plot_wikitext.json": json.dumps(plot_data(summaries, "wikitext"), indent=2),
        "plot_qa.json": json.dumps(plot_data(summaries, "qa"), indent=2),
    }
    written = {}
    for name, text in files.items():
        path = out / name
        try:
            path.write_text(text)
        except OSError as e:
            raise OSError(f"failed to write {path}: {e}") from e
        written[name] = path
    return written


def collect_reports(cfg: ExperimentConfig, conditions=None, seeds=None) -> dict[str, list[EvalReport]]:
    out = {}
    for c in conditions or cfg.conditions:
        reps = []
        for s in seeds or cfg.seeds:
            p = cfg.out / "runs" / c / f"seed{s}" / "report.json"
            if p.exists():
                reps.append(EvalReport.load(p))
        if reps:
            out[c] = reps
    return out


def run_experiment(cfg: ExperimentConfig, conditions=None, seeds=None) -> list[ConditionSummary]:
    cfg.validate()
    conditions = list(conditions or cfg.conditions)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    for c in conditions:
        parse_condition(c)
    runner = Runner(cfg)
    runner._ensure_out(cfg.out)
    _ = runner.data  # fail early on a missing corpus
    runner.base_model()
    summaries = []
    for c in conditions:
        reports = []
        for s in seeds:
            logger.info("running %s seed %d", c, s)
            reports.append(runner.run(c, s))
        summaries.append(summarize(c, reports))
    emit_reports(summaries, cfg.out)
    return summaries
