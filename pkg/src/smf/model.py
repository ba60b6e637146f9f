"""Decoder-only transformer with optional product-key memory at chosen layers.

Blocks are pre-norm: RMSNorm, grouped-query attention with rotary positions,
then a SwiGLU MLP. A memory layer can replace the MLP or be added next to it,
scaled by a per-layer ``alpha``.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor
from .pkm import MemoryConfig, MemoryParams, RetrievalResult, memory_forward

MODES = ("none", "replacement", "additive", "additive_s")
STAGES = ("retrofit", "sparse_task", "lora", "full_ft")
PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
MLP_PROJECTIONS = ("gate_proj", "up_proj", "down_proj")
CHECKPOINT_MAGIC = b"SMFCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d: int = 64
    n_layers: int = 4
    attn_heads: int = 4
    kv_heads: int = 2
    d_ff: int = 176
    max_seq_len: int = 256
    memory_layers: tuple[int, ...] = (1, 2)
    integration: str = "none"
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    alpha_init: float = 0.01
    tie_embeddings: bool = True
    qkv_bias: bool = False
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.attn_heads % self.kv_heads:
            raise ValueError("kv_heads must divide attn_heads")
        if self.d % self.attn_heads or (self.d // self.attn_heads) % 2:
            raise ValueError("head dim must be an even divisor of d")
        if any(not 0 <= i < self.n_layers for i in self.memory_layers):
            raise ValueError(f"memory_layers {self.memory_layers} outside [0, {self.n_layers})")
        if self.integration not in MODES:
            raise ValueError(f"unknown integration mode {self.integration!r}")
        if self.memory.d != self.d:
            raise ValueError("memory width must equal model width")
        object.__setattr__(self, "memory_layers", tuple(sorted(self.memory_layers)))

    @property
    def head_dim(self) -> int:
        return self.d // self.attn_heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def qwen(cls, **kw) -> "ModelConfig":
        """Qwen-2.5-0.5B shapes, for parameter accounting."""
        base = dict(vocab_size=151936, d=896, n_layers=24, attn_heads=14, kv_heads=2, d_ff=4864,
                    max_seq_len=1024, memory_layers=(6, 12, 18), memory=MemoryConfig.paper(),
                    tie_embeddings=True, qkv_bias=True)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["memory_layers"] = list(self.memory_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["memory"] = MemoryConfig(**d["memory"])
        d["memory_layers"] = tuple(d["memory_layers"])
        return cls(**d)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    targets: tuple[str, ...] = PROJECTIONS

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class ParamAudit:
    stored_adaptation_params: int
    net_inference_size_delta: int
    updated_per_step: int
    trainable_total: int
    base_params: int = 0
    memory_params: int = 0
    memory_value_params: int = 0
    replaced_mlp_params: int = 0


class Transformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.memory: dict[int, MemoryParams] = {}
        self.integration = "none"
        self.lora: LoraConfig | None = None
        self.training = False
        self.dropout_rng = np.random.default_rng(seed + 1)
        rng = np.random.default_rng(seed)
        d, std = cfg.d, 0.02

        def add(name, arr):
            self.params[name] = Parameter(arr.astype(self.dtype), name=name)

        add("embed", rng.normal(0, std, (cfg.vocab_size, d)))
        proj_std = std / math.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            add(p + "attn_norm", np.ones(d))
            add(p + "q_proj", rng.normal(0, std, (d, d)))
            add(p + "k_proj", rng.normal(0, std, (cfg.kv_dim, d)))
            add(p + "v_proj", rng.normal(0, std, (cfg.kv_dim, d)))
            add(p + "o_proj", rng.normal(0, proj_std, (d, d)))
            if cfg.qkv_bias:
                add(p + "q_bias", np.zeros(d))
                add(p + "k_bias", np.zeros(cfg.kv_dim))
                add(p + "v_bias", np.zeros(cfg.kv_dim))
            add(p + "mlp_norm", np.ones(d))
            add(p + "gate_proj", rng.normal(0, std, (cfg.d_ff, d)))
            add(p + "up_proj", rng.normal(0, std, (cfg.d_ff, d)))
            add(p + "down_proj", rng.normal(0, proj_std, (d, cfg.d_ff)))
        add("final_norm", np.ones(d))
        if not cfg.tie_embeddings:
            add("lm_head", rng.normal(0, std, (cfg.vocab_size, d)))

        hd = cfg.head_dim
        inv = 1.0 / cfg.rope_theta ** (np.arange(0, hd, 2) / hd)
        ang = np.outer(np.arange(cfg.max_seq_len), inv)
        ang = np.concatenate([ang, ang], axis=-1)
        self._cos = np.cos(ang).astype(self.dtype)
        self._sin = np.sin(ang).astype(self.dtype)

    # ------------------------------------------------------------ structure

    def insert_memory(self, mode: str, seed: int = 0) -> None:
        """Add freshly initialised memory layers in ``mode`` at cfg.memory_layers."""
        if mode not in MODES or mode == "none":
            raise ValueError(f"cannot insert memory with mode {mode!r}")
        if self.memory:
            raise RuntimeError("memory layers already inserted")
        rng = np.random.default_rng(seed)
        for i in self.cfg.memory_layers:
            mp = MemoryParams(self.cfg.memory, rng, dtype=self.dtype, prefix=f"layers.{i}.memory")
            self.memory[i] = mp
            self.params.update(mp.named())
            if mode == "replacement":
                for name in MLP_PROJECTIONS:
                    del self.params[f"layers.{i}.{name}"]
            else:
                self.params[f"layers.{i}.alpha"] = Parameter(
                    np.full(1, self.cfg.alpha_init, dtype=self.dtype), name=f"layers.{i}.alpha")
        self.integration = mode

    def alpha(self, layer: int) -> Parameter | None:
        return self.params.get(f"layers.{layer}.alpha")

    def integration_state(self) -> dict[int, dict]:
        out = {}
        for i in self.memory:
            a = self.alpha(i)
            out[i] = {"mode": self.integration,
                      "alpha": None if a is None else float(a.data[0]),
                      "alpha_trainable": bool(a is not None and a.trainable)}
        return out

    def value_params(self) -> dict[int, Parameter]:
        return {i: mp.values for i, mp in self.memory.items()}

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # ------------------------------------------------------------ forward

    def _proj(self, x: Tensor, layer: int, name: str) -> Tensor:
        key = f"layers.{layer}.{name}"
        out = nx.linear(x, self.params[key])
        a = self.params.get(key + ".lora_A")
        if a is not None:
            inp = x
            if self.training and self.lora.dropout > 0:
                keep = 1.0 - self.lora.dropout
                m = (self.dropout_rng.random(x.shape) < keep).astype(self.dtype) / keep
                inp = nx.mul(x, m)
            delta = nx.linear(nx.linear(inp, a), self.params[key + ".lora_B"])
            out = nx.add(out, nx.scale(delta, self.lora.scale))
        return out

    def attention(self, x: Tensor, layer: int) -> Tensor:
        cfg = self.cfg
        B, T, _ = x.shape
        g = cfg.attn_heads // cfg.kv_heads
        hd = cfg.head_dim
        p = f"layers.{layer}."
        q = self._proj(x, layer, "q_proj")
        k = self._proj(x, layer, "k_proj")
        v = self._proj(x, layer, "v_proj")
        if cfg.qkv_bias:
            q = nx.add(q, self.params[p + "q_bias"])
            k = nx.add(k, self.params[p + "k_bias"])
            v = nx.add(v, self.params[p + "v_bias"])
        cos, sin = self._cos[:T], self._sin[:T]
        q = nx.transpose(nx.reshape(q, (B, T, cfg.kv_heads, g, hd)), (0, 2, 3, 1, 4))
        k = nx.transpose(nx.reshape(k, (B, T, cfg.kv_heads, 1, hd)), (0, 2, 3, 1, 4))
        v = nx.transpose(nx.reshape(v, (B, T, cfg.kv_heads, 1, hd)), (0, 2, 3, 1, 4))
        q = nx.rope(q, cos, sin)
        k = nx.transpose(nx.rope(k, cos, sin), (0, 1, 2, 4, 3))
        scores = nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(hd))
        mask = np.triu(np.full((T, T), -np.inf, dtype=self.dtype), k=1)
        att = nx.matmul(nx.softmax(scores, mask), v)  # (B, kv, g, T, hd)
        att = nx.reshape(nx.transpose(att, (0, 3, 1, 2, 4)), (B, T, cfg.d))
        return self._proj(att, layer, "o_proj")

    def mlp(self, x: Tensor, layer: int) -> Tensor:
        gate = nx.silu(self._proj(x, layer, "gate_proj"))
        return self._proj(nx.mul(gate, self._proj(x, layer, "up_proj")), layer, "down_proj")

    def block_forward(self, x: Tensor, layer: int, mode: str | None = None, retrievals: dict | None = None) -> Tensor:
        if mode is None:
            mode = self.integration if layer in self.memory else "none"
        if mode != "none" and layer not in self.memory:
            raise ValueError(f"integration mode {mode!r} requested on layer {layer} without memory")
        p = f"layers.{layer}."
        x = nx.add(x, self.attention(nx.rmsnorm(x, self.params[p + "attn_norm"], self.cfg.norm_eps), layer))
        h = nx.rmsnorm(x, self.params[p + "mlp_norm"], self.cfg.norm_eps)
        if mode == "none":
            return nx.add(x, self.mlp(h, layer))
        mem, res = memory_forward(h, self.memory[layer], self.cfg.memory)
        if retrievals is not None:
            retrievals[layer] = res
        if mode == "replacement":
            return nx.add(x, mem)
        branch = nx.mul(mem, self.params[p + "alpha"])
        return nx.add(nx.add(x, self.mlp(h, layer)), branch)

    def forward(self, tokens: np.ndarray, retrievals: dict | None = None) -> Tensor:
        """Logits (B, T, vocab) for integer tokens (B, T)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = nx.take(self.params["embed"], tokens)
        for i in range(self.cfg.n_layers):
            x = self.block_forward(x, i, retrievals=retrievals)
        x = nx.rmsnorm(x, self.params["final_norm"], self.cfg.norm_eps)
        head = self.params["embed"] if self.cfg.tie_embeddings else self.params["lm_head"]
        return nx.linear(x, head)

    __call__ = forward

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self.forward(tokens).data


def block_forward(model: Transformer, x, layer: int, mode: str | None = None) -> Tensor:
    return model.block_forward(nx.as_tensor(x), layer, mode)


# ---------------------------------------------------------------- LoRA


def apply_lora(model: Transformer, cfg: LoraConfig, seed: int = 0) -> Transformer:
    if model.lora is not None:
        raise RuntimeError("LoRA adapters already applied")
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.trainable = False
    for i in range(model.cfg.n_layers):
        for name in cfg.targets:
            key = f"layers.{i}.{name}"
            w = model.params.get(key)
            if w is None:
                continue  # replaced MLP
            out_dim, in_dim = w.shape
            model.params[key + ".lora_A"] = Parameter(
                rng.normal(0, 0.02, (cfg.rank, in_dim)).astype(model.dtype), name=key + ".lora_A")
            model.params[key + ".lora_B"] = Parameter(
                np.zeros((out_dim, cfg.rank), dtype=model.dtype), name=key + ".lora_B")
    model.lora = cfg
    return model


def merge_lora(model: Transformer) -> Transformer:
    """Fold adapters into the base weights and drop them."""
    if model.lora is None:
        raise RuntimeError("no LoRA adapters to merge")
    for key in [k for k in model.params if k.endswith(".lora_A")]:
        base = key[: -len(".lora_A")]
        a = model.params.pop(key).data
        b = model.params.pop(base + ".lora_B").data
        model.params[base].data = model.params[base].data + model.lora.scale * (b @ a)
    model.lora = None
    return model


# ---------------------------------------------------------------- trainability


def set_trainability(model: Transformer, stage: str) -> None:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage in ("retrofit", "sparse_task") and not model.memory:
        raise ValueError(f"stage {stage!r} requires memory layers")
    if stage == "lora" and model.lora is None:
        raise ValueError("stage 'lora' requires adapters; call apply_lora first")
    for name, p in model.params.items():
        p.row_mask = None
        if stage == "retrofit":
            p.trainable = ".memory." in name or name.endswith(".alpha")
        elif stage == "sparse_task":
            p.trainable = name.endswith(".memory.values") or (
                name.endswith(".alpha") and model.integration == "additive_s")
        elif stage == "lora":
            p.trainable = ".lora_" in name
        else:
            p.trainable = ".memory." not in name and ".lora_" not in name and not name.endswith(".alpha")


# ---------------------------------------------------------------- accounting


def _base_count(cfg: ModelConfig) -> int:
    d = cfg.d
    per_layer = (2 * d * d + 2 * cfg.kv_dim * d + 3 * d * cfg.d_ff + 2 * d)
    if cfg.qkv_bias:
        per_layer += d + 2 * cfg.kv_dim
    total = cfg.vocab_size * d + cfg.n_layers * per_layer + d
    if not cfg.tie_embeddings:
        total += cfg.vocab_size * d
    return total


def lora_param_count(cfg: ModelConfig, lora: LoraConfig, skip_layers: tuple[int, ...] = ()) -> int:
    shapes = {
        "q_proj": (cfg.d, cfg.d), "k_proj": (cfg.kv_dim, cfg.d), "v_proj": (cfg.kv_dim, cfg.d),
        "o_proj": (cfg.d, cfg.d), "gate_proj": (cfg.d_ff, cfg.d), "up_proj": (cfg.d_ff, cfg.d),
        "down_proj": (cfg.d, cfg.d_ff),
    }
    total = 0
    for i in range(cfg.n_layers):
        for name in lora.targets:
            if i in skip_layers and name in MLP_PROJECTIONS:
                continue
            out_dim, in_dim = shapes[name]
            total += lora.rank * (in_dim + out_dim)
    return total


def audit_params(cfg: ModelConfig, mode: str, T: int = 512, lora: LoraConfig | None = None) -> ParamAudit:
    """Exact parameter accounting for a method.

    ``mode`` is one of full_ft, lora, replacement, additive, additive_s.
    """
    base = _base_count(cfg)
    L = len(cfg.memory_layers)
    mem_counts = cfg.memory.param_count()
    memory = L * sum(mem_counts.values())
    values = L * mem_counts["values"]
    replaced = L * 3 * cfg.d * cfg.d_ff
    if mode == "full_ft":
        return ParamAudit(0, 0, base, base, base_params=base)
    if mode == "lora":
        n = lora_param_count(cfg, lora or LoraConfig())
        return ParamAudit(n, 0, n, n, base_params=base)
    if mode not in ("replacement", "additive", "additive_s"):
        raise ValueError(f"unknown audit mode {mode!r}")
    scalars = 0 if mode == "replacement" else L
    stored = memory + scalars
    delta = stored - replaced if mode == "replacement" else stored
    per_step = L * T * cfg.d + (L if mode == "additive_s" else 0)
    trainable = values + (L if mode == "additive_s" else 0)
    return ParamAudit(stored, delta, per_step, trainable, base_params=base, memory_params=memory,
                      memory_value_params=values, replaced_mlp_params=replaced)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Transformer, path, extra: dict | None = None) -> None:
    """Header JSON then raw float32 little-endian tensors, in header order."""
    tensors, blobs, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw),
                        "trainable": p.trainable})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "integration": model.integration,
        "integration_state": {str(k): v for k, v in model.integration_state().items()},
        "lora": None if model.lora is None else asdict(model.lora),
        "tensors": tensors,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
        f.write(hb)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path, dtype=np.float32) -> Transformer:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    body = data[20 + hlen:]
    cfg = ModelConfig.from_dict(header["config"])
    model = Transformer(cfg, dtype=dtype)
    model.params = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body, dtype="<f4", count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"]).astype(dtype)
        model.params[t["name"]] = Parameter(arr, name=t["name"], trainable=t["trainable"])
    model.integration = header["integration"]
    for i in cfg.memory_layers if model.integration != "none" else ():
        mp = MemoryParams.__new__(MemoryParams)
        mp.cfg = cfg.memory
        for n in MemoryParams.NAMES:
            setattr(mp, n, model.params[f"layers.{i}.memory.{n}"])
        model.memory[i] = mp
    if header["lora"] is not None:
        lo = header["lora"]
        model.lora = LoraConfig(lo["rank"], lo["alpha"], lo["dropout"], tuple(lo["targets"]))
    return model


def copy_model(model: Transformer) -> Transformer:
    """Deep copy preserving structure, dtype and trainability."""
    new = Transformer.__new__(Transformer)
    new.__dict__.update(model.__dict__)
    new.params = {k: Parameter(v.data.copy(), name=k, trainable=v.trainable) for k, v in model.params.items()}
    new.memory = {}
    for i in model.memory:
        mp = MemoryParams.__new__(MemoryParams)
        mp.cfg = model.cfg.memory
        for n in MemoryParams.NAMES:
            setattr(mp, n, new.params[f"layers.{i}.memory.{n}"])
        new.memory[i] = mp
    new.dropout_rng = copy.deepcopy(model.dropout_rng)
    return new


__all__ = [
    "ModelConfig", "LoraConfig", "ParamAudit", "Transformer", "block_forward", "apply_lora", "merge_lora",
    "set_trainability", "audit_params", "lora_param_count", "save_checkpoint", "load_checkpoint",
    "copy_model", "RetrievalResult",
]
