"""
Sparse memory finetuning, end to end on a small corpus
======================================================

Pretrain a tiny byte-level transformer, bolt a memory layer onto it, warm the
memory up on general text, then teach it a new task while only a handful of
memory rows are allowed to move. Runs in well under a minute on one core.
"""

import numpy as np

from smf.data import encode, generate_toy_data, mc_examples
from smf.evalsuite import EvalConfig, evaluate
from smf.model import ModelConfig, Transformer, copy_model
from smf.selection import ScoringConfig
from smf.trainer import TrainConfig, collect_background_stats, pretrain, stage1_retrofit, stage2_sparse

data = generate_toy_data(seed=0, n_world=8, n_task=8, pretrain_chars=6000, retrofit_chars=3000,
                         eval_chars=800, mc_train_per_fact=4, mc_eval_per_fact=2)
print(data.mc_train[0].prompt + "A. " + data.mc_train[0].options[0])

# %% base model
base = Transformer(ModelConfig.toy(), seed=0)
rec = pretrain(base, data.pretrain_examples(64, fact_repeats=2),
               TrainConfig(lr=3e-3, epochs=30, warmup_steps=10, batch_size=16, max_seq_len=256))
print(f"pretrain: {rec.steps} steps, loss {rec.losses[0]:.2f} -> {rec.losses[-1]:.2f}")

ec = EvalConfig(window=64, stride=32, max_new_tokens=12, slice_size=200)
text = encode(data.eval_text)
before = evaluate(base, data.mc_eval, data.qa_eval, text, ec)

# %% stage 1: insert memory next to the MLPs and train only the memory
model = copy_model(base)
model.insert_memory("additive", seed=0)
rec = stage1_retrofit(model, data.retrofit_examples(64),
                      TrainConfig(lr=1e-2, epochs=8, warmup_steps=5, batch_size=16, max_seq_len=256))
print(f"retrofit: mean loss over the first five steps {np.mean(rec.losses[:5]):.2f}, "
      f"last five {np.mean(rec.losses[-5:]):.2f}")

# background statistics: one "document" per single-example batch
stats = collect_background_stats(model, [[e] for e in data.retrofit_examples(64)[:64]])

# %% stage 2: per-batch top-T rows of the value table, everything else frozen
values_before = {i: mp.values.data.copy() for i, mp in model.memory.items()}
rec = stage2_sparse(model, mc_examples(data.mc_train) * 3, stats, ScoringConfig("kl", T=16),
                    TrainConfig(lr=5e-2, epochs=1, warmup_steps=0, batch_size=4, max_seq_len=256))
for i, mp in model.memory.items():
    moved = np.any(mp.values.data != values_before[i], axis=1).sum()
    print(f"layer {i}: {moved} of {mp.values.shape[0]} value rows changed over {rec.steps} steps")

after = evaluate(model, data.mc_eval, data.qa_eval, text, ec)
print(f"task accuracy  {before.mc_accuracy:.3f} -> {after.mc_accuracy:.3f}")
print(f"perplexity     {before.perplexity:.3f} -> {after.perplexity:.3f}")
print(f"fact recall    {before.qa_accuracy:.3f} -> {after.qa_accuracy:.3f}")
