"""
How many parameters does each method touch?
===========================================

Pure arithmetic at the shapes of a 0.5B-parameter model: 24 layers of width
896, memory at layers 6, 12 and 18, 128 x 128 slots per memory, T = 512 rows
unlocked per step.
"""

from smf.model import LoraConfig, ModelConfig, audit_params

cfg = ModelConfig.qwen()
print(f"base model: {audit_params(cfg, 'full_ft').base_params:,} parameters")

rows = [
    ("full finetuning", audit_params(cfg, "full_ft")),
    ("LoRA r=16, all projections", audit_params(cfg, "lora", lora=LoraConfig(rank=16))),
    ("memory, replacing the MLPs", audit_params(cfg, "replacement", T=512)),
    ("memory, beside the MLPs", audit_params(cfg, "additive", T=512)),
    ("memory, beside, trainable mix", audit_params(cfg, "additive_s", T=512)),
]
print(f"{'method':32s} {'trainable':>13s} {'per step':>13s} {'size change':>13s}")
for name, a in rows:
    print(f"{name:32s} {a.trainable_total:13,d} {a.updated_per_step:13,d} {a.net_inference_size_delta:13,d}")

rep = audit_params(cfg, "replacement", T=512)
print()
print(f"memory modules in total: {rep.memory_params:,}")
print(f"  of which value rows:   {rep.memory_value_params:,}")
print(f"MLP weights removed:     {rep.replaced_mlp_params:,}  (3 layers x 3 matrices x 896 x 4864)")
print(f"rows moved per step:     {rep.updated_per_step // 896:,} of {rep.memory_value_params // 896:,}")
