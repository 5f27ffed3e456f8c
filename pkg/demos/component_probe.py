"""Teach a frozen random transformer to answer "are x and y connected?" through its attention biases alone.

Only the structural-bias parameters are trained; the backbone keeps its random
weights. Run: python demos/component_probe.py   (about three minutes on one core)
"""
import numpy as np
import torch

from gtlm.data import choices_for, evaluate_accuracy, generate_dataset, scaled_spec
from gtlm.model import ModelConfig, fit, init_model, make_example
from gtlm.verification import format_attention_dump, mean_separation, probe_message_passing

torch.set_num_threads(1)
cfg = ModelConfig.create(n_layers=2, n_heads=4, d_head=16, d_ffn=128)

data = generate_dataset(scaled_spec("component_probe", seed=0, counts={"train": 2000, "val": 0, "test": 400}))
example = data["test"][0]
print("one test item:")
print("  nodes:", [n.raw_text for n in example.nodes])
print("  question:", example.question, "->", example.label)

# Without any bias the model cannot see the edges, so it guesses.
blind = init_model(cfg.with_bias(use_spd=False, use_rrwp=False, use_mag=False), seed=0, dtype=torch.float32)
print("\nzero-bias accuracy:", evaluate_accuracy(blind, data["test"])[0])

# Bias-only training (backbone lr = 0) with the loss restricted to Yes/No.
model = init_model(cfg, seed=0, dtype=torch.float32)
examples = [make_example(g, cfg, add_eos=False, choices=choices_for(g)) for g in data["train"]]
fit(model, examples, epochs=12, lr=0.0, lr_bias=2e-2, batch_size=16, seed=0, log=print)
print("trained accuracy:", evaluate_accuracy(model, data["test"])[0])

# Does attention respect components? Positive = more attention inside a component.
sep = mean_separation(model, data["test"][:100])
print("\nintra-minus-cross attention per layer/head:")
print(np.round(sep, 3))

print("\nnode-aggregated attention for the first test graph:")
print(format_attention_dump(probe_message_passing(model, example)))
