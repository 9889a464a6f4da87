#!/usr/bin/env python3
"""Freeze a reference forward pass of a small random BertModel.

Writes config.json, weights.hta and reference.json (hidden states and
attention maps computed by transformers in float64) into the given
directory. Parameters that default to constants (biases, layer norms) are
perturbed so every tensor is exercised.
"""
import json
import sys

import torch
from transformers import BertConfig, BertModel

from export_bert import export


def main(out_dir):
    torch.manual_seed(1234)
    cfg = BertConfig(
        vocab_size=40,
        hidden_size=12,
        num_hidden_layers=2,
        num_attention_heads=3,
        intermediate_size=20,
        max_position_embeddings=16,
        type_vocab_size=2,
        hidden_act="gelu",
        layer_norm_eps=1e-12,
        attn_implementation="eager",
    )
    model = BertModel(cfg, add_pooling_layer=False).double().eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or "LayerNorm" in name:
                p.add_(0.1 * torch.randn_like(p))
            else:
                p.copy_(0.3 * torch.randn_like(p))
    export(model, out_dir)
    token_ids = [2, 17, 5, 33, 9, 3, 21, 8, 3]
    segment_ids = [0, 0, 0, 0, 0, 0, 1, 1, 1]
    with torch.no_grad():
        out = model(
            input_ids=torch.tensor([token_ids]),
            token_type_ids=torch.tensor([segment_ids]),
            output_hidden_states=True,
            output_attentions=True,
        )
    ref = {
        "token_ids": token_ids,
        "segment_ids": segment_ids,
        "hidden_states": [h[0].tolist() for h in out.hidden_states],
        "attentions": [a[0].tolist() for a in out.attentions],
    }
    with open(f"{out_dir}/reference.json", "w") as f:
        json.dump(ref, f)


if __name__ == "__main__":
    main(sys.argv[1])
