#!/usr/bin/env python3
"""Convert a Hugging Face BertModel into an HTA1 weight archive plus config.

Usage: export_bert.py <model name or dir> <out dir> [--f32]

Writes <out>/config.json and <out>/weights.hta. Linear weights are
transposed to input x output layout.
"""
import argparse
import json
import os
import struct

import numpy as np


def write_archive(path, tensors, dtype="f64"):
    np_dtype = np.dtype("<f8") if dtype == "f64" else np.dtype("<f4")
    header = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np_dtype))
        raw = arr.tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    hjson = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"HTA1")
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for b in blobs:
            f.write(b)


def convert(model):
    cfg = model.config
    sd = {k: v.detach().cpu().double().numpy() for k, v in model.state_dict().items()}
    p = "embeddings."
    t = {
        "embeddings.word": sd[p + "word_embeddings.weight"],
        "embeddings.position": sd[p + "position_embeddings.weight"],
        "embeddings.type": sd[p + "token_type_embeddings.weight"],
        "embeddings.ln.gamma": sd[p + "LayerNorm.weight"],
        "embeddings.ln.beta": sd[p + "LayerNorm.bias"],
    }
    for l in range(cfg.num_hidden_layers):
        s = f"encoder.layer.{l}."
        d = f"layer.{l}."
        for ours, theirs in [("q", "self.query"), ("k", "self.key"), ("v", "self.value"), ("out", "output.dense")]:
            t[d + f"attn.{ours}.weight"] = sd[s + f"attention.{theirs}.weight"].T
            t[d + f"attn.{ours}.bias"] = sd[s + f"attention.{theirs}.bias"]
        t[d + "attn.ln.gamma"] = sd[s + "attention.output.LayerNorm.weight"]
        t[d + "attn.ln.beta"] = sd[s + "attention.output.LayerNorm.bias"]
        t[d + "mlp.fc1.weight"] = sd[s + "intermediate.dense.weight"].T
        t[d + "mlp.fc1.bias"] = sd[s + "intermediate.dense.bias"]
        t[d + "mlp.fc2.weight"] = sd[s + "output.dense.weight"].T
        t[d + "mlp.fc2.bias"] = sd[s + "output.dense.bias"]
        t[d + "mlp.ln.gamma"] = sd[s + "output.LayerNorm.weight"]
        t[d + "mlp.ln.beta"] = sd[s + "output.LayerNorm.bias"]
    head = cfg.hidden_size // cfg.num_attention_heads
    act = {"gelu": "exact-gelu", "gelu_new": "tanh-gelu", "gelu_pytorch_tanh": "tanh-gelu"}[cfg.hidden_act]
    config = {
        "n_layers": cfg.num_hidden_layers,
        "n_heads": cfg.num_attention_heads,
        "d_e": cfg.hidden_size,
        "d_q": head,
        "d_v": head,
        "d_ff": cfg.intermediate_size,
        "vocab_size": cfg.vocab_size,
        "max_position": cfg.max_position_embeddings,
        "type_vocab_size": cfg.type_vocab_size,
        "ln_eps": cfg.layer_norm_eps,
        "activation": act,
    }
    return config, t


def export(model, out_dir, dtype="f64"):
    os.makedirs(out_dir, exist_ok=True)
    config, tensors = convert(model)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, indent=2)
    write_archive(os.path.join(out_dir, "weights.hta"), tensors, dtype)
    return config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("model")
    ap.add_argument("out")
    ap.add_argument("--f32", action="store_true")
    args = ap.parse_args()
    from transformers import BertModel

    model = BertModel.from_pretrained(args.model)
    export(model, args.out, "f32" if args.f32 else "f64")


if __name__ == "__main__":
    main()
