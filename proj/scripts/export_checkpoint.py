#!/usr/bin/env python3
"""Checkpoint export interface.

Rewrites a pretrained checkpoint into the toolkit's tensor container and
tokenizer files. Only the interface lives here; the conversion itself is not
implemented yet.

Output layout (what `pertrace` loads):
  config.json        architecture descriptor
  model.safetensors  F32/F16/BF16 tensors under the names below
  vocab.json, merges.txt

GPT-2 style names (optionally prefixed with "transformer."):
  wte.weight, wpe.weight, ln_f.{weight,bias}, lm_head.weight (when untied)
  h.{l}.ln_1.{weight,bias}, h.{l}.ln_2.{weight,bias}
  h.{l}.attn.c_q / c_k / c_v.{weight,bias}   (split from c_attn)
  h.{l}.attn.c_proj.{weight,bias}, h.{l}.mlp.c_fc.{weight,bias}, h.{l}.mlp.c_proj.{weight,bias}

Llama style names:
  model.embed_tokens.weight, model.norm.weight, lm_head.weight (when untied)
  model.layers.{l}.input_layernorm.weight, model.layers.{l}.post_attention_layernorm.weight
  model.layers.{l}.self_attn.{q,k,v,o}_proj.{weight,bias?}
  model.layers.{l}.mlp.{gate,up,down}_proj.weight
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field

FAMILIES = ("gpt2", "llama")


@dataclass
class ExportManifest:
    source: str
    family: str
    renames: dict[str, str] = field(default_factory=dict)
    dtype_conversions: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)


class UnmappedTensorError(ValueError):
    """Raised with the list of source tensors that have no target name."""

    def __init__(self, names: list[str]):
        super().__init__("unmapped tensors: " + ", ".join(names))
        self.names = names


def export(model_id_or_path: str, family: str, out_path: str) -> ExportManifest:
    """Converts `model_id_or_path` into `out_path` and returns the manifest."""
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    raise NotImplementedError("checkpoint export is not implemented")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="export", description=__doc__.splitlines()[0])
    parser.add_argument("--model", required=True, help="model id or local checkpoint directory")
    parser.add_argument("--family", required=True, choices=FAMILIES)
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    try:
        export(args.model, args.family, args.out)
    except NotImplementedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
