#!/usr/bin/env python3
"""Records a greedy GPT-2 continuation as the smoke-test reference.

Writes reference_transcript.json next to the checkpoint:
  {"model": ..., "prompt": ..., "prompt_ids": [16 ids], "generated_ids": [...]}

The acceptance runner reads it when PERTRACE_GPT2_DIR points at that directory.
"""

import argparse
import json
import pathlib

import torch
from transformers import GPT2LMHeadModel, GPT2TokenizerFast

DEFAULT_PROMPT = "The capital of France is Paris, and the capital of Germany is the city of"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", default="gpt2", help="model id or local directory")
    parser.add_argument("--out", required=True, help="checkpoint directory to write the transcript into")
    parser.add_argument("--prompt", default=DEFAULT_PROMPT)
    parser.add_argument("--new-tokens", type=int, default=16)
    args = parser.parse_args()

    tok = GPT2TokenizerFast.from_pretrained(args.model)
    model = GPT2LMHeadModel.from_pretrained(args.model, torch_dtype=torch.float32).eval()
    ids = tok(args.prompt)["input_ids"][:16]
    if len(ids) != 16:
        raise SystemExit(f"prompt must tokenize to at least 16 tokens, got {len(ids)}")
    with torch.no_grad():
        out = model.generate(torch.tensor([ids]), max_new_tokens=args.new_tokens, do_sample=False,
                             pad_token_id=tok.eos_token_id)
    record = {
        "model": args.model,
        "prompt": tok.decode(ids),
        "prompt_ids": ids,
        "generated_ids": out[0, len(ids):].tolist(),
    }
    path = pathlib.Path(args.out) / "reference_transcript.json"
    path.write_text(json.dumps(record, indent=2) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
