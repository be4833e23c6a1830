"""Regenerate the small BPE vocabulary shipped for the tiny CI model.

    python scripts/make_toy_tokenizer.py [--merges 128]
"""

import argparse
from importlib import resources

from zsal.prompts import ablation_tiers, expand_prompts, load_bank
from zsal.text import train_bpe, write_tokenizer_files

CLASSES = ["bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal nut",
           "pill", "screw", "tile", "toothbrush", "transistor", "wood", "zipper", "pcb board"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--merges", type=int, default=128)
    args = parser.parse_args()
    texts = []
    for cls in CLASSES:
        for bank in ablation_tiers(load_bank(class_name=cls)).values():
            for normal, abnormal in expand_prompts(bank):
                texts += [normal, abnormal]
    vocab, merges = train_bpe(texts, args.merges)
    data = resources.files("zsal.data")
    write_tokenizer_files(vocab, merges, data / "toy_vocab.txt", data / "toy_merges.txt")
    print(f"vocab size {len(vocab)}, {len(merges)} merges")


if __name__ == "__main__":
    main()
