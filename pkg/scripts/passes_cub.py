#!/usr/bin/env python3
"""Forward-pass accounting over the bundled 200-class bird list.

Builds a word-piece vocabulary from the class names (single characters plus
first words plus space-prefixed words), then prints the accounting table for
full, yes/no, and truncated scoring.  Pass --vocab to use a real vocabulary
file instead.
"""

import argparse
import json
import sys
from pathlib import Path

from choicegate.prompts import bundled_profile
from choicegate.report import passes_row, render_passes_table
from choicegate.tokenizer import Vocabulary, load_vocabulary
from choicegate.trie import build_trie


def word_piece_vocab(labels) -> Vocabulary:
    entries = {}

    def add(token):
        if token and token not in entries:
            entries[token] = len(entries)

    for label in labels:
        for ch in label:
            add(ch)
    for label in labels:
        words = label.split(" ")
        add(words[0])
        for word in words[1:]:
            add(" " + word)
    return Vocabulary(entries=entries, eos_id=len(entries))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--vocab", help="vocabulary file (default: derived word pieces)")
    parser.add_argument("--dump-vocab", help="write the derived vocabulary here")
    args = parser.parse_args()

    profile = bundled_profile("cub200")
    if args.vocab:
        vocab = load_vocabulary(args.vocab)
    else:
        vocab = word_piece_vocab(profile.choices.labels)
    if args.dump_vocab:
        Path(args.dump_vocab).write_text(
            json.dumps(vocab.to_file_dict(), ensure_ascii=False), encoding="utf-8"
        )
    trie = build_trie(profile.choices, vocab)
    sys.stdout.write(render_passes_table([passes_row("cub200", trie)]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
