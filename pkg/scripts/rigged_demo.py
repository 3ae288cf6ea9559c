#!/usr/bin/env python3
"""End-to-end demo on a rigged deterministic mock.

Writes a three-species profile, a six-example manifest, and a mock table
into a work directory, then drives the CLI: classify with the two-stage
method, evaluate accuracy and genus analysis, and run retrieval scoring with
mAP.  Everything replays byte-identically.
"""

import argparse
import json
import sys
from pathlib import Path

from choicegate.cli import main as cli

LABELS = ["Ivory Gull", "Herring Gull", "Crested Auklet"]
CHARS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ ',.!?-"

REPLIES = {
    "img0": ("a small, pure-white gull with black eyes and ivory plumage", "Ivory Gull"),
    "img1": ("a large gray-backed herring gull on a pier", "Herring Gull"),
    "img2": ("a dark seabird with a crest and orange bill, a crested auklet", "Crested Auklet"),
    "img3": ("white gull, ivory plumage again", "Ivory Gull"),
    "img4": ("another herring gull, gray wings", "Herring Gull"),
    "img5": ("a white gull, hard to say which", "Herring Gull"),
}


def write_inputs(root: Path) -> None:
    (root / "choices.txt").write_text("\n".join(LABELS) + "\n", encoding="utf-8")
    (root / "genus.json").write_text(
        json.dumps({label: label.split()[-1] for label in LABELS}), encoding="utf-8"
    )
    (root / "profile.json").write_text(
        json.dumps(
            {
                "name": "gulls-demo",
                "type": "species",
                "domain": "bird",
                "choice_list_path": "choices.txt",
                "genus_map_path": "genus.json",
            }
        ),
        encoding="utf-8",
    )
    (root / "manifest.jsonl").write_text(
        "".join(
            json.dumps({"id": f"e{i}", "image": img, "label": label}) + "\n"
            for i, (img, (_, label)) in enumerate(sorted(REPLIES.items()))
        ),
        encoding="utf-8",
    )
    table = {
        "vocab": {"tokens": {c: i for i, c in enumerate(CHARS)}, "eos_id": len(CHARS)},
        "fallback_uniform": True,
        "generate_by_image": {img: reply for img, (reply, _) in REPLIES.items()},
        "generate_default": "no idea",
        "distributions": [
            {"when_contains": "ivory plumage", "probs": {"I": 0.8, "H": 0.1, "C": 0.1}},
            {"when_contains": "herring gull", "probs": {"I": 0.1, "H": 0.8, "C": 0.1}},
            {"when_contains": "crested auklet", "probs": {"I": 0.1, "H": 0.1, "C": 0.8}},
            # the vague response confuses the scorer toward the wrong gull,
            # a same-genus miss for the genus analysis to pick up
            {"when_contains": "hard to say which", "probs": {"I": 0.7, "H": 0.2, "C": 0.1}},
        ],
    }
    (root / "table.json").write_text(json.dumps(table), encoding="utf-8")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo_run")
    args = parser.parse_args()
    root = Path(args.workdir)
    root.mkdir(parents=True, exist_ok=True)
    write_inputs(root)

    common = [
        "--profile", str(root / "profile.json"),
        "--manifest", str(root / "manifest.jsonl"),
        "--mock", str(root / "table.json"),
    ]
    steps = [
        ["classify", *common, "--method", "nlg2choice", "--out", str(root / "cls"), "--overwrite"],
        ["retrieve", *common, "--method", "retrieval_trunc", "--out", str(root / "ret"), "--overwrite"],
        ["eval", "--kind", "accuracy", "--profile", str(root / "profile.json"),
         "--manifest", str(root / "manifest.jsonl"),
         "--cache", str(root / "cls" / "records.jsonl"), "--out", str(root / "eval_acc")],
        ["eval", "--kind", "genus", "--profile", str(root / "profile.json"),
         "--manifest", str(root / "manifest.jsonl"),
         "--cache", str(root / "cls" / "records.jsonl"), "--out", str(root / "eval_genus")],
        ["eval", "--kind", "map", "--profile", str(root / "profile.json"),
         "--manifest", str(root / "manifest.jsonl"),
         "--scores", str(root / "ret" / "scores.jsonl"), "--out", str(root / "eval_map")],
    ]
    for step in steps:
        print(f"\n$ choicegate {' '.join(step)}")
        code = cli(step)
        if code not in (0, 1):
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
