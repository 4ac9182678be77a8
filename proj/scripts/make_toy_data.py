#!/usr/bin/env python3
"""Regenerates the toy corpus under data/toy/.

A small template grammar over ~45 word types, with a handful of "flagged"
words mixed into the noun slots. The flagged share is tuned so unguided
sampling trips the attribute threshold on most prompts while guided sampling
can avoid it, and the trigram contexts are varied enough that per-step
entropies spread smoothly instead of piling onto a few atoms.

Deterministic: rerunning this script reproduces the committed files.
"""

import argparse
import collections
import random
from pathlib import Path

DETERMINERS = ["the", "a"]
NOUNS_CLEAN = [
    "fox", "crane", "miller", "tide", "lantern", "orchard", "river",
    "meadow", "sparrow", "kettle", "harbor", "cart", "loom", "cellar",
    "bridge",
]
NOUNS_FLAGGED = ["sludge", "venom", "filth", "grime", "rot", "bile", "muck", "scum"]
VERBS = ["carries", "follows", "gathers", "crosses", "mends", "watches", "fills", "leaves"]
ADJECTIVES = ["old", "quiet", "pale", "heavy"]
TAILS = ["slowly", "again", "north", "together"]
CONNECTORS = ["and", "while", "then"]

FLAGGED_NOUN_PROB = 0.24  # per noun slot; ~8% of all tokens end up flagged
ADJ_PROB = 0.35
TAIL_PROB = 0.4
SECOND_CLAUSE_PROB = 0.45


def zipf_choice(rng, pool):
    weights = [1.0 / (i + 1) ** 0.7 for i in range(len(pool))]
    return rng.choices(pool, weights=weights, k=1)[0]


def noun_phrase(rng, out):
    out.append(rng.choice(DETERMINERS))
    if rng.random() < ADJ_PROB:
        out.append(zipf_choice(rng, ADJECTIVES))
    if rng.random() < FLAGGED_NOUN_PROB:
        out.append(zipf_choice(rng, NOUNS_FLAGGED))
    else:
        out.append(zipf_choice(rng, NOUNS_CLEAN))


def sentence(rng):
    out = []
    noun_phrase(rng, out)
    out.append(zipf_choice(rng, VERBS))
    noun_phrase(rng, out)
    if rng.random() < TAIL_PROB:
        out.append(zipf_choice(rng, TAILS))
    if rng.random() < SECOND_CLAUSE_PROB:
        out.append(zipf_choice(rng, CONNECTORS))
        noun_phrase(rng, out)
        out.append(zipf_choice(rng, VERBS))
        noun_phrase(rng, out)
    return out


def all_words():
    return (DETERMINERS + NOUNS_CLEAN + NOUNS_FLAGGED + VERBS + ADJECTIVES +
            TAILS + CONNECTORS)


def write_corpus(path, rng, lines):
    counts = collections.Counter()
    rows = []
    for _ in range(lines):
        s = sentence(rng)
        counts.update(s)
        rows.append(" ".join(s))
    missing = [w for w in all_words() if counts[w] < 3]
    if missing:
        raise SystemExit(f"{path}: words seen fewer than 3 times: {missing}")
    total = sum(counts.values())
    flagged = sum(counts[w] for w in NOUNS_FLAGGED)
    path.write_text("\n".join(rows) + "\n")
    print(f"{path}: {lines} lines, {total} tokens, "
          f"{100.0 * flagged / total:.1f}% flagged, {len(counts)} word types")


def write_prompts(path, rng, count):
    rows = []
    for _ in range(count):
        det = rng.choice(DETERMINERS)
        noun = zipf_choice(rng, NOUNS_CLEAN)
        rows.append(f"{det} {noun}")
    path.write_text("\n".join(rows) + "\n")
    print(f"{path}: {count} prompts")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="data/toy")
    parser.add_argument("--seed", type=int, default=20240817)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    write_corpus(out / "train.txt", random.Random(args.seed), 1000)
    write_corpus(out / "heldout.txt", random.Random(args.seed + 1), 400)
    write_prompts(out / "prompts.txt", random.Random(args.seed + 2), 200)
    (out / "lexicon.txt").write_text("\n".join(NOUNS_FLAGGED) + "\n")
    print(f"{out / 'lexicon.txt'}: {len(NOUNS_FLAGGED)} flagged words")


if __name__ == "__main__":
    main()
