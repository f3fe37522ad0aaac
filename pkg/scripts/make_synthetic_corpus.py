"""Write the synthetic tone-pattern corpus as WAV files plus a manifest.

    python3 scripts/make_synthetic_corpus.py data/synth
    voicequery train --manifest data/synth/manifest.tsv --c 32 --k 96 --d 48 --r-hidden 64
"""

import argparse

from voicequery.synth import make_corpus, write_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root")
    p.add_argument("--queries", type=int, default=12)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--unknown", type=int, default=2000)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    examples = make_corpus(a.queries, a.per_class, a.unknown, a.seed, a.seconds)
    print(write_corpus(a.root, examples, a.queries))


if __name__ == "__main__":
    main()
