"""Desk-scale training run on the synthetic corpus, in process.

Trains the scaled ConvRNN with the standard recipe (momentum SGD, step
learning rate, augmentation), picks the rejection threshold on the
validation split at the target FAR and reports both held-out operating
points. Takes about five minutes on one CPU core.
"""

import argparse
import logging
import time

from voicequery import evaluation as ev
from voicequery.data_io import WeightContainer, write_weights
from voicequery.frontend import DEFAULT_PCEN
from voicequery.model import Hyperparams
from voicequery.synth import make_corpus, split_examples
from voicequery.training import TrainConfig, evaluate, featurize, format_metrics, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-far", type=float, default=0.01)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--save", default=None, help="write final weights here")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    tr, va, te = split_examples(make_corpus(seed=a.seed))
    hp = Hyperparams(c=32, k=96, d=48, r_hidden=64, n_classes=13)
    cfg = TrainConfig(total_epochs=a.epochs, seed=a.seed, augment=None if a.no_augment else TrainConfig().augment)
    w, metrics = train(tr, va, hp, cfg)
    print("epoch\tlr\ttrain_loss\tval_far\tval_qer")
    print(format_metrics(metrics), end="")

    feats = {name: [featurize(x, None, None, DEFAULT_PCEN) for x, _ in part] for name, part in (("val", va), ("test", te))}
    _, _, val_records = evaluate(feats["val"], [y for _, y in va], w, hp)
    _, _, test_records = evaluate(feats["test"], [y for _, y in te], w, hp)
    try:
        point = ev.pick_alpha(val_records, hp.unknown, a.target_far)
    except ev.TargetNotMetError as e:
        print(e)
        point = e.best
    rows = {
        "validation": point,
        "test@0": ev.roc_sweep(test_records, [0.0], hp.unknown)[0],
        "test": ev.roc_sweep(test_records, [point.alpha], hp.unknown)[0],
    }
    print(ev.summary_table(rows), end="")
    print(f"{time.perf_counter() - t0:.0f} s")
    if a.save:
        write_weights(a.save, WeightContainer(hp, w))


if __name__ == "__main__":
    main()
