"""Train on a bAbI task file, then sweep rho over the trained model.

The bAbI corpus is not bundled; pass the path of any single-word-answer
task file (for example qa1_single-supporting-fact_train.txt).
"""

import argparse

from mannflow.data import load_babi, train_test_split
from mannflow.experiment import DEFAULT_RHOS, sweep
from mannflow.model import Dimensions
from mannflow.trainer import TrainConfig, accuracy, train


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--embed-dim", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the sweep CSV here")
    args = p.parse_args(argv)

    ds = load_babi(args.path)
    train_idx, test_idx = train_test_split(len(ds), 0)
    dims = Dimensions(len(ds.vocab), args.embed_dim, ds.vocab.num_answers, ds.max_story_length, args.hops)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, hops=args.hops, seed=args.seed)
    history = []
    model = train(ds.triples(train_idx), dims, cfg, history)
    print(f"{len(ds)} samples ({ds.skipped} skipped), final loss {history[-1].loss:.4f}, "
          f"test accuracy {accuracy(model, ds.triples(test_idx)):.3f}")

    result = sweep(model, ds, DEFAULT_RHOS)
    for r in result.rows:
        rho = "-" if r.rho is None else f"{r.rho:g}"
        print(f"{r.family:<10} {rho:>6} acc={r.accuracy:.4f} dots={r.mean_dot_products:.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(result.to_csv())


if __name__ == "__main__":
    main()
