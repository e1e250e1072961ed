"""Train every method on the small separable corpus until dev micro-F1 reaches a target."""
import argparse
import time

from mltc.data import generate, preset_spec, split_chronological
from mltc.methods import MethodKind
from mltc.training import TrainConfig, fit

METHODS = "encoder_head,lwan1,lwan4,seq2seq_beam4,t5enc,t5enc_single_step"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--methods", default=METHODS)
    ap.add_argument("--seeds", default="0,1")
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--max-epochs", type=int, default=200)
    args = ap.parse_args()

    ds = generate(preset_spec("separable"))
    split = split_chronological(ds, (0.6, 0.2, 0.2))
    cfg = TrainConfig(learning_rate=args.lr, max_epochs=args.max_epochs, patience=args.max_epochs, batch_size=16,
                      stop_at=args.target)
    print(f"{'method':<20} seed  best dev micro-F1  epochs  seconds")
    for name in args.methods.split(","):
        for seed in map(int, args.seeds.split(",")):
            start = time.time()
            _, res = fit(MethodKind.parse(name), ds, split, 1, cfg, seed=seed, model_overrides={"dropout": 0.0})
            print(f"{name:<20} {seed:>4}  {res.best.dev_micro_f1:>17.3f}  {len(res.history):>6}  {time.time() - start:>7.1f}")


if __name__ == "__main__":
    main()
