"""Run one of the synthetic experiments and save its checkpoint and history.

    python3 scripts/run_experiment.py generalize_ships --out results/ships
"""

import argparse
from pathlib import Path

from segkit.engine import save_checkpoint
from segkit.experiments import EXPERIMENTS


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("name", choices=sorted(EXPERIMENTS))
    ap.add_argument("--epochs", type=int, default=None, help="override the experiment's epoch count")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="directory for checkpoint.segc and history.csv")
    args = ap.parse_args()

    def show(e):
        per_class = " ".join(f"{v:.4f}" for v in e.val_iou) or "-"
        print(f"epoch {e.epoch:>3}  loss {e.loss:.5f}  train mIoU {e.train_miou:.4f}  val IoU [{per_class}]  {e.seconds:.1f}s", flush=True)

    kwargs = {"seed": args.seed, "callback": show}
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    r = EXPERIMENTS[args.name](**kwargs)
    print(f"final train IoU {[round(v, 4) for v in r.train_iou]}  val IoU {[round(v, 4) for v in r.val_iou]}  {r.seconds / 60:.1f} min")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(r.checkpoint, out / "checkpoint.segc")
        r.history.write(out / "history.csv")
        print(f"wrote {out}/checkpoint.segc and {out}/history.csv")


if __name__ == "__main__":
    main()
