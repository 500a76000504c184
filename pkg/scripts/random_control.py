"""Pseudo-labels from a trained teacher vs a random network vs an untrained student."""

import argparse

from cctransfer import transfer
from cctransfer.transfer import BlobSpec, Dataset, PipelineConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seeds", default="0,1,2,3,4")
    args = p.parse_args()

    print(f"{'seed':>4}  {'transfer':>8}  {'random':>8}  {'untrained':>9}  {'supervised':>10}  {'distill':>7}")
    for seed in (int(s) for s in args.seeds.split(",")):
        data = Dataset.from_blobs(BlobSpec(), seed)
        out = {m: transfer.run_pipeline(PipelineConfig(data, data, k=10, seed=seed, mode=m))
               for m in transfer.MODES}
        ct = out["cluster_transfer"]
        print(f"{seed:>4}  {100 * ct.student_probe_acc:8.1f}  {100 * out['random_control'].student_probe_acc:8.1f}"
              f"  {100 * ct.untrained_probe_acc:9.1f}  {100 * ct.supervised_probe_acc:10.1f}"
              f"  {100 * out['regression_distill'].student_probe_acc:7.1f}")


if __name__ == "__main__":
    main()
