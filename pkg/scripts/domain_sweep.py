"""Cluster on one blob set and pseudo-label another, against the same-set baseline."""

import argparse

from cctransfer import transfer
from cctransfer.transfer import BlobSpec, Dataset, PipelineConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--k", type=int, default=10)
    args = p.parse_args()

    for seed in (int(s) for s in args.seeds.split(",")):
        a = Dataset.from_blobs(BlobSpec(), seed, name=f"A{seed}")
        b = Dataset.from_blobs(BlobSpec(), seed + 100, name=f"B{seed}")
        cfg = PipelineConfig(b, b, k=args.k, seed=seed, baselines=False)
        reports = transfer.sweep_domain(cfg, [(b, b), (a, b), (a, a)])
        print(transfer.domain_table(reports))
        print(f"drop when clustering on A: {100 * (reports[0].student_probe_acc - reports[1].student_probe_acc):.1f}"
              " points\n")


if __name__ == "__main__":
    main()
