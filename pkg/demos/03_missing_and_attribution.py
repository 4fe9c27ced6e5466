"""Masking one view, then asking each branch which regions it relied on.

Run: python3 demos/03_missing_and_attribution.py
"""

import numpy as np

from neurofuse.attribution import branch_overlap, class_average_map, cv_maps
from neurofuse.cohort import distant_pairs, generate_cohort
from neurofuse.config import TrainConfig
from neurofuse.trainer import prepare_inputs, run_cv


def main():
    easy = generate_cohort(100, mode="easy", seed=1)
    inputs = prepare_inputs(easy)
    cfg = TrainConfig(epochs=20)
    for branch in ("img", "roi"):
        row = []
        for rate in (0.0, 0.1, 0.3, 0.5):
            res = run_cv(easy, cfg.replace(mask_branch=branch, mask_rate=rate), inputs=inputs)
            row.append(f"{rate:.1f}:{res.mean('acc'):.2f}")
        print(f"{branch} masked  " + "  ".join(row))

    cohort = generate_cohort(100, mode="roi_only", seed=2)
    carriers = sorted({r for p in distant_pairs(cohort.atlas)[:4] for r in p})
    print("\ncarrier ROIs:", carriers)
    averages = {}
    for branches, tag in (("roi", "roi"), ("joint", "joint")):
        maps, _ = cv_maps(cohort, cfg.replace(branches=branches))
        averages[tag] = class_average_map(maps, "disorder")
        top = np.argsort(-averages[tag].scores)[:4] + 1
        print(f"{tag:>5} map, top ROIs for disorder: {sorted(top.tolist())}")
    print("joint vs roi top-25% overlap:", branch_overlap(averages["joint"], averages["roi"]))


if __name__ == "__main__":
    main()
