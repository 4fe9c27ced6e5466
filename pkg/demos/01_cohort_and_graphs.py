"""Where each synthetic mode hides its label, seen through both views.

Run: python3 demos/01_cohort_and_graphs.py
"""

import numpy as np

from neurofuse.cohort import distant_pairs, generate_cohort
from neurofuse.roigraph import build_graph, pearson, roi_descriptor


def main():
    for mode in ("easy", "img_only", "roi_only", "complementary"):
        cohort = generate_cohort(40, mode=mode, noise=0.1, seed=0)
        vols = cohort.volumes()
        means = vols.mean(axis=(1, 2, 3))
        # the ROI view only ever sees per-ROI means and quantile descriptors
        a, b = distant_pairs(cohort.atlas)[0]
        corr = []
        for s in cohort.subjects:
            d = roi_descriptor(s.volume, cohort.atlas)
            corr.append(pearson(d[a - 1], d[b - 1]))
        corr = np.array(corr)
        y = cohort.labels
        print(f"{mode:>13}: global mean  class0 {means[y == 0].mean():+.3f}  "
              f"class1 {means[y == 1].mean():+.3f} | pair ({a},{b}) corr  "
              f"class0 {corr[y == 0].mean():.3f}  class1 {corr[y == 1].mean():.3f}")

    g = build_graph(cohort.subjects[0].volume, cohort.atlas)
    print("\nadjacency of subject 0 (first 4 ROIs):")
    print(np.array2string(g.adjacency[:4, :4], precision=3))
    print("propagation rows sum to", np.array2string(g.prop_matrix.sum(axis=1)[:4], precision=3))


if __name__ == "__main__":
    main()
