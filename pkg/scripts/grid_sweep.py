"""Sweep one mask weight at a time on a freshly trained 24^3 classifier.

Prints coverage, minimum value, masked probability and in-ROI density share
per grid cell, then the ROI similarity of neighbouring cells on each axis.
"""
import argparse
import time

import numpy as np

from volmask.dataio import SyntheticCohortSpec, generate_synthetic_cohort
from volmask.masker import MaskOptConfig, grid_search_masks
from volmask.metrics import roi_density_vector, roi_similarity
from volmask.network import ArchitectureSpec
from volmask.trainer import CohortData, EarlyStopPolicy, TrainConfig, fold_rows, make_split, predict_proba, run_cv

AXES = {
    "lambda1": (1e-7, 1e-6, 1e-5, 1e-4),
    "lambda2": (1e-6, 1e-5, 1e-4, 1e-3),
    "beta1": (2.0, 1.0, 0.5, 0.1),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--images", type=int, default=16, help="training images per cell")
    ap.add_argument("--max-epochs", type=int, default=40)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    c = generate_synthetic_cohort(SyntheticCohortSpec(seed=args.seed))
    data = CohortData(c.manifest, c.volumes)
    plan = make_split(c.manifest, 5, 0, seed=2)
    t = time.perf_counter()
    (res,) = run_cv(data, plan, ArchitectureSpec.from_pattern(3, c.spec.shape, first_filters=4), TrainConfig(),
                    seed=args.seed, folds=[0])
    net = res.network
    print(f"classifier: validation BA {res.val_balanced_accuracy:.3f}, {time.perf_counter() - t:.0f}s")

    tr, va, _ = fold_rows(c.manifest, plan, 0)

    def correct(rows):
        X, _ = data.arrays([r for r in rows if r.label == "AD"])
        return X[predict_proba(net, X).argmax(axis=1) == 1, 0]

    cfg = MaskOptConfig(lambda1=1e-6, lambda2=1e-5, learning_rate=10.0,
                        stop=EarlyStopPolicy(5, args.max_epochs, "relative", 0.05))
    cells = [{k: v} for k, values in AXES.items() for v in values]
    t = time.perf_counter()
    results, rows = grid_search_masks(net, correct(tr)[:args.images], correct(va), cells, cfg, seed=args.seed,
                                      jobs=args.jobs)
    print(f"grid: {len(cells)} cells, {time.perf_counter() - t:.0f}s\n")

    roi = c.atrophy_mask
    print("axis     value     coverage  min     p_masked   in_roi")
    k = 0
    for axis, values in AXES.items():
        vecs = []
        for v in values:
            r, row = results[k], rows[k]
            d = 1.0 - r.mask
            share = d[roi].sum() / d.sum() if d.sum() > 0 else float("nan")
            print(f"{axis:8s} {v:<9g} {row['coverage']:8d}  {r.mask.min():.3f}   {row['masked_probability']:.2e}   {share:.3f}")
            vecs.append(roi_density_vector(r.mask, c.atlas))
            k += 1
        sims = [roi_similarity(a, b) for a, b in zip(vecs, vecs[1:])]
        print(f"{'':8s} neighbours: {['-' if s is None else round(s, 3) for s in sims]}\n")


if __name__ == "__main__":
    np.set_printoptions(precision=4)
    main()
