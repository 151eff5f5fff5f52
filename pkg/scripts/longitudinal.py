"""Session masks on a three-session cohort: intra- vs inter-subject ROI similarity."""
import argparse
import time

from volmask.dataio import SyntheticCohortSpec, generate_synthetic_cohort
from volmask.masker import MaskError, MaskOptConfig, optimize_session_mask, target_probability
from volmask.metrics import MaskContext, intra_inter_subject
from volmask.network import ArchitectureSpec
from volmask.trainer import CohortData, EarlyStopPolicy, TrainConfig, make_split, run_cv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--subjects", type=int, default=6)
    ap.add_argument("--variability", type=float, default=0.8)
    ap.add_argument("--multiplier", type=float, default=1.0)
    args = ap.parse_args()
    if args.subjects < 2:
        ap.error("--subjects must be at least 2 for an inter-subject comparison")

    c = generate_synthetic_cohort(SyntheticCohortSpec(seed=args.seed, sessions_per_subject=3,
                                                      regional_variability=args.variability))
    data = CohortData(c.manifest, c.volumes)
    plan = make_split(c.manifest, 5, 0, seed=2)
    (res,) = run_cv(data, plan, ArchitectureSpec.from_pattern(3, c.spec.shape, first_filters=4),
                    TrainConfig(stop=EarlyStopPolicy(5, 10)), seed=0, folds=[0])
    net = res.network
    print(f"classifier: validation BA {res.val_balanced_accuracy:.3f}")

    cfg = MaskOptConfig(lambda1=1e-6, lambda2=1e-5, learning_rate=10.0, session_multiplier=args.multiplier,
                        session_stop=EarlyStopPolicy(25, 300, "relative", 0.01))
    subjects = sorted(s for s in plan.folds[0][1] if s.startswith("sub-AD"))[:args.subjects]
    contexts, baselines = [], set()
    t = time.perf_counter()
    for pid in subjects:
        rows = c.manifest.sessions_of(pid)
        X, _ = data.arrays(rows)
        for row, x in zip(rows, X[:, 0]):
            try:
                r = optimize_session_mask(net, x, cfg)
            except MaskError as e:
                print(f"skip {pid} {row.session_id}: {e}")
                continue
            name = f"{pid}_{row.session_id}"
            p = target_probability(net, x, r.mask, cfg)[0]
            print(f"{name}: {r.epochs_run} steps, coverage {(r.mask < cfg.threshold).sum()}, p {p:.2e}")
            contexts.append(MaskContext(name, net, x[None], r.mask, pid))
            if row.session_id == rows[0].session_id:
                baselines.add(name)
    out = intra_inter_subject(contexts, c.atlas, baselines)
    print(f"\n{len(contexts)} masks in {time.perf_counter() - t:.0f}s")
    print(f"intra-subject ROI similarity {out['intra_roi_similarity']:.4f}")
    print(f"inter-subject ROI similarity {out['inter_roi_similarity']:.4f}")


if __name__ == "__main__":
    main()
