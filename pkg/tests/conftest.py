import numpy as np
import pytest

from volmask.dataio import SyntheticCohortSpec, generate_synthetic_cohort
from volmask.trainer import CohortData

TINY = SyntheticCohortSpec(shape=(12, 12, 12), n_subjects_per_class=10, atrophy_size=3, atlas_tiles=2, seed=5)


@pytest.fixture(scope="session")
def tiny_cohort():
    return generate_synthetic_cohort(TINY)


@pytest.fixture(scope="session")
def tiny_data(tiny_cohort):
    return CohortData(tiny_cohort.manifest, tiny_cohort.volumes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_trained(tiny_data):
    """A small classifier for the tiny cohort plus its fold-0 AD images (train, validation)."""
    from volmask.network import ArchitectureSpec
    from volmask.trainer import EarlyStopPolicy, TrainConfig, fold_rows, make_split, predict_proba, run_cv

    plan = make_split(tiny_data.manifest, 5, 0, 2)
    spec = ArchitectureSpec.from_pattern(2, tiny_data.volumes.shape[1:], first_filters=2, dropout_rate=0.0)
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, stop=EarlyStopPolicy(5, 15))
    net = run_cv(tiny_data, plan, spec, cfg, seed=3, folds=[0])[0].network
    train_rows, val_rows, _ = fold_rows(tiny_data.manifest, plan, 0)
    out = []
    for rows in (train_rows, val_rows):
        X, y = tiny_data.arrays([r for r in rows if r.label == "AD"])
        keep = predict_proba(net, X).argmax(axis=1) == 1
        out.append(X[keep, 0])
    return net, out[0], out[1]


CRITERIA = {
    1: "gradient correctness",
    2: "classifier sanity",
    3: "suppression",
    4: "localization",
    5: "regularization trends",
    6: "robustness ordering",
    7: "protocol mechanics",
    8: "IO integrity",
}
_verdicts = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdict(request):
    """``verdict(n, ok, detail)`` records one check of acceptance criterion ``n``."""
    store = request.config.stash.setdefault(_verdicts, {})

    def record(n, ok, detail):
        store.setdefault(n, []).append((bool(ok), detail))

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_verdicts, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        checks = store.get(n)
        if not checks:
            terminalreporter.write_line(f"NOT RUN  {n}. {name}")
            continue
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        details = "; ".join(f"{'' if ok else '[failed] '}{d}" for ok, d in checks)
        terminalreporter.write_line(f"{status}     {n}. {name}: {details}")
