import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    max_examples=25,
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(*arrays) w.r.t. each array.

    Independent of the autodiff engine: only evaluates f.
    """
    grads = []
    for base in arrays:
        gi = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = base[idx]
            base[idx] = orig + h
            fp = f(*arrays)
            base[idx] = orig - h
            fm = f(*arrays)
            base[idx] = orig
            gi[idx] = (fp - fm) / (2 * h)
            it.iternext()
        grads.append(gi)
    return grads


def rel_err(analytic, reference):
    """Max-norm relative error. The floor keeps structurally-zero
    gradients (both sides below central-difference noise) from dividing
    noise by noise."""
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    denom = max(np.abs(reference).max(), np.abs(analytic).max(), 1e-6)
    return float(np.abs(analytic - reference).max() / denom)


@pytest.fixture(scope="session")
def synthetic_bundle():
    """Default synthetic corpus with the harness split (50/15/15)."""
    from mmfew.episodes import SyntheticConfig, generate_synthetic, make_meta_split

    cfg = SyntheticConfig()
    records = generate_synthetic(cfg)
    split = make_meta_split(
        [r.class_id for r in records], ratios=(0.625, 0.1875, 0.1875), seed=cfg.seed
    )
    return records, split
