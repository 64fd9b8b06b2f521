import numpy as np
import pytest

from strat_tte.data import TrialDataset


TOY_CSV = b"""id,w,a,u,delta,x1,x2
s1,lo,0,1,1,0.5,-1.0
s2,lo,1,3,0,1.25,0.0
s3,hi,0,2,0,-0.75,2.0
s4,hi,1,3,1,0.0,1.0
"""


@pytest.fixture
def toy_csv():
    return TOY_CSV


def make_dataset(rng, n=30, horizon=4, n_strata=2, p_covariates=2, censor_prob=0.3):
    """Random small trial with guaranteed positivity (one subject per
    (stratum, arm) cell is forced)."""
    while True:
        stratum = rng.integers(0, n_strata, n)
        arm = rng.integers(0, 2, n)
        # force positivity
        cells = [(k, a) for k in range(n_strata) for a in (0, 1)]
        if len(cells) > n:
            raise ValueError("n too small for the requested strata")
        for i, (k, a) in enumerate(cells):
            stratum[i] = k
            arm[i] = a
        if all(((stratum == k) & (arm == a)).any() for k, a in cells):
            break
    time = rng.integers(1, horizon + 1, n)
    event = (rng.random(n) > censor_prob).astype(int)
    x = rng.normal(size=(n, p_covariates))
    return TrialDataset(
        ids=np.array([f"r{i:04d}" for i in range(n)]),
        x=x,
        stratum_idx=stratum.astype(int),
        arm=arm.astype(int),
        time=time.astype(int),
        event=event.astype(int),
        horizon=horizon,
        covariate_names=[f"x{j + 1}" for j in range(p_covariates)],
        stratum_levels=[f"w{k}" for k in range(n_strata)],
    )


@pytest.fixture
def dataset_factory():
    return make_dataset
