import numpy as np
import pytest

from persalign.instance import InstanceConfig, ProblemInstance, generate_instance


def make_instance(w, heads, contexts, actions, user_dist=None, head_scale=1.0, seed=0):
    w = np.asarray(w, dtype=float)
    heads = np.asarray(heads, dtype=float)
    U = heads.shape[1]
    return ProblemInstance(
        dim_d=w.shape[1], dim_j=w.shape[0], num_users=U, w_true=w, heads_true=heads,
        contexts=np.asarray(contexts, dtype=float), actions=np.asarray(actions, dtype=float),
        user_dist=np.full(U, 1.0 / U) if user_dist is None else np.asarray(user_dist, dtype=float),
        head_scale=head_scale, seed=seed,
    )


SMALL = InstanceConfig(dim_d=2, dim_j=2, num_users=3, n_ctx=3, n_act=4, raw_gap_target=0.05)
TINY = InstanceConfig(dim_d=2, dim_j=2, num_users=2, n_ctx=3, n_act=4, raw_gap_target=0.01)


@pytest.fixture(scope="session")
def small_inst():
    return generate_instance(SMALL, 7)


@pytest.fixture(scope="session")
def desk_inst():
    return generate_instance(InstanceConfig(), 0)
