import numpy as np
import pytest

from bncde import diffcore as dc
from bncde.models import BncdeConfig, TecdeConfig, init_params, init_tecde
from bncde.models.bncde import STREAM_TRAIN, elbo_batch, elbo_objective, to_nodes
from bncde.models.inputs import encoder_grid, prepare_record
from bncde.simulator import SimConfig, generate_dataset

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Records one pass/fail line per criterion; call as ``acceptance(n, ok, detail)``."""

    def record(n, ok, detail=""):
        request.config.stash[ACCEPTANCE_LINES].append(f"C{n} {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        return ok

    return record


def tiny_config(**kw):
    base = dict(d_z=2, cde_hidden=(4,), drift_hidden=(4,), mc_train=1, mc_predict=4, h_max=0.25, sigma=0.05,
                batch_size=4, rows_per_chunk=8)
    base.update(kw)
    return BncdeConfig(**base)


def tiny_tecde_config(**kw):
    base = dict(d_z=2, cde_hidden=(4,), mc_predict=8, h_max=0.5, batch_size=4)
    base.update(kw)
    return TecdeConfig(**base)


def prepared(records, standardizer, cfg, delta=1, counterfactual=False):
    grid = encoder_grid(cfg.h_max)
    return [prepare_record(r, standardizer, delta, grid, counterfactual) for r in records]


def randomized(params, rng, scale=0.3):
    """Copy of ``params`` with every group perturbed, so no gradient is trivially zero."""
    p = params.copy()
    for k in p.groups:
        p.groups[k] = p.groups[k] + scale * rng.standard_normal(p.groups[k].shape)
    return p


def elbo_gradient_errors(params, preps, n_per_group, rng, seed=0, step=1e-6):
    """Relative errors of backprop against central differences on random entries of each group.

    Returns a list of (group, index, analytic, numeric, rel_err).
    """
    cfg = params.config
    P = to_nodes(params)
    node, _ = elbo_objective(P, cfg, preps, 1, seed, STREAM_TRAIN)
    grads = dc.backward(node)
    out = []
    for name, arr in params.groups.items():
        ana = dc.grad_of(grads, P[name]).reshape(-1)
        idx = rng.choice(arr.size, size=min(n_per_group, arr.size), replace=False)

        def f():
            return elbo_batch(params, preps, J=1, seed=seed).elbo

        num = dc.numeric_gradient(f, arr, step=step, indices=idx).reshape(-1)
        for i in idx:
            err = dc.relative_error(ana[i], num[i], floor=1e-4)
            out.append((name, int(i), float(ana[i]), float(num[i]), err))
    return out


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset(SimConfig(n_train=8, n_val=4, n_test=4, seed=0))


@pytest.fixture(scope="session")
def tiny_bncde():
    return init_params(tiny_config(), np.random.default_rng(0))


@pytest.fixture(scope="session")
def tiny_tecde():
    return init_tecde(tiny_tecde_config(), np.random.default_rng(0))
