import math

import numpy as np
import pytest

from aipod.errors import CapabilityError
from aipod.federated import fed_w_hvp, run_fed_e2aipod, run_fed_eaipod
from aipod.hypergrad import NeumannConfig, estimate_w
from aipod.problems import NoiseModel, build_federated_quadratic, build_quadratic, build_synthetic
from aipod.rng import RoundDraws, Stream
from aipod.solvers import SolverConfig, run_e2aipod, run_eaipod


@pytest.fixture(scope="module")
def fed():
    return build_federated_quadratic(5, 3, 0.5, 0)


def _same(a, b):
    assert len(a) == len(b)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fed_eaipod_matches_lifted(fed, seed):
    cfg = SolverConfig(K=40, N=4, T=2, delta=1.5, keep_iterates=True, master_seed=seed)
    tf, _ = run_fed_eaipod(fed, cfg)
    tc = run_eaipod(fed, cfg)
    _same(tf.xs, tc.xs)
    _same(tf.ys, tc.ys)
    assert [r.error_inst for r in tf.rows] == [r.error_inst for r in tc.rows]


@pytest.mark.parametrize("seed", [0, 3])
def test_fed_e2aipod_matches_lifted(fed, seed):
    cfg = SolverConfig(variant="e2-aipod", K=40, N=4, T=3, keep_iterates=True, master_seed=seed)
    tf, _ = run_fed_e2aipod(fed, cfg)
    tc = run_e2aipod(fed, cfg)
    _same(tf.xs, tc.xs)
    _same(tf.ys, tc.ys)


def test_single_client_w_matches_central():
    pb = build_quadratic(6, 0, 0, 4, coupling=False, noise=NoiseModel(0.1, 0.1, 0.1))
    x, y = pb.initial_point(1)
    cfg = NeumannConfig(1.0, 6, pb.metadata.l_g1)
    for k in range(5):
        draws = RoundDraws(9, k)
        ws, log, depth = fed_w_hvp([pb], [x], [y], cfg, draws)
        ref = estimate_w(pb, x, y, cfg, draws)
        assert depth == ref.depth_drawn
        np.testing.assert_allclose(ws[0], ref.value, rtol=1e-13, atol=1e-15)
        assert log.hvp_rounds == depth + 1


def test_fed_w_joins_to_lifted_estimate(fed):
    x, y = fed.initial_point(0)
    cfg = NeumannConfig(1.0, 5, fed.metadata.l_g1)
    draws = RoundDraws(2, 7)
    ws, log, depth = fed_w_hvp(fed.clients, fed.split(x), fed.split(y), cfg, draws)
    ref = estimate_w(fed, x, y, cfg, draws)
    np.testing.assert_array_equal(fed.join(ws), ref.value)
    assert log.scalars_transferred == fed.M * fed.d * (depth + 1)


def test_identical_clients_stay_identical():
    pb = build_federated_quadratic(4, 3, 0.0, 1, identical_clients=True)
    tr, _ = run_fed_eaipod(pb, SolverConfig(K=25, N=3, keep_iterates=True))
    for x in tr.xs:
        blocks = pb.split(x)
        for b in blocks[1:]:
            np.testing.assert_allclose(b, blocks[0], atol=1e-12)


def test_comm_counts(fed):
    K, T = 50, 3
    cfg = SolverConfig(K=K, T=T, N=4, master_seed=11)
    _, log = run_fed_eaipod(fed, cfg)
    thetas = sum(RoundDraws(11, k).coin(Stream.COIN_LL, s, cfg.p) for k in range(K) for s in range(cfg.S))
    assert log.ll_rounds == thetas
    assert log.ul_rounds == K
    ecfg = SolverConfig(variant="e2-aipod", K=K, T=T, N=4, master_seed=11)
    _, elog = run_fed_e2aipod(fed, ecfg)
    assert elog.ul_rounds == math.ceil(K / T)
    mls = sum(RoundDraws(11, k).coin(Stream.COIN_ML, n, ecfg.q) for k in range(K) for n in range(4))
    assert elog.ml_rounds == mls


def test_comm_columns_in_trace(fed):
    tr, log = run_fed_eaipod(fed, SolverConfig(K=10, N=2))
    last = tr.final_row
    assert (last.ll_comm, last.ul_comm, last.ml_comm) == (log.ll_rounds, 10, 0)
    assert tr.metadata["comm"]["ll_rounds"] == log.ll_rounds
    assert tr.metadata["federated"]["aggregation"] == "mean"


def test_non_consensus_problem_rejected():
    pb = build_synthetic(8, 3, 3, 0)
    with pytest.raises(CapabilityError):
        run_fed_eaipod(pb, SolverConfig(K=2))
    with pytest.raises(CapabilityError):
        run_fed_e2aipod(pb, SolverConfig(variant="e2-aipod", K=2))
