import csv
import math

import numpy as np
import pytest

from evomoe.config import LabConfig, ModelConfig, StageConfig, SyntheticTaskSpec
from evomoe.diagnostics import (
    collect_max_logits,
    kde_density,
    kde_overlap,
    logit_kde,
    modality_distribution,
    shuffle_probe,
    silverman_bandwidth,
    tv_distance,
    write_dist_csv,
    write_kde_csv,
    write_shuffle_csv,
)
from evomoe.errors import ContractError
from evomoe.model import transition_to_moe
from evomoe.pipeline import new_run, run_pipeline, run_stage
from evomoe.rng import Rng


def tiny_lab(**model_kw):
    model = dict(
        vocab_size=16,
        d_model=8,
        n_layers=2,
        n_heads=2,
        ffn_hidden=12,
        n_experts=2,
        top_k=1,
        router_kind="linear",
        max_seq_len=8,
        beta_ranges=[[0.8, 0.9]],
        dtr_rank=2,
        hypernet_hidden=4,
        seed=5,
    )
    model.update(model_kw)
    task = SyntheticTaskSpec(vocab_a=8, vocab_b=8, prefix_len=4, suffix_len=4, seed=5)
    stages = {
        name: StageConfig(name, steps=4, batch_size=2, eval_every=100)
        for name in ("I", "II", "III")
    }
    return LabConfig(model=ModelConfig(**model), task=task, stages=stages)


@pytest.fixture(scope="module")
def lab():
    return tiny_lab()


@pytest.fixture(scope="module")
def trained(lab):
    state, _ = run_pipeline(lab, eval_batches=1)
    return state


@pytest.fixture(scope="module")
def dense_state(lab):
    return new_run(lab)


def draws(seed, n, loc=0.0, scale=1.0):
    return loc + scale * Rng(seed=seed, stream_id=97).normal(size=n)


# ---------------------------------------------------------------------------
# bandwidth and density


def test_silverman_matches_formula():
    x = draws(1, 50)
    want = 1.06 * x.std(ddof=1) * 50 ** (-0.2)
    assert abs(silverman_bandwidth(x) - want) < 1e-15


def test_silverman_floors_degenerate_samples():
    assert silverman_bandwidth(np.full(30, 2.5)) == 1e-12
    assert silverman_bandwidth(np.array([7.0])) == 1e-12


def test_kde_density_matches_direct_sum():
    x = draws(2, 20)
    grid = np.linspace(-4, 4, 100)
    bw = 0.3
    want = np.exp(-0.5 * ((grid[None, :] - x[:, None]) / bw) ** 2).sum(axis=0)
    want /= x.size * bw * math.sqrt(2 * math.pi)
    got = kde_density(x, grid, bw)
    assert np.max(np.abs(got - want)) < 1e-15


def test_kde_density_chunking_is_invisible():
    # more than one 64-sample chunk must agree with the one-shot sum
    x = draws(3, 200)
    grid = np.linspace(-5, 5, 64)
    bw = silverman_bandwidth(x)
    want = np.exp(-0.5 * ((grid[None, :] - x[:, None]) / bw) ** 2).sum(axis=0)
    want /= x.size * bw * math.sqrt(2 * math.pi)
    assert np.max(np.abs(kde_density(x, grid, bw) - want)) < 1e-12


# ---------------------------------------------------------------------------
# overlap coefficient


def test_overlap_of_identical_sets_is_one():
    x = draws(4, 200)
    _, _, ov = kde_overlap(x, x.copy())
    assert abs(ov - 1.0) < 1e-6


def test_overlap_of_distant_sets_is_zero():
    x = draws(5, 100)
    _, _, ov = kde_overlap(x, x + 100.0)
    assert ov < 1e-3


def test_curves_integrate_to_one():
    cv, ct, _ = kde_overlap(draws(6, 150), draws(7, 80, loc=2.0))
    assert abs(cv.integral() - 1.0) < 1e-3
    assert abs(ct.integral() - 1.0) < 1e-3
    assert (cv.density >= 0).all() and (ct.density >= 0).all()


def test_overlap_is_symmetric():
    a, b = draws(8, 120), draws(9, 90, loc=1.0)
    _, _, ab = kde_overlap(a, b)
    _, _, ba = kde_overlap(b, a)
    assert abs(ab - ba) < 1e-12


def test_overlap_is_shift_and_scale_invariant():
    a, b = draws(10, 120), draws(11, 120, loc=1.5)
    _, _, base = kde_overlap(a, b)
    _, _, shifted = kde_overlap(a + 37.0, b + 37.0)
    _, _, scaled = kde_overlap(3.0 * a, 3.0 * b)
    assert abs(shifted - base) < 1e-6
    assert abs(scaled - base) < 1e-6


def test_overlap_agrees_with_finer_grid():
    a, b = draws(12, 300), draws(13, 300, loc=1.0)
    cv, ct, ov = kde_overlap(a, b)
    fine = np.linspace(cv.grid[0], cv.grid[-1], 4 * cv.grid.size)
    dv = kde_density(a, fine, cv.bandwidth)
    dt = kde_density(b, fine, ct.bandwidth)
    assert abs(ov - float(np.trapezoid(np.minimum(dv, dt), fine))) < 1e-4


def test_overlap_of_unit_normals_one_apart():
    # true densities would overlap by 2*Phi(-1/2); the kernel estimate at
    # n=500 lands close to that
    a, b = draws(14, 500), draws(15, 500, loc=1.0)
    _, _, ov = kde_overlap(a, b)
    want = 2.0 * 0.5 * (1.0 + math.erf(-0.5 / math.sqrt(2.0)))
    assert abs(ov - want) < 0.02


def test_grid_covers_samples_with_margin():
    a, b = draws(16, 60), draws(17, 60, loc=3.0)
    cv, ct, _ = kde_overlap(a, b)
    bw_max = max(cv.bandwidth, ct.bandwidth)
    lo = min(a.min(), b.min()) - 8.0 * bw_max
    hi = max(a.max(), b.max()) + 8.0 * bw_max
    assert np.isclose(cv.grid[0], lo) and np.isclose(cv.grid[-1], hi)
    assert cv.grid is ct.grid or np.array_equal(cv.grid, ct.grid)


def test_grid_resolution_bounds():
    # wide bandwidth: the 2048-point floor binds
    cv, _, _ = kde_overlap(draws(18, 100), draws(19, 100))
    assert cv.grid.size == 2048

    # two tight clusters far apart: spacing tracks a quarter bandwidth
    a = draws(20, 100, scale=0.01)
    b = draws(21, 100, loc=100.0, scale=0.01)
    cv, ct, _ = kde_overlap(a, b)
    assert 2048 < cv.grid.size < (1 << 17)
    spacing = cv.grid[1] - cv.grid[0]
    assert spacing <= min(cv.bandwidth, ct.bandwidth) / 4.0 * 1.001

    # absurd separation: the point cap binds
    cv, _, _ = kde_overlap(a, b + 1e6)
    assert cv.grid.size == 1 << 17


def test_kde_rejects_tiny_samples():
    with pytest.raises(ContractError, match=">= 10"):
        kde_overlap(draws(22, 9), draws(23, 50))
    with pytest.raises(ContractError, match=">= 10"):
        kde_overlap(draws(22, 50), draws(23, 9))


# ---------------------------------------------------------------------------
# router logit collection


def test_collect_max_logits_shapes(lab, trained):
    vs, ts = collect_max_logits(trained.model, lab, layer=0, n_batches=4, batch_size=4)
    assert vs.size == 4 * 4 * lab.task.prefix_len
    assert ts.size == 4 * 4 * lab.task.suffix_len
    assert np.isfinite(vs).all() and np.isfinite(ts).all()


def test_collect_max_logits_rejects_non_moe_layer(lab, trained):
    with pytest.raises(ContractError, match="not an MoE layer"):
        collect_max_logits(trained.model, lab, layer=1)


def test_logit_kde_end_to_end(lab, trained):
    cv, ct, ov = logit_kde(trained.model, lab, layer=0, n_batches=4, batch_size=4)
    assert 0.0 <= ov <= 1.0 + 1e-9
    assert abs(cv.integral() - 1.0) < 1e-3


def test_probes_reject_dense_models(lab, dense_state):
    rng = Rng(seed=1, stream_id=98)
    with pytest.raises(ContractError, match="sparse"):
        shuffle_probe(dense_state.model, lab, n_trials=1, rng=rng)
    with pytest.raises(ContractError, match="sparse"):
        modality_distribution(dense_state.model, lab)
    with pytest.raises(ContractError, match="sparse"):
        logit_kde(dense_state.model, lab, layer=0)


# ---------------------------------------------------------------------------
# shuffle probe


def test_shuffle_is_silent_on_replicated_experts(lab, dense_state):
    stage1, _ = run_stage(dense_state, lab.stages["I"], eval_batches=1)
    fresh = transition_to_moe(stage1.model)
    report = shuffle_probe(
        fresh, lab, n_trials=4, rng=Rng(seed=11, stream_id=98), n_batches=2, batch_size=2
    )
    for t in report.stats["trials"]:
        assert t["delta"] == 0.0


def test_shuffle_report_contents(lab, trained):
    report = shuffle_probe(
        trained.model, lab, n_trials=3, rng=Rng(seed=12, stream_id=98),
        n_batches=2, batch_size=2,
    )
    assert report.kind == "shuffle"
    assert report.seed == 12
    assert report.samples_used == 2 * 2 * lab.task.seq_len
    trials = report.stats["trials"]
    assert [t["trial"] for t in trials] == [0, 1, 2]
    for t in trials:
        assert t["delta"] == t["ce"] - report.stats["baseline_ce"]
    want_mean = np.mean([abs(t["delta"]) for t in trials])
    assert report.stats["mean_abs_delta"] == want_mean


def test_shuffle_is_reproducible(lab, trained):
    a = shuffle_probe(trained.model, lab, 3, Rng(seed=13, stream_id=98), 2, 2)
    b = shuffle_probe(trained.model, lab, 3, Rng(seed=13, stream_id=98), 2, 2)
    assert a.stats == b.stats


def test_shuffle_rejects_zero_trials(lab, trained):
    with pytest.raises(ContractError, match="n_trials"):
        shuffle_probe(trained.model, lab, 0, Rng(seed=1, stream_id=98))


# ---------------------------------------------------------------------------
# modality distribution


def test_distribution_columns_sum_to_one(lab, trained):
    mats = modality_distribution(trained.model, lab, n_batches=2, batch_size=2)
    assert set(mats) == set(lab.model.moe_layers())
    for mat in mats.values():
        assert mat.shape == (lab.model.n_experts, 2)
        assert np.all(mat >= 0)
        assert np.max(np.abs(mat.sum(axis=0) - 1.0)) < 1e-12


def test_distribution_with_zeroed_router_picks_expert_zero(lab, dense_state):
    model = transition_to_moe(dense_state.model)
    model.params["block0.router.weight"].data[...] = 0.0
    mats = modality_distribution(model, lab, n_batches=2, batch_size=2)
    want = np.zeros((lab.model.n_experts, 2))
    want[0, :] = 1.0
    assert np.array_equal(mats[0], want)


def test_tv_distance_hand_values():
    assert tv_distance(np.array([[1.0, 0.0], [0.0, 1.0]])) == 1.0
    assert tv_distance(np.array([[0.5, 0.5], [0.5, 0.5]])) == 0.0
    assert abs(tv_distance(np.array([[0.7, 0.3], [0.3, 0.7]])) - 0.4) < 1e-15


def test_probes_do_not_write_to_the_model(lab, trained):
    before = {n: p.data.copy() for n, p in trained.model.params.items()}
    shuffle_probe(trained.model, lab, 2, Rng(seed=14, stream_id=98), 2, 2)
    modality_distribution(trained.model, lab, n_batches=2, batch_size=2)
    logit_kde(trained.model, lab, layer=0, n_batches=4, batch_size=4)
    for name, arr in before.items():
        assert np.array_equal(trained.model.params[name].data, arr), name


# ---------------------------------------------------------------------------
# csv emission


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_kde_csv_round_trips(tmp_path, lab, trained):
    cv, ct, _ = logit_kde(trained.model, lab, layer=0, n_batches=4, batch_size=4)
    path = tmp_path / "kde.csv"
    write_kde_csv(str(path), cv, ct)
    rows = read_rows(path)
    assert rows[0] == ["grid", "density_V", "density_T"]
    assert len(rows) == 1 + cv.grid.size
    got = np.array([[float(c) for c in row] for row in rows[1:]])
    assert np.array_equal(got[:, 0], cv.grid)
    assert np.array_equal(got[:, 1], cv.density)
    assert np.array_equal(got[:, 2], ct.density)


def test_shuffle_csv_round_trips(tmp_path, lab, trained):
    report = shuffle_probe(trained.model, lab, 3, Rng(seed=15, stream_id=98), 2, 2)
    path = tmp_path / "shuffle.csv"
    write_shuffle_csv(str(path), report)
    rows = read_rows(path)
    assert rows[0] == ["trial", "ce", "delta"]
    for row, t in zip(rows[1:], report.stats["trials"]):
        assert int(row[0]) == t["trial"]
        assert float(row[1]) == t["ce"]
        assert float(row[2]) == t["delta"]


def test_dist_csv_round_trips(tmp_path, lab, trained):
    mats = modality_distribution(trained.model, lab, n_batches=2, batch_size=2)
    path = tmp_path / "dist.csv"
    write_dist_csv(str(path), mats)
    rows = read_rows(path)
    assert rows[0] == ["layer", "expert", "frac_V", "frac_T"]
    assert len(rows) == 1 + sum(m.shape[0] for m in mats.values())
    for row in rows[1:]:
        layer, e = int(row[0]), int(row[1])
        assert float(row[2]) == mats[layer][e, 0]
        assert float(row[3]) == mats[layer][e, 1]
