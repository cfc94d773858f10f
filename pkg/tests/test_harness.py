import csv

import numpy as np
import pytest

from gfcs import engine
from gfcs.data import gen_blobs, save_dataset
from gfcs.errors import ConfigError, InvalidInputError, ShortfallError
from gfcs.harness import (
    RunRecord,
    breakdown_export,
    cdf_curve,
    default_query_grid,
    epsilon_sweep,
    load_campaign_spec,
    load_records,
    median_queries,
    run_campaign,
    success_rate,
    write_reports,
)
from gfcs.layers import Affine
from gfcs.models import ScoreModel, save_model
from gfcs.numerics import RandomStream


def record(i, queries, success=True, coimage=0):
    return RunRecord(
        example_id=i,
        method="gfcs",
        success=success,
        total_queries=queries,
        gradient_queries=queries - coimage,
        coimage_queries=coimage,
        basis_queries=0,
        final_norm=0.1,
        final_class=1,
        target=None,
        reason=None if success else "budget",
        seed=i,
    )


def write_fixture(tmp_path):
    """Nearest-mean linear victim on 3-class blobs."""
    data = gen_blobs(0, 10, 3, 20, 0.1)
    means = data.inputs.reshape(3, 20, 10).mean(axis=1)
    victim = ScoreModel([Affine(means, -0.5 * np.sum(means**2, axis=1))], (10,), 3)
    save_dataset(data, tmp_path / "data.gfd")
    save_model(victim, tmp_path / "victim.gfm")


def write_spec(tmp_path, name="campaign.cfg", **entries):
    settings = {
        "victim": "victim.gfm",
        "surrogates": "victim.gfm",
        "data": "data.gfd",
        "nu": "5.0",
        "count": "10",
        "seed": "3",
        "output": "out",
        "bootstrap": "200",
    }
    settings.update({key: str(value) for key, value in entries.items()})
    path = tmp_path / name
    path.write_text("".join(f"{k} = {v}\n" for k, v in settings.items() if v != "None"))
    return path


def read_rows(path):
    with open(path) as f:
        return list(csv.reader(line for line in f if not line.startswith("#")))


def test_load_campaign_spec(tmp_path):
    spec = load_campaign_spec(
        write_spec(tmp_path, clamp="0,1", targeted="true", method="simba-ods")
    )
    assert spec.victim == tmp_path / "victim.gfm"
    assert spec.surrogates == [tmp_path / "victim.gfm"]
    assert spec.output == tmp_path / "out"
    assert spec.clamp == (0.0, 1.0)
    assert spec.targeted and spec.nu == 5.0 and spec.count == 10
    assert spec.attack_config(target=1).loss == "targeted-log"


def test_campaign_spec_errors(tmp_path):
    with pytest.raises(ConfigError, match="Unknown campaign key: 'colour'"):
        _ = load_campaign_spec(write_spec(tmp_path, colour="blue"))
    with pytest.raises(ConfigError, match="Invalid value for 'count'"):
        _ = load_campaign_spec(write_spec(tmp_path, count="many"))
    with pytest.raises(ConfigError, match="Unknown method: 'simba-magic'"):
        _ = load_campaign_spec(write_spec(tmp_path, method="simba-magic"))
    with pytest.raises(ConfigError, match="missing the 'victim' key"):
        _ = load_campaign_spec(write_spec(tmp_path, victim=None))
    with pytest.raises(ConfigError, match="exactly one of 'data' and 'generator'"):
        _ = load_campaign_spec(write_spec(tmp_path, generator="blobs"))
    with pytest.raises(ConfigError, match="needs at least one surrogate"):
        _ = load_campaign_spec(write_spec(tmp_path, surrogates=""))


def test_campaign_white_box(tmp_path):
    write_fixture(tmp_path)
    records = run_campaign(load_campaign_spec(write_spec(tmp_path)), progress=False)
    assert len(records) == 10
    assert all(r.success for r in records)
    assert all(r.coimage_queries == 0 for r in records)
    assert all(r.final_norm <= 5.0 * (1 + 1e-9) for r in records)
    assert len(set(r.example_id for r in records)) == 10
    assert load_records(tmp_path / "out" / "records.jsonl") == records
    timings = read_rows(tmp_path / "out" / "timings.csv")
    assert timings[0] == ["example_id", "wall_time"] and len(timings) == 11


def test_campaign_is_reproducible(tmp_path):
    write_fixture(tmp_path)
    path = write_spec(tmp_path)
    run_campaign(load_campaign_spec(path), progress=False)
    run_campaign(load_campaign_spec(path, output=tmp_path / "again"), progress=False)
    run_campaign(
        load_campaign_spec(path, output=tmp_path / "pool", workers=2), progress=False
    )
    first = (tmp_path / "out" / "records.jsonl").read_bytes()
    assert (tmp_path / "again" / "records.jsonl").read_bytes() == first
    assert (tmp_path / "pool" / "records.jsonl").read_bytes() == first


def test_campaign_zero_budget(tmp_path):
    write_fixture(tmp_path)
    records = run_campaign(load_campaign_spec(write_spec(tmp_path, budget=0)), False)
    assert len(records) == 10
    assert all(not r.success and r.total_queries == 0 for r in records)
    assert all(r.reason == "budget" for r in records)


def test_campaign_shortfall(tmp_path):
    write_fixture(tmp_path)
    with pytest.raises(ShortfallError, match="but 1000 were requested"):
        _ = run_campaign(load_campaign_spec(write_spec(tmp_path, count=1000)), False)


@pytest.mark.parametrize("method", ["simba-pixel", "simba-ods", "simba-pca-images"])
def test_campaign_baselines(tmp_path, method):
    write_fixture(tmp_path)
    spec = load_campaign_spec(write_spec(tmp_path, method=method, pca_k=5, budget=50))
    records = run_campaign(spec, progress=False)
    assert len(records) == 10
    for r in records:
        assert r.method == method
        assert r.gradient_queries == 0
        assert r.total_queries == r.basis_queries + r.coimage_queries <= 50


def test_dct_needs_images(tmp_path):
    write_fixture(tmp_path)
    spec = load_campaign_spec(write_spec(tmp_path, method="simba-dct"))
    with pytest.raises(InvalidInputError, match="image-shaped victim inputs"):
        _ = run_campaign(spec, progress=False)


def test_targeted_campaign(tmp_path):
    write_fixture(tmp_path)
    spec = load_campaign_spec(write_spec(tmp_path, targeted="true", count=5))
    records = run_campaign(spec, progress=False)
    assert all(r.target is not None and 0 <= r.target < 3 for r in records)


def test_generated_campaign_data(tmp_path):
    write_fixture(tmp_path)
    spec = load_campaign_spec(
        write_spec(
            tmp_path,
            data=None,
            generator="blobs",
            dim=10,
            classes=3,
            per_class=20,
            spread=0.1,
        )
    )
    assert len(run_campaign(spec, progress=False)) == 10


def test_median_queries():
    records = [record(i, q) for i, q in enumerate([1, 2, 3, 4, 5])]
    estimate = median_queries(records, samples=1000, seed=0)
    assert estimate.median == 3
    # exact bootstrap sd of the median of 5 draws from 1..5 is sqrt(0.9824)
    assert estimate.se == pytest.approx(0.99116, abs=0.08)
    draws = RandomStream(0).integers(0, 5, (1000, 5))
    expected = np.std(np.sort(draws, axis=1)[:, 2] + 1.0)
    assert estimate.se == pytest.approx(expected, rel=1e-12)
    assert median_queries(records, samples=1000, seed=0) == estimate


def test_median_of_identical_values_has_zero_se():
    estimate = median_queries([record(i, 7) for i in range(6)])
    assert estimate.median == 7 and estimate.se == 0.0


def test_median_counts_failures_as_infinite():
    records = [record(i, 10) for i in range(3)]
    records += [record(3, 10000, success=False), record(4, 10000, success=False)]
    assert median_queries(records).median == 10
    assert median_queries(records[1:]).median is None
    with pytest.raises(InvalidInputError, match="median of an empty record list"):
        _ = median_queries([])


def test_even_count_median_is_lower_middle():
    records = [record(i, q) for i, q in enumerate([4, 1, 3, 2])]
    assert median_queries(records).median == 2


def test_success_rate():
    assert success_rate([record(0, 1), record(1, 2)]) == 1.0
    assert success_rate([record(0, 1, success=False)]) == 0.0
    records = [record(i, 1) for i in range(3)] + [record(3, 9, success=False)]
    assert success_rate(records) == 0.75


def test_cdf_curve_matches_direct_count():
    records = [record(0, 3), record(1, 7), record(2, 7), record(3, 20)]
    records.append(record(4, 100, success=False))
    grid = [1, 3, 5, 7, 10, 20, 100]
    curve = cdf_curve(records, grid, samples=500, seed=1)
    assert [p.queries for p in curve] == grid
    assert [p.fraction for p in curve] == [0.0, 0.2, 0.2, 0.6, 0.6, 0.8, 0.8]
    assert curve[-1].fraction == success_rate(records)
    for point in curve:
        assert point.ci_low <= point.fraction <= point.ci_high
    assert all(a.fraction <= b.fraction for a, b in zip(curve, curve[1:]))
    with pytest.raises(InvalidInputError, match="sorted ascending"):
        _ = cdf_curve(records, [5, 1])


def test_default_query_grid():
    grid = default_query_grid()
    assert grid[0] == 1 and grid[-1] == 10000
    assert grid == sorted(set(grid))
    assert {100, 110, 1000, 1100} <= set(grid)
    assert default_query_grid(150)[-1] == 150
    large = default_query_grid(25000)
    assert {10000, 11000, 24000, 25000} <= set(large)
    assert large == sorted(set(large))


def test_cdf_reaches_success_rate_past_default_budget(tmp_path):
    records = [record(0, 5), record(1, 12000), record(2, 15000)]
    curve = cdf_curve(records, samples=100, budget=20000)
    assert curve[-1].queries == 20000
    assert curve[-1].fraction == success_rate(records) == 1.0
    assert cdf_curve(records, samples=100)[-1].queries == 15000
    write_reports(records, tmp_path, "gfcs", samples=100, budget=20000)
    cdf = read_rows(tmp_path / "cdf.csv")
    assert cdf[-1][0] == "20000" and float(cdf[-1][1]) == 1.0


def test_breakdown_export():
    records = [record(0, 5), record(1, 7, coimage=4), record(2, 20, success=False)]
    breakdown = breakdown_export(records, bins=4)
    assert breakdown.points.tolist() == [[5, 0], [3, 4]]
    assert breakdown.gradient_histogram[0].sum() == 2
    assert breakdown.coimage_histogram[0].sum() == 2
    empty = breakdown_export([record(0, 5, success=False)])
    assert empty.points.shape == (0, 2)


def test_reports_from_persisted_records_match(tmp_path):
    write_fixture(tmp_path)
    records = run_campaign(load_campaign_spec(write_spec(tmp_path)), progress=False)
    write_reports(records, tmp_path / "memory", "gfcs", samples=200, seed=3)
    loaded = load_records(tmp_path / "out" / "records.jsonl")
    write_reports(loaded, tmp_path / "disk", "gfcs", samples=200, seed=3)
    for name in ("summary.csv", "cdf.csv", "breakdown.csv"):
        memory = (tmp_path / "memory" / name).read_bytes()
        assert (tmp_path / "disk" / name).read_bytes() == memory
    summary = read_rows(tmp_path / "memory" / "summary.csv")
    assert summary[0] == ["method", "median", "se", "success_rate", "n"]
    assert summary[1][0] == "gfcs" and summary[1][1] == "1" and summary[1][4] == "10"
    assert (tmp_path / "memory" / "summary.csv").read_text().startswith("# failed")
    cdf = read_rows(tmp_path / "memory" / "cdf.csv")
    assert float(cdf[-1][1]) == 1.0


def test_undefined_median_in_summary(tmp_path):
    records = [record(0, 3), record(1, 10, success=False)]
    write_reports(records, tmp_path, "gfcs", samples=50)
    assert read_rows(tmp_path / "summary.csv")[1][1] == "undefined"


def test_epsilon_sweep(tmp_path):
    write_fixture(tmp_path)
    spec = load_campaign_spec(write_spec(tmp_path, method="simba-pixel", budget=100))
    forward = epsilon_sweep(spec, [0.5, 2.0], progress=False)
    backward = epsilon_sweep(spec, [2.0, 0.5], progress=False)
    assert [row.epsilon for row in forward] == [0.5, 2.0]
    assert forward == backward[::-1]
    single = epsilon_sweep(spec, [2.0], progress=False)[0]
    records = load_records(tmp_path / "out" / "epsilon-2" / "records.jsonl")
    estimate = median_queries(records, spec.bootstrap, spec.seed)
    assert (single.median, single.se) == (estimate.median, estimate.se)
    assert single.success_rate == success_rate(records) and single.n == 10


def record_query_distances(monkeypatch):
    distances = []
    evaluate = engine.evaluate_candidate

    def recording(oracle, state, x_candidate, cfg):
        evaluation = evaluate(oracle, state, x_candidate, cfg)
        distances.append(float(np.linalg.norm(evaluation.point - state.x_in)) / state.nu)
        return evaluation

    monkeypatch.setattr(engine, "evaluate_candidate", recording)
    return distances


@pytest.mark.parametrize("method", ["gfcs", "simba-pixel"])
def test_every_query_stays_in_ball(tmp_path, monkeypatch, method):
    write_fixture(tmp_path)
    distances = record_query_distances(monkeypatch)
    spec = load_campaign_spec(write_spec(tmp_path, method=method, nu=0.05, budget=200))
    records = run_campaign(spec, progress=False)
    assert len(distances) == sum(r.total_queries for r in records) > 0
    assert max(distances) <= 1 + 1e-9
    assert max(distances) > 0.99
