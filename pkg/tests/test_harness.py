import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from klshampoo.errors import EmptyGrid, InvalidInput
from klshampoo.harness import claims, cli, config, runner, tasks
from klshampoo.harness.tasks import TaskKind, TaskSpec
from klshampoo.optimizers import OptimizerConfig, Variant


def kq(**kw):
    return TaskSpec(TaskKind.KRON_QUADRATIC, **kw)


# --- tasks --------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [
        {"kind": "kron_quadratic", "dims": (2, 3, 4)},
        {"kind": "mlp_regression", "dims": (4, 5)},
        {"kind": "kron_quadratic", "dims": (0, 3)},
        {"kind": "kron_quadratic", "dims": (65, 3)},
        {"kind": "kron_quadratic", "steps": 0},
    ],
)
def test_task_spec_validation(kw):
    with pytest.raises(InvalidInput):
        TaskSpec(**kw)


def test_task_spec_unknown_kind():
    with pytest.raises(ValueError):
        TaskSpec("cifar")


@pytest.mark.parametrize("kind", list(TaskKind))
def test_default_dims(kind):
    assert TaskSpec(kind).dims == tasks.DEFAULT_DIMS[kind]


def _fd_check(task, params, h=1e-6):
    exact = replace(task.spec, batch=0)
    task.spec = exact
    grads = task.grad(params, np.random.default_rng(0))
    for k, p in enumerate(params):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            fd[idx] = (task.loss(plus) - task.loss(minus)) / (2 * h)
        np.testing.assert_allclose(grads[k], fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("kind,dims", [("mlp_regression", (3, 4, 2)), ("softmax_classification", (3, 4)),
                                       ("kron_quadratic", (3, 2)), ("tensor3_quadratic", (2, 2, 3))])
def test_exact_gradients_match_finite_differences(kind, dims):
    t = tasks.make_task(TaskSpec(kind, dims))
    params = [p + 0.1 for p in t.params0]
    _fd_check(t, params)


def test_sampled_gradient_is_unbiased():
    t = tasks.make_task(kq(dims=(3, 2), batch=20000))
    theta = t.params0
    g = t.grad(theta, np.random.default_rng(1))[0]
    exact = t.hess_apply(theta[0])
    assert np.linalg.norm(g - exact) / np.linalg.norm(exact) < 0.05


def test_kron_quadratic_loss_is_kronecker_form():
    t = tasks.make_task(kq(dims=(3, 2)))
    A, B = t.data["factors"]
    theta = t.params0[0]
    v = theta.reshape(-1)
    assert t.loss([theta]) == pytest.approx(0.5 * v @ np.kron(A, B) @ v, rel=1e-12)


# --- runs ---------------------------------------------------------------------


def test_sgd_tiny_step_strictly_decreases():
    recs = runner.run_task(kq(steps=100, batch=0), OptimizerConfig("sgd", gamma=1e-3))
    losses = [r.loss for r in recs]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("variant", ["kl_shampoo", "soap", "adam"])
def test_same_seed_same_bytes(variant):
    t, c = kq(steps=30), OptimizerConfig(variant, gamma=1e-3)
    a = runner.records_to_csv(runner.run_task(t, c))
    b = runner.records_to_csv(runner.run_task(t, c))
    assert a == b
    assert a != runner.records_to_csv(runner.run_task(replace(t, seed=1), c))


def test_csv_schema(tmp_path):
    path = tmp_path / "run.csv"
    runner.write_csv(runner.run_task(kq(steps=5), OptimizerConfig("sgd", gamma=1e-3)), path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == runner.CSV_HEADER
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
    assert all(r[4] == "sgd" and r[5] == "0" and float(r[3]) == 0.0 for r in rows[1:])


def test_divergence_truncates_run():
    recs = runner.run_task(kq(steps=200, batch=0), OptimizerConfig("sgd", gamma=1e3))
    assert recs[-1].diverged and np.isnan(recs[-1].loss)
    assert sum(r.diverged for r in recs) == 1
    assert len(recs) < 200
    s = runner.summarize(recs)
    assert s["diverged"] and np.isfinite(s["final_loss"])


def test_warmup_ramps_step():
    t = kq(steps=1, batch=0)
    full = runner.train(t, OptimizerConfig("sgd", gamma=0.1)).params[0]
    warm = runner.train(t, OptimizerConfig("sgd", gamma=0.1), warmup=4).params[0]
    theta0 = tasks.make_task(t).params0[0]
    np.testing.assert_allclose(warm - theta0, (full - theta0) / 4, rtol=1e-12)
    with pytest.raises(InvalidInput):
        runner.train(t, OptimizerConfig("sgd"), warmup=-1)


def test_summarize_threshold():
    recs = [runner.RunRecord(k, loss, 0.0, 0.0, "sgd", 0) for k, loss in enumerate([1.0, 1e-3, 1e-7, 1e-5], 1)]
    s = runner.summarize(recs, 1e-6)
    assert s == {"final_loss": 1e-5, "best_loss": 1e-7, "steps_to_threshold": 3, "steps_run": 4, "diverged": False}


def test_tune_gamma_picks_lowest_final_loss():
    t = kq(steps=50, batch=0)
    g, res = runner.tune_gamma(t, OptimizerConfig("sgd"), [1e-4, 1e-2, 1e3])
    assert g == 1e-2
    assert not res.records[-1].diverged


@pytest.mark.parametrize("variant", list(Variant))
def test_stable_range_non_increasing(variant):
    """Smoothed loss never rises after step 10 at the documented step size."""
    c = OptimizerConfig(variant, gamma=tasks.STABLE_GAMMA[variant.value])
    recs = runner.run_task(kq(steps=1000), c)
    assert not any(r.diverged for r in recs)
    loss = np.array([r.loss for r in recs])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth[9:]) <= 1e-12 * smooth[9:-1])


# --- comparison ---------------------------------------------------------------


def test_compare_writes_csvs_and_consistent_summary(tmp_path):
    cfgs = [OptimizerConfig("sgd", gamma=0.05), OptimizerConfig("kl_shampoo", gamma=0.01, T=1)]
    summary = runner.compare([kq(steps=40)], cfgs, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.csv")) == [e["csv"] for e in summary["runs"]]
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    finals = {}
    for e in summary["runs"]:
        rows = list(csv.reader((tmp_path / e["csv"]).open()))
        finals[e["optimizer"]] = float(rows[-1][1])
        assert float(rows[-1][1]) == e["final_loss"]
    by_summary = sorted(summary["runs"], key=lambda e: e["final_loss"])
    assert [e["optimizer"] for e in by_summary] == sorted(finals, key=finals.get)


def test_run_grid_is_order_independent(tmp_path):
    runs = [(kq(steps=20, seed=s), OptimizerConfig(v, gamma=1e-3), 0) for s in range(2) for v in ("sgd", "adam")]
    a = runner.run_grid(runs, tmp_path / "a", workers=1)
    b = runner.run_grid(runs, tmp_path / "b", workers=3)
    assert a == b
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_compare_needs_inputs(tmp_path):
    with pytest.raises(InvalidInput):
        runner.compare([], [OptimizerConfig()], tmp_path)


def test_compare_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        runner.compare([kq(steps=2)], [OptimizerConfig("sgd")], blocker / "sub")


def test_kl_shampoo_versus_sgd_steps_to_threshold(tmp_path, capsys):
    # reported, not asserted: whitening should help on this problem
    t = kq(steps=500)
    cfgs = [
        OptimizerConfig("sgd", gamma=0.1),
        OptimizerConfig("kl_shampoo", gamma=0.01, beta1=0.9, kappa=0.3, T=1),
    ]
    summary = runner.compare([t], cfgs, tmp_path, threshold=1e-6)
    with capsys.disabled():
        for e in summary["runs"]:
            print(f"\n  {e['optimizer']}: steps_to_threshold={e['steps_to_threshold']} final={e['final_loss']:.3e}")


# --- config files -------------------------------------------------------------


def test_config_grid_expansion():
    text = """
    # two optimisers by two step sizes, then one extra run
    [run]
    task = kron_quadratic
    optimizer = sgd, kl_shampoo
    gamma = 0.01, 0.02
    steps = 10
    dims = 4x3

    [run]
    optimizer = adam
    refresh_interval = 5
    grafting = false
    """
    runs = config.parse_config(text)
    assert len(runs) == 5
    assert {(r.cfg.variant.value, r.cfg.gamma) for r in runs[:4]} == {
        ("sgd", 0.01), ("sgd", 0.02), ("kl_shampoo", 0.01), ("kl_shampoo", 0.02)
    }
    assert runs[0].task.dims == (4, 3) and runs[0].task.steps == 10
    assert runs[4].cfg.T == 5 and runs[4].task.steps == config.DEFAULTS["steps"]


@pytest.mark.parametrize(
    "text",
    [
        "",
        "gamma = 1",
        "[run]\ngamma 1",
        "[run]\nbogus = 1",
        "[run]\ngamma = fast",
        "[run]\ngamma = 1\ngamma = 2",
        "[other]\ngamma = 1",
        "[run]\ngrafting = maybe",
        "[run]\ndims = 4by3",
    ],
)
def test_config_errors(text):
    with pytest.raises(InvalidInput):
        config.parse_config(text)


# --- claims -------------------------------------------------------------------


def test_claims_empty_grid():
    with pytest.raises(EmptyGrid):
        claims.run_claims("default", [])


def test_claims_unknown_profile():
    with pytest.raises(InvalidInput):
        claims.tolerances("loose")


def test_claims_default_pass_and_strict_reports_dominant():
    ok = claims.run_claims("default", [0, 1])
    assert ok["passed"] and not ok["dominant"]
    strict = claims.run_claims("strict", [0, 1])
    assert not strict["passed"]
    assert strict["dominant"][0] == "flip_flop_residual"
    assert "dominant:" in claims.format_report(strict)


# --- command line -------------------------------------------------------------


def test_cli_run(tmp_path):
    out = tmp_path / "r.csv"
    code = cli.main(["run", "--task", "kron_quadratic", "--optimizer", "kl_shampoo", "--gamma", "0.001",
                     "--power", "0.5", "--refresh-interval", "2", "--grafting", "false", "--steps", "5",
                     "--seed", "3", "--out", str(out)])
    assert code == 0
    assert out.read_text().splitlines()[0] == ",".join(runner.CSV_HEADER)


def test_cli_run_is_reproducible(tmp_path):
    args = ["run", "--optimizer", "soap", "--steps", "20", "--gamma", "0.001"]
    assert cli.main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize(
    "args",
    [
        ["run", "--bogus", "1", "--out", "x"],
        ["run"],
        ["run", "--power", "0.3", "--out", "x"],
        ["run", "--optimizer", "kl_shampoo", "--grafting", "true", "--out", "x"],
        ["run", "--optimizer", "lion", "--out", "x"],
        ["claims", "--seeds", "0", "--out", "x"],
        ["frobnicate"],
    ],
)
def test_cli_usage_errors(args, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(args) == 2


def test_cli_io_error(tmp_path):
    assert cli.main(["run", "--steps", "2", "--out", str(tmp_path / "missing" / "r.csv")]) == 3
    assert cli.main(["compare", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 3


def test_cli_claims(tmp_path):
    out = tmp_path / "claims.json"
    assert cli.main(["claims", "--seeds", "1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["passed"] is True
    assert cli.main(["claims", "--tol-profile", "strict", "--seeds", "1", "--out", str(out)]) == 1


def test_cli_compare(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("[run]\noptimizer = sgd, kl_shampoo\ngamma = 0.001\nsteps = 10\n")
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "out"), "--workers", "2"]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert [e["optimizer"] for e in summary["runs"]] == ["sgd", "kl_shampoo"]
