import json
import math

import numpy as np
import pytest

from natural_marl import cli, harness as h


def tiny_traffic(seeds=(0,), algos=("MAAC", "FI_MAN"), epochs=3):
    cfg = h.default_config("traffic")
    cfg.seeds, cfg.algorithms, cfg.epochs = tuple(seeds), tuple(algos), epochs
    return cfg


def tiny_abstract(seeds=(0, 1, 2), algos=("MAAC", "FIAP_MAN"), epochs=4):
    cfg = h.default_config("abstract")
    cfg.env_params.update(n_agents=3, n_states=4)
    cfg.seeds, cfg.algorithms, cfg.epochs, cfg.steps_per_epoch = tuple(seeds), tuple(algos), epochs, 10
    return cfg


def write_metrics(path, algo, seed, totals, n=2, dist=None):
    rows = []
    for e, tot in enumerate(totals, start=1):
        for i in range(n):
            d = 0.0 if dist is None else dist[e - 1]
            rows.append((h.run_id(algo, seed), str(seed), algo, str(e), str(i), repr(tot / n), repr(float(tot)),
                         "0.0", repr(float(d))))
    path.write_text(h._csv_text(rows))
    return path


# -- configuration -----------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    cfg = h.load_config(p)
    assert cfg.env == "abstract"
    assert cfg.algorithms == ("MAAC", "FI_MAN", "AP_MAN", "FIAP_MAN")
    assert len(cfg.seeds) == 10
    assert cfg.schedule.exponent_v == 0.65 and cfg.schedule.exponent_theta == 0.85


def test_exponent_round_trip():
    cfg = h.parse_config("[schedule]\nexponent_v = 0.65\n")
    assert cfg.schedule.exponent_v == 0.65
    cfg = h.parse_config("[schedule]\nexponent_v = 0.6\nexponent_theta = 0.9\n")
    assert (cfg.schedule.exponent_v, cfg.schedule.exponent_theta) == (0.6, 0.9)


def test_exponent_ordering_rejected():
    with pytest.raises(h.ConfigError) as exc:
        h.parse_config("[schedule]\nexponent_v = 0.65\nexponent_theta = 0.5\n")
    assert any("exponent" in p for p in exc.value.problems)


def test_unknown_key_reports_line():
    with pytest.raises(h.ConfigError) as exc:
        h.parse_config("[run]\nepochs = 5\n\n[schedule]\nexponent_q = 1\n", source="x.ini")
    assert any("x.ini:5" in p and "exponent_q" in p for p in exc.value.problems)


def test_syntax_error_reports_line():
    with pytest.raises(h.ConfigError) as exc:
        h.parse_config("[run]\nepochs = 5\nthis line is junk\n", source="y.ini")
    assert any("y.ini" in p and "3" in p for p in exc.value.problems)


def test_constraint_violations_listed():
    with pytest.raises(h.ConfigError) as exc:
        h.parse_config("[run]\nepochs = 0\nalgorithms =\n")
    assert len(exc.value.problems) >= 2


def test_seed_spec_and_fast_profile():
    cfg = h.parse_config("[run]\nenv = traffic\nseeds = 3, 7\n")
    assert cfg.seeds == (3, 7) and cfg.epochs == 1500 and cfg.consensus == "uniform"
    fast = h.parse_config("[run]\nenv = traffic\n", fast=True)
    assert fast.epochs == 300 and len(fast.seeds) == 3


# -- runs -------------------------------------------------------------------

def test_fanout_counts_and_determinism(tmp_path):
    cfg = tiny_abstract()
    man = h.run_experiment(cfg, tmp_path / "a")
    files = sorted((tmp_path / "a" / "metrics").glob("*.csv"))
    assert len(files) == 6 and (tmp_path / "a" / "manifest.json").is_file()
    assert all(r["status"] == "ok" for r in man["runs"])
    h.run_experiment(tiny_abstract(), tmp_path / "b")
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / "metrics" / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_parallel_matches_serial(tmp_path):
    cfg = tiny_abstract(seeds=(0, 1))
    h.run_experiment(cfg, tmp_path / "s")
    cfg.workers = 2
    h.run_experiment(cfg, tmp_path / "p")
    for f in (tmp_path / "s" / "metrics").glob("*.csv"):
        assert f.read_bytes() == (tmp_path / "p" / "metrics" / f.name).read_bytes()


def test_metrics_rows_ordered_and_finite(tmp_path):
    h.run_experiment(tiny_abstract(seeds=(0,)), tmp_path)
    tab = h.read_metrics(tmp_path / "metrics" / "FIAP_MAN-s0.csv")
    assert list(tab.epochs) == [1, 2, 3, 4]
    assert np.all(np.isfinite(tab.rewards)) and np.all(np.isfinite(tab.theta_dist))
    np.testing.assert_allclose(tab.rewards.sum(axis=1), tab.network_total, rtol=1e-12)


def test_paired_epoch_one(tmp_path):
    h.run_experiment(tiny_traffic(), tmp_path)
    m = h.read_metrics(tmp_path / "metrics" / "MAAC-s0.csv")
    f = h.read_metrics(tmp_path / "metrics" / "FI_MAN-s0.csv")
    assert m.network_total[0] == f.network_total[0]
    np.testing.assert_array_equal(m.rewards[0], f.rewards[0])
    assert np.all(f.theta_dist[0] == 0)
    assert np.linalg.norm(f.theta_dist[1]) > 0
    assert np.all(m.theta_dist == 0)


def test_env_draws_independent_of_algorithm():
    a = h.build_env(tiny_abstract(), h.seed_streams(4)[0])
    b = h.build_env(tiny_abstract(algos=("AP_MAN",)), h.seed_streams(4)[0])
    np.testing.assert_array_equal(a.transitions, b.transitions)
    np.testing.assert_array_equal(a.q, b.q)


def test_abort_recorded(tmp_path):
    cfg = tiny_abstract(seeds=(0,), algos=("MAAC",))
    cfg.theta_limit = 1e-12
    man = h.run_experiment(cfg, tmp_path)
    run = man["runs"][0]
    assert run["status"] != "ok" and run["abort_step"] is not None
    assert (tmp_path / run["file"]).is_file()


# -- summaries ---------------------------------------------------------------

def test_summary_two_runs(tmp_path):
    files = [write_metrics(tmp_path / "a.csv", "MAAC", 0, [10.0] * 4),
             write_metrics(tmp_path / "b.csv", "MAAC", 1, [12.0] * 4)]
    row, = h.summarize(files, window=2)
    assert row.mean == pytest.approx(11.0) and row.sd == pytest.approx(1.0)
    assert row.cf == pytest.approx(1.96 / math.sqrt(2)) and round(row.cf, 3) == 1.386
    assert row.ci_low <= row.mean <= row.ci_high
    assert h.mean_sd_cf([10, 12], "sample")[1] == pytest.approx(math.sqrt(2))


def test_summary_single_run(tmp_path):
    row, = h.summarize([write_metrics(tmp_path / "a.csv", "FI_MAN", 0, [1.0, 2.0, 3.0])], window=2)
    assert row.mean == 2.5 and row.sd == 0 and row.ci_low == row.ci_high == 2.5


def test_summary_ordering_and_window(tmp_path):
    files = [write_metrics(tmp_path / f"{a}.csv", a, 0, list(range(1, 21)))
             for a in ("FIAP_MAN", "MAAC", "AP_MAN", "FI_MAN")]
    t1 = h.summarize(files)
    t2 = h.summarize(files[::-1])
    assert [r.algo for r in t1] == ["MAAC", "FI_MAN", "AP_MAN", "FIAP_MAN"] == [r.algo for r in t2]
    assert h.summary_csv(t1) == h.summary_csv(t2)
    assert t1[0].mean == pytest.approx(19.5)  # default window: last 10% = 2 epochs
    cong, = h.summarize(files[1:2], window=1, metric="congestion")
    assert cong.mean == -20


# -- plot data ---------------------------------------------------------------

def test_plot_empty_input(tmp_path):
    p = tmp_path / "c.dat"
    h.emit_plot_data([], "congestion_curve", p)
    assert p.read_text() == "epoch\n"


def test_plot_columns_and_passthrough(tmp_path):
    files = [write_metrics(tmp_path / "m.csv", "MAAC", 0, [5.0, 6.0, 7.0]),
             write_metrics(tmp_path / "f.csv", "FI_MAN", 0, [5.0, 4.0, 3.0], dist=[0.0, 0.3, 0.4]),
             write_metrics(tmp_path / "a.csv", "AP_MAN", 0, [5.0, 5.5, 6.5], dist=[0.0, 0.1, 0.2])]
    h.emit_plot_data(files, "congestion_curve", tmp_path / "c.dat")
    lines = (tmp_path / "c.dat").read_text().splitlines()
    assert lines[0].split() == ["epoch", "MAAC", "FI_MAN", "AP_MAN"]
    assert all(len(line.split()) == 4 for line in lines)
    tab = h.read_metrics(files[1])
    assert float(lines[2].split()[2]) == tab.network_total[1]

    head, rows = h.plot_series(files, "param_distance")
    assert head == ["epoch", "FI_MAN", "AP_MAN"]
    assert float(rows[2][1]) == pytest.approx(0.4 * math.sqrt(2))
    _, logs = h.plot_series(files, "log_param_distance")
    assert logs[0][1] == "nan" and float(logs[2][1]) == pytest.approx(math.log10(0.4 * math.sqrt(2)))


# -- command line ------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nalgorithms = MAAC, AP_MAN\nseeds = 1\nepochs = 2\nsteps_per_epoch = 5\n"
                   "[env]\nn_agents = 2\nn_states = 3\n")
    out = tmp_path / "runs"
    assert cli.main(["--config", str(cfg), "--out", str(out), "train"]) == 0
    assert len(list((out / "metrics").glob("*.csv"))) == 2
    assert cli.main(["summarize", "--out", str(out)]) == 0
    assert (out / "summary.csv").is_file()
    assert cli.main(["plot-data", "--out", str(out)]) == 0
    assert {p.name for p in (out / "plots").iterdir()} == {f"{k}.dat" for k in h.PLOT_KINDS}

    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nbogus = 1\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(out)]) == 1
    assert "bad.ini:2" in capsys.readouterr().err

    cfg.write_text(cfg.read_text() + "[fisher]\ntheta_limit = 1e-12\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "ab")]) == 2
    man = json.loads((tmp_path / "ab" / "manifest.json").read_text())
    assert all(r["status"] != "ok" for r in man["runs"])


def test_cli_gen_env(tmp_path):
    assert cli.main(["gen-env", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "abstract-s3.mdp").is_file()
    assert cli.main(["gen-env", "--env", "traffic", "--out", str(tmp_path)]) == 0
    desc = json.loads((tmp_path / "traffic-p1.json").read_text())
    assert desc["arrival_pattern"] == 1


def test_cli_analysis_commands(capsys):
    assert cli.main(["analyze-kl", "--instances", "1", "--samples", "2000"]) == 0
    assert cli.main(["compare-deterministic", "--instances", "1", "--steps", "5"]) == 0
    assert cli.main(["check-fisher", "--samples", "500"]) == 0
    assert "relative Frobenius error" in capsys.readouterr().out
