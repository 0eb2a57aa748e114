import csv
import subprocess
import sys

import numpy as np
import pytest

from mcmpl import ar1, binary, harness, io, weibull
from mcmpl.cli import main
from mcmpl.core import substream


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def binary_csv(tmp_path, n=40, t=6, seed=19, mnar=False):
    spec = harness.ExperimentSpec(
        model="binary", n_clusters=n, t_periods=t, n_trials=2,
        methods=("mcar:profile",), seed=seed,
        mechanism="mnar" if mnar else "mcar", beta=(1.0,),
        gamma1=(5.0,) if mnar else (2.5,), gamma2=1.0 if mnar else 0.0)
    data, _ = harness.generate_binary_dataset(spec, substream(seed, 0, 0))
    path = tmp_path / "binary.csv"
    io.write_dataset(data, "binary", path)
    return str(path), data


def weibull_csv(tmp_path, n=40, t=6, seed=23):
    spec = harness.ExperimentSpec(
        model="weibull", n_clusters=n, t_periods=t, n_trials=2,
        methods=("profile",), seed=seed, xi=1.5, beta=(-1.0, 1.0),
        censoring_share=0.2)
    data, _ = harness.generate_survival_dataset(spec, substream(seed, 0, 0))
    path = tmp_path / "weibull.csv"
    io.write_dataset(data, "weibull", path)
    return str(path), data


def ar1_csv(tmp_path, n=80, t=5, seed=29, rho=0.5):
    spec = harness.ExperimentSpec(model="ar1", n_clusters=n, t_periods=t,
                                  n_trials=2, methods=("profile",), seed=seed,
                                  rho=rho, sigma2=1.0)
    data, _ = harness.generate_ar1_dataset(spec, substream(seed, 0, 0))
    path = tmp_path / "ar1.csv"
    io.write_dataset(data, "ar1", path)
    return str(path), data


def read_table(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


class TestRoundTrip:
    @pytest.mark.parametrize("kind", ["binary", "weibull", "ar1"])
    def test_write_read_identity(self, tmp_path, kind):
        maker = {"binary": binary_csv, "weibull": weibull_csv, "ar1": ar1_csv}[kind]
        path, data = maker(tmp_path)
        back = io.read_dataset(path, kind)
        assert np.allclose(back.responses, data.responses, equal_nan=True)
        assert np.allclose(back.covariates, data.covariates)
        assert np.array_equal(back.indicators, data.indicators)
        assert np.array_equal(back.unit_mask, data.unit_mask)
        if kind == "ar1":
            assert np.allclose(back.initial_conditions, data.initial_conditions)


class TestFitCommand:
    def test_binary_mcar_fit(self, tmp_path):
        path, _ = binary_csv(tmp_path)
        out = str(tmp_path / "fit.csv")
        code = main(["fit", "--model", "binary", "--method", "mcmpl",
                     "--data", path, "--replicates", "100", "--seed", "17",
                     "--out", out])
        assert code == 0
        header, rows = read_table(out)
        assert header == ["method", "parameter", "estimate", "std_error",
                          "z", "p_value", "ci_lo", "ci_hi"]
        assert rows[0][0] == "mcmpl" and rows[0][1] == "beta1"
        footer = open(out).read().splitlines()[-1]
        assert footer.startswith("# seed=17 replicates=100 dropped_clusters=")

    def test_weibull_fit_reports_relative_risks(self, tmp_path):
        path, _ = weibull_csv(tmp_path)
        out = str(tmp_path / "fit.csv")
        code = main(["fit", "--model", "weibull", "--method", "mcmpl",
                     "--data", path, "--replicates", "100", "--out", out])
        assert code == 0
        _, rows = read_table(out)
        params = [r[1] for r in rows]
        assert params == ["xi", "beta1", "beta2", "rr1", "rr2"]
        by_name = {r[1]: r for r in rows}
        xi, b2 = float(by_name["xi"][2]), float(by_name["beta2"][2])
        assert float(by_name["rr2"][2]) == pytest.approx(np.exp(-xi * b2), rel=1e-6)

    def test_ar1_fit(self, tmp_path):
        path, _ = ar1_csv(tmp_path)
        out = str(tmp_path / "fit.csv")
        assert main(["fit", "--model", "ar1", "--method", "mcmpl",
                     "--data", path, "--replicates", "100", "--out", out]) == 0
        _, rows = read_table(out)
        assert [r[1] for r in rows] == ["rho", "sigma2"]

    def test_single_replicate_legal(self, tmp_path):
        path, _ = binary_csv(tmp_path)
        out = str(tmp_path / "fit.csv")
        code = main(["fit", "--model", "binary", "--method", "mcmpl",
                     "--data", path, "--replicates", "1", "--out", out])
        assert code in (0, 2)  # degenerate R=1 may flag, but must run and write
        assert read_table(out)[1]

    def test_separation_exit_code_and_flag(self, tmp_path):
        # missingness tracks the response almost deterministically
        rng = substream(18, 0)
        n, t = 40, 6
        x = 0.2 * rng.standard_normal((n, t))
        y = (rng.random((n, t)) < 0.5).astype(float)
        miss = np.where(y == 1.0, 1.0, 0.0)
        miss[:, 0] = 0.0
        data = binary.make_binary_dataset(np.where(miss == 1, np.nan, y), x, miss)
        path = tmp_path / "sep.csv"
        io.write_dataset(data, "binary", path)
        out = str(tmp_path / "fit.csv")
        code = main(["fit", "--model", "binary", "--mechanism", "mnar",
                     "--method", "profile", "--data", str(path),
                     "--replicates", "10", "--out", out])
        assert code == 2
        text = open(out).read()
        assert "gamma2_at_bound" in text

    def test_malformed_file_exit_one(self, tmp_path, capsys):
        path = write_lines(tmp_path / "bad.csv",
                           ["cluster,t,y,missing,x1", "1,1,1,0,0.5", "1,2,2,0,0.1"])
        code = main(["fit", "--model", "binary", "--data", path,
                     "--out", str(tmp_path / "o.csv")])
        assert code == 1
        assert "line 3" in capsys.readouterr().err

    def test_missing_column_exit_one(self, tmp_path, capsys):
        path = write_lines(tmp_path / "bad.csv", ["cluster,t,y", "1,1,1"])
        assert main(["fit", "--model", "binary", "--data", path,
                     "--out", str(tmp_path / "o.csv")]) == 1
        assert "missing" in capsys.readouterr().err


class TestSimulateCommand:
    def config(self, tmp_path, **kv):
        base = {"model": "binary", "link": "logit", "mechanism": "mcar",
                "N": 30, "T": 5, "S": 3, "R": 40, "seed": 11, "beta": 1.0,
                "gamma1": 2.5, "gamma2": 0.0,
                "methods": "mcar:profile,mcar:mcmpl"}
        base.update(kv)
        lines = [f"{k} = {v}" for k, v in base.items()]
        return write_lines(tmp_path / "exp.cfg", lines)

    def test_runs_and_writes_table(self, tmp_path):
        cfg = self.config(tmp_path)
        out = str(tmp_path / "metrics.csv")
        assert main(["simulate", "--config", cfg, "--out", out]) == 0
        header, rows = read_table(out)
        assert header == ["N", "T", "method", "parameter", "B", "MB", "SD",
                          "RMSE", "MAE", "SE_over_SD", "coverage",
                          "failed_trials"]
        assert {r[2] for r in rows} == {"mcar:profile", "mcar:mcmpl"}
        assert all(r[0] == "30" and r[1] == "5" for r in rows)

    def test_zero_trials_invalid(self, tmp_path, capsys):
        cfg = self.config(tmp_path, S=0)
        assert main(["simulate", "--config", cfg,
                     "--out", str(tmp_path / "m.csv")]) == 1
        assert "1" in capsys.readouterr().err  # counts must be >= 1

    def test_unknown_key_listed(self, tmp_path, capsys):
        cfg = self.config(tmp_path, bogus_key=3)
        assert main(["simulate", "--config", cfg,
                     "--out", str(tmp_path / "m.csv")]) == 1
        assert "bogus_key" in capsys.readouterr().err

    def test_thread_invariance_bytes(self, tmp_path):
        cfg = self.config(tmp_path, S=4)
        out1, out2 = str(tmp_path / "m1.csv"), str(tmp_path / "m2.csv")
        assert main(["simulate", "--config", cfg, "--out", out1,
                     "--threads", "1"]) == 0
        assert main(["simulate", "--config", cfg, "--out", out2,
                     "--threads", "2"]) == 0
        assert open(out1, "rb").read() == open(out2, "rb").read()

    def test_threads_env_fallback(self, tmp_path, monkeypatch):
        cfg = self.config(tmp_path, S=4)
        base = str(tmp_path / "m0.csv")
        assert main(["simulate", "--config", cfg, "--out", base,
                     "--threads", "1"]) == 0
        monkeypatch.setenv("MCMPL_THREADS", "2")
        out = str(tmp_path / "menv.csv")
        assert main(["simulate", "--config", cfg, "--out", out]) == 0
        assert open(out, "rb").read() == open(base, "rb").read()


class TestTraceCommand:
    def test_ar1_trace_normalized_and_reincreasing(self, tmp_path):
        path, _ = ar1_csv(tmp_path, n=250, t=4, seed=37, rho=0.9)
        out = str(tmp_path / "trace.csv")
        assert main(["trace", "--model", "ar1", "--data", path, "--param", "rho",
                     "--grid=-1.5:1.5:0.05", "--replicates", "300",
                     "--seed", "3", "--out", out]) == 0
        header, rows = read_table(out)
        assert header == ["param_value", "rel_profile", "rel_mcmpl"]
        lp = np.array([float(r[1]) if r[1] else -np.inf for r in rows])
        lm = np.array([float(r[2]) if r[2] else -np.inf for r in rows])
        assert lp.max() == pytest.approx(0.0, abs=1e-9)
        assert lm[np.isfinite(lm)].max() == pytest.approx(0.0, abs=1e-9)
        # the modified curve has an interior maximum, dips, then re-increases
        # toward the feasibility edge (the branch the bounded fit avoids)
        interior = next(i for i in range(1, len(lm) - 1)
                        if np.isfinite(lm[i]) and lm[i] > lm[i - 1] and lm[i] >= lm[i + 1])
        tail = lm[interior:]
        dip = interior + int(np.nanargmin(np.where(np.isfinite(tail), tail, np.nan)))
        after_dip = lm[dip:]
        assert np.isfinite(after_dip).any()
        assert np.nanmax(np.where(np.isfinite(after_dip), after_dip, np.nan)) \
            > lm[dip] + 0.5

    def test_profile_band_reproduces_lr_interval(self, tmp_path):
        path, data = ar1_csv(tmp_path, n=200, t=8, seed=41)
        out = str(tmp_path / "trace.csv")
        step = 0.002
        assert main(["trace", "--model", "ar1", "--data", path, "--param", "rho",
                     "--grid", f"0.0:0.9:{step}", "--replicates", "100",
                     "--seed", "3", "--out", out]) == 0
        _, rows = read_table(out)
        grid = np.array([float(r[0]) for r in rows])
        lp = np.array([float(r[1]) if r[1] else -np.inf for r in rows])
        band = -0.5 * 3.841458820694124  # chi2(1) 0.95 quantile / 2
        inside = grid[lp >= band]
        # compare the grid-derived endpoints against a direct bisection on
        # the shifted profile curve
        from scipy.optimize import brentq

        from mcmpl import core as mcore

        model = ar1.AR1PanelModel()
        peak = lp.max()

        def rel(r):
            s2 = max(ar1.constrained_sigma2(r, data, "NT"), ar1.SIGMA2_FLOOR)
            return mcore.profile_loglik(model, data, np.array([r, s2]))

        shift = max(rel(g) for g in grid[np.argmax(lp):np.argmax(lp) + 1])
        lo_exact = brentq(lambda r: rel(r) - shift - band, grid[0], grid[np.argmax(lp)])
        hi_exact = brentq(lambda r: rel(r) - shift - band, grid[np.argmax(lp)], grid[-1])
        assert abs(inside.min() - lo_exact) <= 2 * step
        assert abs(inside.max() - hi_exact) <= 2 * step

    def test_binary_trace_from_config(self, tmp_path):
        cfg = write_lines(tmp_path / "exp.cfg", [
            "model = binary", "mechanism = mcar", "N = 40", "T = 5", "S = 2",
            "R = 60", "seed = 13", "beta = 1.0", "gamma1 = 2.5",
            "methods = mcar:mcmpl"])
        out = str(tmp_path / "trace.csv")
        assert main(["trace", "--config", cfg, "--param", "beta1",
                     "--grid", "0.0:2.0:0.1", "--out", out]) == 0
        _, rows = read_table(out)
        assert len(rows) == 21
        lm = np.array([float(r[2]) if r[2] else -np.inf for r in rows])
        assert lm[np.isfinite(lm)].max() == pytest.approx(0.0, abs=1e-9)

    def test_empty_grid_rejected(self, tmp_path, capsys):
        path, _ = ar1_csv(tmp_path)
        assert main(["trace", "--model", "ar1", "--data", path, "--param", "rho",
                     "--grid", "1.0:0.5:0.1", "--out", str(tmp_path / "t.csv")]) == 1
        assert "grid" in capsys.readouterr().err


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        cfg = write_lines(tmp_path / "exp.cfg", [
            "model = ar1", "N = 20", "T = 4", "S = 2", "R = 30", "seed = 2",
            "rho = 0.5", "sigma2 = 1.0", "methods = profile"])
        out = str(tmp_path / "m.csv")
        proc = subprocess.run([sys.executable, "-m", "mcmpl", "simulate",
                               "--config", cfg, "--out", out],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        header, rows = read_table(out)
        assert rows and header[0] == "N"
