import json

import numpy as np

from graphonldp.cli import main


def run(tmp_path, command, *overrides, config=None, out=None):
    out = out or (tmp_path / f"out_{command.replace('-', '_')}_{len(overrides)}")
    argv = [command, "--out", str(out)]
    if config is not None:
        argv += ["--config", str(config)]
    for ov in overrides:
        argv += ["--set", ov]
    return main(argv), out


class TestConfig:
    def test_missing_config_file(self, tmp_path):
        code, _ = run(tmp_path, "sample", config=tmp_path / "nope.ini")
        assert code == 2

    def test_bad_override_shape(self, tmp_path):
        code, _ = run(tmp_path, "sample", "bogus")
        assert code == 2

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[graphon]\nfamily = constant\nN = 40\nlevel = 0.5\n")
        code, out = run(tmp_path, "sample", "run.seed=5", config=cfg)
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["config"]["graphon"]["n"] == "40"
        assert man["config"]["run"]["seed"] == "5"


class TestSample:
    def test_header_and_manifest(self, tmp_path):
        code, out = run(tmp_path, "sample", "graphon.family=constant",
                        "graphon.N=30", "graphon.level=0.8")
        assert code == 0
        head = (out / "network.txt").read_text().splitlines()[0].split()
        assert head[0] == "30" and head[3] == "constant"
        man = json.loads((out / "manifest.json").read_text())
        assert man["artifacts"][0]["path"] == "network.txt"
        assert len(man["artifacts"][0]["sha256"]) == 64

    def test_same_seed_byte_identical(self, tmp_path):
        _, out1 = run(tmp_path, "sample", "graphon.N=50", out=tmp_path / "a")
        _, out2 = run(tmp_path, "sample", "graphon.N=50", out=tmp_path / "b")
        assert (out1 / "network.txt").read_bytes() == (out2 / "network.txt").read_bytes()

    def test_power_law_domain_validation(self, tmp_path):
        code, _ = run(tmp_path, "sample", "graphon.family=power-law",
                      "graphon.beta_pl=1.2")
        assert code == 2

    def test_n_too_small(self, tmp_path):
        code, _ = run(tmp_path, "sample", "graphon.N=1")
        assert code == 2

    def test_power_law_rejected_for_epidemic_runs(self, tmp_path):
        # the unit-interval family can be sampled but not fed to the
        # circle-domain epidemic pipeline
        code, _ = run(tmp_path, "sample", "graphon.family=power-law",
                      "graphon.N=50", "graphon.phi_exponent=0.5")
        assert code == 0
        code, _ = run(tmp_path, "simulate", "graphon.family=power-law",
                      "graphon.N=50", "grid.T=0.1")
        assert code == 2


class TestSimulateAndMeanfield:
    def test_simulate_artifacts(self, tmp_path):
        code, out = run(tmp_path, "simulate", "graphon.N=60", "grid.T=0.5",
                        "grid.M=8", "run.replicas=2")
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        names = {a["path"] for a in man["artifacts"]}
        assert "trajectory_000.jsonl" in names and "flux_001.csv" in names

    def test_meanfield_artifacts(self, tmp_path):
        code, out = run(tmp_path, "meanfield", "grid.M=8", "grid.T=0.5",
                        "grid.steps=100")
        assert code == 0
        lines = (out / "density.csv").read_text().splitlines()
        assert lines[0] == "t,alpha,theta,value"


class TestCompare:
    def test_zero_replicas_rejected(self, tmp_path):
        code, _ = run(tmp_path, "compare", "run.replicas=0",
                      "compare.N_sweep=40")
        assert code == 2

    def test_pure_death_binomial_scale(self, tmp_path):
        # beta -> 0 limit: independent recoveries; the sup-bin gap against
        # the closed-form limit sits on the binomial fluctuation scale
        N, M = 1000, 16
        code, out = run(tmp_path, "compare", "model.beta=1e-9",
                        f"compare.N_sweep={N}", "run.replicas=6",
                        "grid.T=1.0", f"grid.M={M}", "grid.steps=400",
                        "compare.snapshots=6", "model.init=uniform:0.3")
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        med = man["medians"][str(N)]
        sigma = 1.0 / (2.0 * np.sqrt(N * M))
        assert med <= 6 * sigma
        assert med > sigma / 20  # not degenerate either

    def test_deviation_shrinks_with_n(self, tmp_path):
        code, out = run(tmp_path, "compare", "compare.N_sweep=100,400",
                        "run.replicas=6", "grid.T=1.0", "grid.M=8",
                        "grid.steps=200", "compare.snapshots=6")
        assert code == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["medians"]["400"] < man["medians"]["100"]

    def test_thread_count_does_not_change_results(self, tmp_path):
        # per-replica RNG streams: --threads is a throughput knob only
        base = ["compare.N_sweep=120", "run.replicas=4", "grid.T=0.5",
                "grid.M=8", "grid.steps=100", "compare.snapshots=4"]
        _, out1 = run(tmp_path, "compare", *base, "run.threads=1",
                      out=tmp_path / "t1")
        _, out2 = run(tmp_path, "compare", *base, "run.threads=2",
                      out=tmp_path / "t2")
        m1 = json.loads((out1 / "compare.json").read_text())
        m2 = json.loads((out2 / "compare.json").read_text())
        assert m1 == m2


class TestRate:
    def test_report_structure(self, tmp_path):
        code, out = run(tmp_path, "rate", "grid.M=16", "grid.T=1.0",
                        "grid.steps=400")
        assert code == 0
        rep = json.loads((out / "rate.json").read_text())
        names = {r["name"] for r in rep}
        assert names == {"rate_G_meanfield_flux", "sis_action_meanfield_path"}
        for r in rep:
            assert r["value"] < r["tolerance"]
            assert set(r["grid"]) == {"M", "dt"}


class TestAction:
    def test_equilibrium_to_equilibrium(self, tmp_path):
        code, out = run(tmp_path, "action", "graphon.family=constant",
                        "graphon.level=1.0", "grid.M=12", "grid.K=30",
                        "grid.T=1.0", "action.s0=equilibrium",
                        "action.sT=equilibrium", "action.tol_grad=1e-7")
        assert code == 0
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["action"] < 1e-10
        assert diag["converged"]
        assert (out / "path.csv").exists() and (out / "el_residual.csv").exists()

    def test_bump_positive_action(self, tmp_path):
        code, out = run(tmp_path, "action", "graphon.family=constant",
                        "graphon.level=1.0", "grid.M=12", "grid.K=30",
                        "grid.T=1.0", "action.sT=bump:3.14,0.7,0.15")
        assert code == 0
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["action"] > 1e-4
        assert diag["formula_discrepancies"] == []

    def test_malformed_preset_usage_error(self, tmp_path):
        code, _ = run(tmp_path, "action", "action.sT=bump:oops")
        assert code == 2

    def test_infeasible_endpoint_rejected(self, tmp_path):
        code, _ = run(tmp_path, "action", "action.s0=uniform:0.0")
        assert code == 2


class TestLdpCheck:
    def test_slopes_converge(self, tmp_path):
        code, out = run(tmp_path, "ldp-check")
        assert code == 0
        rep = json.loads((out / "ldp_check.json").read_text())
        assert rep["monotone"]
        assert rep["final_gap"] <= 2e-3

    def test_tail_level_validated(self, tmp_path):
        code, _ = run(tmp_path, "ldp-check", "ldp_check.a=0.9")
        assert code == 2
