import os
from pathlib import Path

import numpy as np
import pytest

from apam.cli import main
from apam.config import (
    ConfigError,
    ExperimentConfig,
    build_hyperparams,
    build_problem,
    build_run_config,
    format_delay,
    parse_config,
    parse_delay,
    write_config,
)
from apam.runtime import Fixed, PerWorkerFixed, UniformInt

CONFIGS = Path(__file__).parent.parent / "configs"


def write_cfg(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


SMALL = """
problem.kind = logistic
problem.n_samples = 120
problem.n_features = 10
problem.l2 = 0.001
optimizer.beta1 = 0.9
optimizer.beta2 = 0.999
optimizer.alpha = 1.0
run.iterations = 80
run.batch_size = 8
run.tau_max = 16
output.trace = out.csv
"""


class TestParse:
    def test_shipped_lr_config(self):
        cfg = parse_config(CONFIGS / "lr_rcv1_like.cfg")
        assert cfg.optimizer.beta1 == 0.9
        assert cfg.optimizer.beta2 == 0.999
        assert cfg.optimizer.alpha == 1e-2
        assert cfg.run.batch_size == 64

    def test_shipped_mlp_config(self):
        cfg = parse_config(CONFIGS / "mlp2_mnist_like.cfg")
        assert cfg.optimizer.alpha == 5e-4
        assert cfg.run.batch_size == 32
        assert cfg.problem.hidden == 50

    def test_range_error_with_location(self, tmp_path):
        p = write_cfg(tmp_path, "optimizer.beta1 = 1.5\n")
        with pytest.raises(ConfigError, match=r"exp\.cfg:1.*beta1"):
            parse_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "optimizer.beta3 = 0.5\n")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(p)

    def test_type_errors_located(self, tmp_path):
        p = write_cfg(tmp_path, "run.iterations = many\n")
        with pytest.raises(ConfigError, match=":1"):
            parse_config(p)

    def test_comments_and_blank_lines(self, tmp_path):
        p = write_cfg(tmp_path, "# a comment\n\nrun.workers = 3  # trailing\n")
        assert parse_config(p).run.workers == 3

    def test_missing_equals(self, tmp_path):
        p = write_cfg(tmp_path, "run.workers 3\n")
        with pytest.raises(ConfigError, match="section.key = value"):
            parse_config(p)

    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        cfg.problem.kind = "quadratic"
        cfg.problem.quad_a = (1.0, 2.5)
        cfg.problem.quad_b = (0.25, -1.5)
        cfg.problem.box_radius = 1.0
        cfg.optimizer.alpha = 0.125
        cfg.optimizer.schedule = "invsqrt"
        cfg.run.delay = "perworker:1,2,3"
        cfg.run.workers = 3
        cfg.audit.enabled = True
        out = tmp_path / "rt.cfg"
        write_config(cfg, out)
        assert parse_config(out) == cfg

    def test_delay_grammar(self):
        assert parse_delay("fixed:4") == Fixed(4)
        assert parse_delay("uniform:9") == UniformInt(9)
        assert parse_delay("perworker:1,2,3") == PerWorkerFixed((1, 2, 3))
        for m in (Fixed(4), UniformInt(9), PerWorkerFixed((1, 2))):
            assert parse_delay(format_delay(m)) == m
        with pytest.raises(ValueError):
            parse_delay("gaussian:1")


class TestBuild:
    def test_build_problem_kinds(self, tmp_path):
        p = write_cfg(tmp_path, SMALL)
        cfg = parse_config(p)
        prob = build_problem(cfg.problem)
        assert prob.dim == 10 and prob.n_samples == 120
        cfg.problem.kind = "mlp2"
        cfg.problem.classes = 3
        mp = build_problem(cfg.problem)
        assert mp.C == 3
        cfg.problem.kind = "quadratic"
        qp = build_problem(cfg.problem)
        assert qp.dim == len(cfg.problem.quad_a)

    def test_build_hyperparams_and_run(self, tmp_path):
        p = write_cfg(tmp_path, SMALL)
        cfg = parse_config(p)
        hp = build_hyperparams(cfg)
        assert hp.alpha_at(1) == 1.0 / np.sqrt(80)
        rc = build_run_config(cfg)
        assert rc.total_iterations == 80
        assert rc.policy.tau_max == 16
        rc2 = build_run_config(cfg, master_seed=99)
        assert rc2.master_seed == 99


class TestCli:
    def test_train_writes_trace(self, tmp_path, capsys):
        p = write_cfg(tmp_path, SMALL)
        out = tmp_path / "t.csv"
        assert main(["train", "--config", str(p), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("k,alpha_k")
        assert len(lines) == 81

    def test_simulate_sweep_headers_identical_tau_differs(self, tmp_path):
        p = write_cfg(tmp_path, SMALL)
        out = tmp_path / "sweep.csv"
        assert main(["simulate", "--config", str(p), "--tau", "0,2,5",
                     "--out", str(out)]) == 0
        files = [tmp_path / f"sweep_tau{t}.csv" for t in (0, 2, 5)]
        headers = [f.read_text().splitlines()[0] for f in files]
        assert headers[0] == headers[1] == headers[2]
        tail_taus = [f.read_text().splitlines()[-1].split(",")[2] for f in files]
        assert tail_taus == ["0", "2", "5"]

    def test_verify_exit_zero(self, tmp_path):
        p = write_cfg(tmp_path, SMALL)
        assert main(["verify", "--config", str(p), "--seeds", "3"]) == 0

    def test_verify_report_csv(self, tmp_path):
        p = write_cfg(tmp_path, SMALL)
        rep = tmp_path / "audit.csv"
        assert main(["verify", "--config", str(p), "--seeds", "2",
                     "--report-csv", str(rep)]) == 0
        lines = rep.read_text().splitlines()
        assert lines[0] == "seed,check,instances,worst_slack,pass"
        assert len(lines) > 2

    def test_gradcheck_all_kinds(self, tmp_path):
        for kind, extra in (("logistic", "problem.l2 = 0.01\n"),
                            ("mlp2", "problem.classes = 3\nproblem.hidden = 4\n"),
                            ("quadratic", "")):
            text = f"problem.kind = {kind}\nproblem.n_samples = 40\nproblem.n_features = 6\n" + extra
            p = write_cfg(tmp_path, text, name=f"{kind}.cfg")
            assert main(["gradcheck", "--config", str(p)]) == 0

    def test_train_threads_histogram_comment(self, tmp_path):
        p = write_cfg(tmp_path, SMALL + "run.mode = threads\nrun.workers = 2\n")
        out = tmp_path / "th.csv"
        assert main(["train", "--config", str(p), "--out", str(out)]) == 0
        text = out.read_text()
        assert "# staleness_histogram" in text

    def test_bounds_prints_inputs_and_bounds(self, tmp_path, capsys):
        p = write_cfg(tmp_path, SMALL)
        assert main(["bounds", "--config", str(p), "--L", "2.0", "--C-F", "3.0"]) == 0
        outp = capsys.readouterr().out
        assert "G_inf" in outp and "[estimated]" in outp
        assert "nonconvex_bound" in outp

    def test_env_seed_override(self, tmp_path):
        p = write_cfg(tmp_path, SMALL)
        a, b, c = (tmp_path / n for n in ("a.csv", "b.csv", "c.csv"))
        old = os.environ.get("APAM_SEED")
        try:
            os.environ["APAM_SEED"] = "7"
            main(["train", "--config", str(p), "--out", str(a)])
            main(["train", "--config", str(p), "--out", str(b)])
            os.environ["APAM_SEED"] = "8"
            main(["train", "--config", str(p), "--out", str(c)])
        finally:
            if old is None:
                os.environ.pop("APAM_SEED", None)
            else:
                os.environ["APAM_SEED"] = old
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_config_error_exit_code(self, tmp_path):
        p = write_cfg(tmp_path, "optimizer.beta1 = 2.0\n")
        assert main(["train", "--config", str(p)]) == 2

    def test_audit_enabled_train(self, tmp_path):
        p = write_cfg(tmp_path, SMALL + "audit.enabled = true\n")
        out = tmp_path / "aud.csv"
        assert main(["train", "--config", str(p), "--out", str(out)]) == 0
