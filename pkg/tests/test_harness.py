import csv

import pytest

from tapepolicy import harness
from tapepolicy.harness import (
    EXIT_CONFIG,
    EXIT_MISSING_POLICY,
    EXIT_NONFINITE,
    EXIT_OK,
    EXIT_VALIDATION,
    ConfigError,
    ExperimentConfig,
    ValidationReport,
    domain_config,
    main,
    read_config_file,
)
from tapepolicy.optim import NonFiniteObjectiveError


def _rows(path):
    with open(path) as fh:
        return [r for r in csv.reader(line for line in fh if not line.startswith("#"))]


def _train(tmp_path, domain, iters=5, seed=1):
    out = tmp_path / domain
    code = main(["train", "--domain", domain, "--seed", str(seed), "--desk", "--iterations", str(iters), "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_train_writes_files_and_is_deterministic(tmp_path):
    a = _train(tmp_path / "a", "gas")
    b = _train(tmp_path / "b", "gas")
    ta, tb = a / "gas_seed1_train.csv", b / "gas_seed1_train.csv"
    assert (a / "gas_seed1_policy.txt").exists()
    lines = ta.read_text().splitlines()
    assert lines[0].startswith("# config:")
    assert lines[1] == "iter,J,grad_norm,wall_ms"
    ra, rb = _rows(ta), _rows(tb)
    assert len(ra) == 6
    # everything but the wall-clock column is reproducible
    assert [r[:3] for r in ra] == [r[:3] for r in rb]
    assert (a / "gas_seed1_policy.txt").read_text() == (b / "gas_seed1_policy.txt").read_text()


def test_bad_lr_is_config_error(tmp_path):
    assert main(["train", "--domain", "gas", "--lr", "-1", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_argument_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["train", "--domain", "nope"])
    assert e.value.code == 2


def test_nonfinite_objective_exit_code(tmp_path, monkeypatch):
    def boom(cfg, kernel=None):
        raise NonFiniteObjectiveError(3, float("nan"))

    monkeypatch.setattr(harness, "train_domain", boom)
    assert main(["train", "--domain", "pharma", "--out", str(tmp_path)]) == EXIT_NONFINITE


def test_config_file_sections(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("domain = gas\nseed = 7\niterations = 4\n\n[gas]\nT = 30\nspec.capacity = 500\n")
    run, sections = read_config_file(p)
    assert run["domain"] == "gas" and sections["gas"]["T"] == "30"
    cfg = ExperimentConfig("gas", seed=7, iterations=4, section=sections["gas"])
    d = domain_config(cfg)
    assert d.T == 30 and d.spec.capacity == 500.0 and d.iterations == 4
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert (tmp_path / "o" / "gas_seed7_train.csv").exists()


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("domain = gas\n[gas]\nnot_a_field = 3\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    p.write_text("domain = gas\n[weird]\nx = 1\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    p.write_text("domain = gas\nbogus = 1\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        ExperimentConfig("gas", paths=0)


def test_full_scale_defaults():
    assert domain_config(ExperimentConfig("gas", desk=False)).n_paths == 256
    assert domain_config(ExperimentConfig("gas", desk=False)).iterations == 1000
    assert domain_config(ExperimentConfig("alm", desk=False)).n_scenarios == 2048
    assert domain_config(ExperimentConfig("pharma", desk=False)).spec.euler_steps == 9300
    assert domain_config(ExperimentConfig("pharma")).spec.euler_steps == 1500
    assert ExperimentConfig("gas").lr == 0.005 and ExperimentConfig("bench").lr == 0.05


@pytest.mark.parametrize("domain,rows", [("gas", 12), ("alm", 5), ("pharma", 20)])
def test_greeks_rows(tmp_path, domain, rows):
    out = _train(tmp_path, domain)
    pol = out / f"{domain}_seed1_policy.txt"
    assert main(["greeks", "--domain", domain, "--policy", str(pol), "--out", str(out)]) == EXIT_OK
    table = _rows(out / f"{domain}_greeks.csv")
    assert len(table) == rows + 1
    assert len(table[0]) >= 4


def test_greeks_missing_policy(tmp_path):
    assert main(["greeks", "--domain", "gas", "--policy", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == EXIT_MISSING_POLICY


def test_validate_pass_and_sabotage(tmp_path):
    assert main(["validate", "--domain", "pharma", "--iterations", "20", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "validation_pharma.txt").read_text()
    assert "cross_validation = pass" in text
    sab = tmp_path / "sab"
    code = main(["validate", "--domain", "pharma", "--iterations", "20", "--fd-threshold", "1e-9", "--out", str(sab)])
    assert code == EXIT_VALIDATION
    text = (sab / "validation_pharma.txt").read_text()
    assert "failed_checks = adjoint_vs_fd" in text


def test_validation_report_incomplete():
    rep = ValidationReport("gas", mirror_max_rel_err=0.0)
    assert not rep.complete and not rep.passed
    assert set(rep.failed_checks()) == {"adjoint_vs_fd", "cross_validation"}


def test_bench_cec_row_count_and_fresh_files(tmp_path):
    args = ["bench", "--suite", "cec", "--dims", "10", "--seeds", "5", "--budget", "1500", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert main(args) == EXIT_OK
    files = sorted(tmp_path.glob("cec_*.csv"))
    assert len(files) == 2
    rows = _rows(files[0])
    assert rows[0] == ["method", "function", "dim", "seed", "best", "wall_ms"]
    assert len(rows) == 1 + 2 * 6 * 5


def test_bench_cartpole_rows(tmp_path):
    assert main(["bench", "--suite", "cartpole", "--seeds", "2", "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(next(tmp_path.glob("cartpole_*.csv")))
    assert rows[0] == ["method", "seed", "solved", "wall_s", "final_reward"]
    assert len(rows) == 3


def test_study_commands(tmp_path):
    assert main(["scaling", "--factors", "5", "10", "--paths", "32", "--out", str(tmp_path)]) == EXIT_OK
    assert _rows(tmp_path / "alm_scaling.csv")[0] == ["n_factors", "bump_ms", "adjoint_ms", "speedup"]
    assert main(["sweep", "--ks", "10", "50", "--seeds", "1", "--iterations", "10", "--out", str(tmp_path)]) == EXIT_OK
    assert len(_rows(tmp_path / "gas_sharpness_sweep.csv")) == 3
    assert main(["crossover", "--cpps", "4", "8", "--out", str(tmp_path)]) == EXIT_OK
    assert len(_rows(tmp_path / "pharma_crossover.csv")) == 3
    assert main(["lm-compare", "--seeds", "3", "--out", str(tmp_path)]) == EXIT_OK
    assert len(_rows(tmp_path / "pharma_lm_vs_adam.csv")) == 4
