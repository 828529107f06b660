import csv
import json
from pathlib import Path

import numpy as np
import pytest

from lmadherence.cli import EXIT_COMPUTATION, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from lmadherence.lmm.model import compact_gamma

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def demo_simulation(n):
    d = json.loads((CONFIGS / "demo_cohort.json").read_text())
    d["n_patients"] = n
    return d


def write_config(path, **sections):
    cfg = {"seed": 7, "paths": {"output": "out"}, "simulation": demo_simulation(100),
           "model": {"k_range": [4], "covariates": []}, "em": {"n_random_starts": 1},
           "profile": {"min_count": 10}}
    for key, val in sections.items():
        if val is None:
            cfg.pop(key, None)
        elif isinstance(val, dict) and isinstance(cfg.get(key), dict) and key != "simulation":
            cfg[key].update(val)
        else:
            cfg[key] = val
    path.write_text(json.dumps(cfg))
    return path


def run(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "cfg.json", simulation=demo_simulation(500))
    for cmd in ("simulate", "adherence", "fit", "profile", "survival", "report"):
        assert run(cmd, "--config", cfg) == EXIT_OK, cmd
    return root, cfg


# -- simulate --------------------------------------------------------------------------


def test_simulate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run("simulate", "--config", cfg, "--output", tmp_path / "a") == EXIT_OK
    assert run("simulate", "--config", cfg, "--output", tmp_path / "b", "--threads", "3") == EXIT_OK
    for name in ("patients.csv", "purchases.csv", "truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run("simulate", "--config", cfg, "--output", tmp_path / "c", "--seed", "8") == EXIT_OK
    assert (tmp_path / "c" / "patients.csv").read_bytes() != (tmp_path / "a" / "patients.csv").read_bytes()


def test_simulate_zero_patients_writes_nothing(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert run("simulate", "--config", cfg, "--n-patients", "0") == EXIT_VALIDATION
    assert not (tmp_path / "out").exists()
    sim = demo_simulation(0)
    cfg = write_config(tmp_path / "d.json", simulation=sim)
    assert run("simulate", "--config", cfg) == EXIT_VALIDATION
    assert not (tmp_path / "out").exists()
    assert "n_patients" in capsys.readouterr().err


def test_seed_is_mandatory(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", seed=None)
    assert run("simulate", "--config", cfg) == EXIT_VALIDATION
    assert "seed" in capsys.readouterr().err
    assert run("simulate", "--config", cfg, "--seed", "5") == EXIT_OK


def test_bad_config_values(tmp_path):
    for sections in ({"model": {"k_range": []}}, {"survival": {"tie_method": "exact"}},
                     {"profile": {"decode_mode": "fuzzy"}}, {"model": {"covariates": ["bmi"]}}):
        cfg = write_config(tmp_path / "c.json", **sections)
        assert run("fit", "--config", cfg) == EXIT_VALIDATION
    (tmp_path / "broken.json").write_text("{")
    assert run("fit", "--config", tmp_path / "broken.json") == EXIT_VALIDATION
    assert run("fit", "--config", tmp_path / "missing.json") == EXIT_VALIDATION


def test_unwritable_output_is_io_error(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    (tmp_path / "blocker").write_text("")
    assert run("simulate", "--config", cfg, "--output", tmp_path / "blocker" / "sub") == EXIT_IO


# -- fit ----------------------------------------------------------------------------------


def test_fit_single_k(tmp_path):
    cfg = write_config(tmp_path / "c.json", model={"k_range": [1]})
    assert run("simulate", "--config", cfg) == EXIT_OK
    assert run("fit", "--config", cfg) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "selection.csv")
    assert len(rows) == 1 and rows[0]["k"] == "1" and rows[0]["selected"] == "1"


def test_fit_corrupt_purchases_names_line(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert run("simulate", "--config", cfg) == EXIT_OK
    path = tmp_path / "out" / "purchases.csv"
    lines = path.read_text().splitlines()
    lines[4] = lines[4].replace("RAS", "ZZZ").replace("BB", "ZZZ").replace("MRA", "ZZZ")
    path.write_text("\n".join(lines) + "\n")
    assert run("fit", "--config", cfg) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "purchases.csv:5" in err and "drug" in err
    assert not (tmp_path / "out" / "selection.csv").exists()


def test_fit_selects_generating_k(tmp_path, capsys):
    # near-deterministic emissions and adjacent-only moves keep the level bands reachable
    e = 1e-6
    S = np.full((3, 3), e) + np.eye(3) * (1 - 3 * e)
    tau = np.array([[0.96, 0.04, e], [0.02, 0.96, 0.02], [e, 0.04, 0.96]])
    tau /= tau.sum(axis=1, keepdims=True)
    delta = np.array([0.4, 0.35, 0.25])
    params = {"phi": np.stack([S.T] * 3).tolist(), "beta": np.log(delta[1:] / delta[0])[:, None].tolist(),
              "gamma": compact_gamma(np.log(tau)[:, :, None]).tolist()}
    sim = {"n_patients": 600, "seed": 1, "model": {"spec": {"k": 3}, "params": params},
           "survival": {"state_hazard_multipliers": [1, 1, 1]}}
    cfg = write_config(tmp_path / "c.json", simulation=sim,
                       model={"k_range": [2, 3, 4], "basic_form": "unrestricted"})
    assert run("simulate", "--config", cfg) == EXIT_OK
    assert run("fit", "--config", cfg) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "selection.csv")
    assert [r["k"] for r in rows if r["selected_k"] == "1"] == ["3"]
    assert "selected k = 3" in capsys.readouterr().out


# -- profile / survival / report ------------------------------------------------------------


def test_pipeline_artifacts(pipeline_dir):
    root, _ = pipeline_dir
    out = root / "out"
    for name in ("panel.csv", "selection.csv", "model.json", "paths.csv", "profiles.csv",
                 "profile_counts.csv", "km_curves.csv", "cox.csv", "survival_report.json", "report.json"):
        assert (out / name).is_file(), name
    counts = read_csv(out / "profile_counts.csv")
    labels = read_csv(out / "profiles.csv")
    assert sum(int(r["n_patients"]) for r in counts) == len(labels)
    report = json.loads((out / "survival_report.json").read_text())
    assert report["cox"]["reference"] == "A"
    assert all(t["term"] != "profile_A" for t in report["cox"]["terms"])
    assert set(report["retained"]) == {r["profile"] for r in counts if r["retained"] == "1"}


def test_profile_rejects_non_four_state_model(pipeline_dir, tmp_path, capsys):
    root, cfg = pipeline_dir
    doc = json.loads((root / "out" / "model.json").read_text())
    fit_cfg = write_config(tmp_path / "c.json", paths={"patients": str(root / "out" / "patients.csv"),
                                                       "purchases": str(root / "out" / "purchases.csv"),
                                                       "output": str(tmp_path / "o")},
                           model={"k_range": [2]})
    assert run("fit", "--config", fit_cfg) == EXIT_OK
    assert run("profile", "--config", fit_cfg) == EXIT_VALIDATION
    # a valid two-drug model applied to three-drug data
    doc["spec"]["drugs"], doc["spec"]["categories"] = ["RAS", "BB"], [3, 3]
    doc["params"]["phi"] = doc["params"]["phi"][:2]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    capsys.readouterr()
    assert run("profile", "--config", fit_cfg, "--model", tmp_path / "bad.json") == EXIT_VALIDATION
    assert "does not match the data" in capsys.readouterr().err
    assert not (tmp_path / "o" / "paths.csv").exists()


def test_local_and_global_decoding_agree_on_confident_patients(pipeline_dir, tmp_path):
    root, _ = pipeline_dir
    out = root / "out"
    cfg = write_config(tmp_path / "c.json", paths={"patients": str(out / "patients.csv"),
                                                   "purchases": str(out / "purchases.csv"),
                                                   "output": str(tmp_path / "o")},
                       profile={"decode_mode": "local"})
    assert run("profile", "--config", cfg, "--model", out / "model.json") == EXIT_OK
    glob = read_csv(out / "paths.csv")
    loc = read_csv(tmp_path / "o" / "paths.csv")
    sure = {}
    for row in glob:
        sure.setdefault(row["patient_id"], True)
        sure[row["patient_id"]] &= float(row["posterior_max"]) > 0.999
    g_lab = {r["patient_id"]: r["profile_label"] for r in read_csv(out / "profiles.csv")}
    l_lab = {r["patient_id"]: r["profile_label"] for r in read_csv(tmp_path / "o" / "profiles.csv")}
    confident = [p for p, ok in sure.items() if ok]
    assert confident
    assert all(g_lab[p] == l_lab[p] for p in confident)


def test_survival_single_profile_is_error(pipeline_dir, tmp_path, capsys):
    root, cfg = pipeline_dir
    out = root / "out"
    labels = read_csv(out / "profiles.csv")
    one = tmp_path / "one.csv"
    one.write_text("patient_id,profile_label\n" + "".join(f"{r['patient_id']},A\n" for r in labels))
    cfg2 = write_config(tmp_path / "c.json", paths={"patients": str(out / "patients.csv"),
                                                    "purchases": str(out / "purchases.csv"),
                                                    "output": str(tmp_path / "o")})
    assert run("survival", "--config", cfg2, "--profiles", one) == EXIT_COMPUTATION
    assert "at least 2 retained profiles" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_survival_tau_beyond_follow_up(pipeline_dir, tmp_path, capsys):
    root, _ = pipeline_dir
    out = root / "out"
    cfg = write_config(tmp_path / "c.json", paths={"patients": str(out / "patients.csv"),
                                                   "purchases": str(out / "purchases.csv"),
                                                   "output": str(tmp_path / "o")},
                       survival={"tau": 40.0})
    assert run("survival", "--config", cfg, "--profiles", out / "profiles.csv") == EXIT_COMPUTATION
    assert "lower tau" in capsys.readouterr().err


def test_survival_unknown_patient(pipeline_dir, tmp_path):
    root, cfg = pipeline_dir
    bad = tmp_path / "p.csv"
    bad.write_text("patient_id,profile_label\nnobody,A\n")
    assert run("survival", "--config", cfg, "--profiles", bad) == EXIT_VALIDATION


def test_report_needs_stage_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run("report", "--config", cfg) == EXIT_VALIDATION


def test_report_summary(pipeline_dir, capsys):
    _, cfg = pipeline_dir
    assert run("report", "--config", cfg) == EXIT_OK
    out = capsys.readouterr().out
    assert "log-rank" in out and "HR profile_D" in out
