import json

import pytest

from weakgas import cli
from weakgas.harness import (EXIT_CONFIG, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS, Verdict, agreement_verdict,
                             exact_verdict, load_config, lower_bound_verdict, overall_status, run_experiment)
from weakgas.model import ConfigError

MODEL = """
[model]
dimension = 1
activity = 1.0
beta = 1.0

[model.kernel]
kind = "tent"
params = [1.0, 1.0]

[model.charge_law]
atoms = [[1.0, 0.5], [-1.0, 0.5]]

[model.energy]
kind = "{energy}"

[model.cutoff]
plateau_radius = 2.0
ramp_width = 0.5
"""

REGIONS = """
[[test_functions]]
name = "a"
kind = "plateau_ramp"
center = [-1.5]
plateau = 0.5

[[test_functions]]
name = "b"
kind = "plateau_ramp"
center = [1.5]
plateau = 0.5
"""


def write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def header(kind, energy="zero", seed=1):
    return f'experiment = "{kind}"\nseed = {seed}\n' + MODEL.format(energy=energy)


def test_lower_bound_bands():
    assert lower_bound_verdict("c", -3.9, 1.0).verdict == "pass"
    assert lower_bound_verdict("c", -5.0, 1.0).verdict == "inconclusive"
    assert lower_bound_verdict("c", -6.1, 1.0).verdict == "fail"
    assert lower_bound_verdict("c", 0.0, 0.0).verdict == "pass"
    assert lower_bound_verdict("c", -1e-6, 0.0).verdict == "fail"


def test_agreement_bands():
    assert agreement_verdict("c", 2.9, 1.0, 3.0).verdict == "pass"
    assert agreement_verdict("c", -4.0, 1.0, 3.0).verdict == "inconclusive"
    assert agreement_verdict("c", 6.5, 1.0, 3.0).verdict == "fail"


def test_overall_status_rules():
    ok = exact_verdict("a", True, 0, "", 0)
    bad = exact_verdict("b", False, 0, "", 0)
    und = Verdict("c", "inconclusive", 0, "", 0)
    ctl_fail = exact_verdict("d", False, 0, "", 0, control=True)
    ctl_pass = exact_verdict("e", True, 0, "", 0, control=True)
    assert overall_status([ok, ctl_fail]) == ("pass", EXIT_PASS)
    assert overall_status([ok, bad]) == ("fail", EXIT_FAIL)
    assert overall_status([ok, und]) == ("inconclusive", EXIT_INCONCLUSIVE)
    assert overall_status([ok, ctl_pass]) == ("fail", EXIT_FAIL)
    assert overall_status([bad, und]) == ("fail", EXIT_FAIL)


def test_cli_missing_file(tmp_path):
    assert cli.main(["fkg-mc", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG


def test_cli_kind_mismatch(tmp_path, capsys):
    p = write(tmp_path, header("fkg-mc") + REGIONS)
    assert cli.main(["domination", "--config", str(p)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_config_error_carries_line(tmp_path):
    text = header("fkg-mc").replace("activity = 1.0", "activity = -2.0") + REGIONS
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text))
    assert exc.value.line == text.splitlines().index("activity = -2.0") + 1


def test_fkg_mc_rejects_nonmonotone_observable(tmp_path):
    text = header("fkg-mc") + REGIONS + """
[[observables]]
name = "up"
outer = "linear"
test_functions = ["a"]

[[observables]]
name = "down"
outer = "linear"
test_functions = ["-b"]
"""
    assert cli.main(["fkg-mc", "--config", str(write(tmp_path, text))]) == EXIT_CONFIG


def test_tdlimit_rejects_function_outside_plateau(tmp_path):
    text = header("tdlimit-scan") + """
[cutoff_family]
plateau_radii = [1.0, 2.0]

[[test_functions]]
name = "far"
kind = "plateau_ramp"
center = [5.0]
plateau = 0.5

[params]
functions = ["far"]
"""
    assert cli.main(["tdlimit-scan", "--config", str(write(tmp_path, text))]) == EXIT_CONFIG


def test_fkg_exact_budget_is_a_config_error(tmp_path):
    text = header("fkg-exact", "logcosh_gauged") + REGIONS + """
[[observables]]
name = "A"
outer = "tanh"
test_functions = ["a"]

[[observables]]
name = "B"
outer = "tanh"
test_functions = ["b"]

[params]
N_max = 5
budget = 1000
lattice = { spacing = 0.5, lo_index = [-4], shape = [8] }
"""
    assert cli.main(["fkg-exact", "--config", str(write(tmp_path, text))]) == EXIT_CONFIG


def test_cutoff_family_must_increase(tmp_path):
    text = header("monotone-g") + REGIONS + """
[cutoff_family]
plateau_radii = [2.0, 1.0]
"""
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def small_sampler(sweeps=20000, seeds=2):
    return f"\n[sampler]\nsweeps = {sweeps}\nseeds = {seeds}\n"


def test_free_gas_disjoint_regions_uncorrelated(tmp_path):
    text = header("fkg-mc") + small_sampler() + REGIONS + """
[[observables]]
name = "A"
outer = "linear"
test_functions = ["a"]

[[observables]]
name = "B"
outer = "linear"
test_functions = ["b"]
"""
    rec = run_experiment(load_config(write(tmp_path, text)), out=tmp_path / "out")
    assert rec.status == "pass"
    s = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert s["status"] == "pass" and s["thresholds"]["pass_se"] == 4.0
    assert (tmp_path / "out" / "estimates.csv").read_text().startswith("experiment,quantity,mean,se,n_eff")


def test_monotone_g_free_gas_flat(tmp_path):
    text = header("monotone-g") + small_sampler(seeds=1) + REGIONS + """
[cutoff_family]
plateau_radii = [1.0, 2.0, 3.0]

[[observables]]
name = "A"
outer = "tanh"
test_functions = ["a"]
"""
    rec = run_experiment(load_config(write(tmp_path, text)))
    assert rec.status == "pass"
    est = {e["quantity"]: e for e in rec.estimates}
    a, b = est["E[A]@base/R=1"], est["E[A]@base/R=2"]
    assert abs(a["mean"] - b["mean"]) < 4 * (a["se"] ** 2 + b["se"] ** 2) ** 0.5


def test_tdlimit_free_gas_matches_oracle(tmp_path):
    text = header("tdlimit-scan") + small_sampler(seeds=1) + REGIONS + """
[cutoff_family]
plateau_radii = [2.0, 3.0]

[params]
functions = ["a", [[1.0, "a"], [-2.0, "b"]]]
"""
    rec = run_experiment(load_config(write(tmp_path, text)))
    assert rec.status == "pass"
    assert any(v.claim.startswith("td-free-oracle") for v in rec.verdicts)


def test_samples_output(tmp_path):
    text = header("fkg-mc", "logcosh_gauged") + small_sampler(2000, 2) + REGIONS + """
[[observables]]
name = "A"
outer = "tanh"
test_functions = ["a"]

[[observables]]
name = "B"
outer = "tanh"
test_functions = ["b"]

[output]
samples = true
"""
    rc = cli.main(["fkg-mc", "--config", str(write(tmp_path, text)), "--out", str(tmp_path / "o")])
    assert rc in (EXIT_PASS, EXIT_INCONCLUSIVE)
    lines = (tmp_path / "o" / "samples.jsonl").read_text().splitlines()
    row = json.loads(lines[0])
    assert {"step", "n_particles", "energy", "observables"} <= set(row)
