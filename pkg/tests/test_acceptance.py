"""Acceptance suite: one PASS/FAIL line per criterion at the stated tolerances.

Criteria 5 to 10 run the full-size Monte Carlo configurations and take several
minutes in total on one core.
"""
import hashlib
import math

import numpy as np
import pytest

from grainlrd.boolean import boolean_limit_experiment, coverage_probability
from grainlrd.burgers import BurgersConfig, burgers_scaling_experiment, run_burgers
from grainlrd.charlier import invariant_suite
from grainlrd.cli import PRESETS, burgers_from, experiment_from, main
from grainlrd.experiments import regime_report, run_replications
from grainlrd.model import (
    GrainSpec, angular_ell, c_phi, covariance_closed_form, covariance_rX, mean_mu, variance_scaling_check,
)
from grainlrd.testfunctions import BoxIndicator

pytestmark = pytest.mark.slow

SPEC = GrainSpec()
UNIT = BoxIndicator((0.0,), (1.0,))


def _preset(name, **over):
    d = dict(PRESETS[name][1])
    d.update(over)
    return d


def _checks(report):
    return {c["name"]: c for c in report["checks"]}


def test_criterion_01_charlier_exactness(acceptance_line):
    res = {r.name: r for r in invariant_suite()}
    names = ("orthogonality", "mehler_vs_direct", "projection_vs_difference")
    ok = all(res[n].passed for n in names)
    acceptance_line(1, ok, "  ".join(f"{n}={res[n].deviation:.1e}<{res[n].tolerance:.0e}" for n in names))
    assert ok


def test_criterion_02_closed_form_coefficients(acceptance_line):
    res = {r.name: r for r in invariant_suite()}
    names = ("exponential_closed_form", "min_closed_form", "scaled_first_coefficient")
    ok = all(res[n].passed for n in names)
    acceptance_line(2, ok, "  ".join(f"{n}={res[n].deviation:.1e}<{res[n].tolerance:.0e}" for n in names))
    assert ok


def test_criterion_03_covariance_analytics(acceptance_line):
    r0 = float(covariance_rX(SPEC, np.zeros(1)))
    t = np.geomspace(10.0, 1e3, 30)
    slope = np.polyfit(np.log(t), np.log(covariance_closed_form(SPEC, t)), 1)[0]
    tail = float(covariance_closed_form(SPEC, 1e3) * 1e3**0.5)
    ell = float(angular_ell(SPEC, np.ones(1)))
    ok = abs(r0 - 3.0) < 1e-6 and abs(slope + 0.5) <= 0.02 and abs(tail / 2.0 - 1) <= 0.01 and abs(ell / 2 - 1) <= 0.01
    acceptance_line(3, ok, f"r(0)={r0:.9f}  slope={slope:.4f}  r(t)t^0.5={tail:.5f}  ell={ell:.6f}")
    assert ok


def test_criterion_04_variance_scaling(acceptance_line):
    vs = variance_scaling_check(SPEC, UNIT, [32.0, 64.0, 128.0, 256.0])
    c = c_phi(SPEC, UNIT)
    rel = vs.ratio / c - 1
    ok = abs(rel) <= 0.05
    acceptance_line(4, ok, f"c_lambda/lambda^1.5={vs.ratio:.4f}  c(phi)={c:.4f}  rel={rel:+.4f}")
    assert ok


@pytest.fixture(scope="module")
def gaussian_run():
    cfg = experiment_from(_preset("thm22-gaussian"))
    return cfg, run_replications(cfg)


def test_criterion_05_gaussian_branch(acceptance_line, gaussian_run):
    cfg, samples = gaussian_run
    ch = _checks(regime_report(cfg, samples))
    ks, var = ch["ks_normal"], ch["variance"]
    ok = ks["passed"] and var["passed"]
    acceptance_line(5, ok, f"KS p={ks['value']:.3f}  var={var['value']:.4f} vs c(phi)={var['target']:.4f} "
                           f"(rel {var['relative_error']:+.3f})")
    assert ok


def test_criterion_06_stable_branch(acceptance_line):
    cfg = experiment_from(_preset("thm22-stable"))
    rep = regime_report(cfg, run_replications(cfg))
    ch = _checks(rep)
    hill, cf = ch["hill_index"], ch["cf_distance"]
    fl = rep["diagnostics"].get("finite_lambda_cf", {})
    ok = hill["passed"] and cf["passed"]
    acceptance_line(6, ok, f"Hill={hill['value']:.3f} (target 1.5±0.15)  CF clusters in band "
                           f"{cf['clusters_passed']}/5 (need 3); finite-lambda law {fl.get('clusters_passed')}/5")
    assert ok


def test_criterion_07_boundary_branch(acceptance_line):
    cfg = experiment_from(_preset("thm22-boundary"))
    cf = _checks(regime_report(cfg, run_replications(cfg)))["cf_distance"]
    acceptance_line(7, cf["passed"], f"CF clusters in band {cf['clusters_passed']}/5 (need 3)")
    assert cf["passed"]


def test_criterion_08_exponential_prefactor(acceptance_line):
    cfg = experiment_from(_preset("thm41-exponential"))
    ch = _checks(regime_report(cfg, run_replications(cfg)))
    sd, corr = ch["sd_ratio"], ch["shared_seed_correlation"]
    target = 0.5 * math.exp(0.125 * mean_mu(SPEC))
    ok = sd["passed"] and corr["passed"] and sd["target"] == pytest.approx(target, rel=1e-8)
    acceptance_line(8, ok, f"SD ratio={sd['value']:.4f} vs {target:.4f} (rel {sd['relative_error']:+.3f})  "
                           f"corr={corr['value']:.4f}")
    assert ok


def test_criterion_09_boolean(acceptance_line):
    cfg = experiment_from(_preset("cor41-boolean"))
    rep = boolean_limit_experiment(cfg)
    ch = _checks(rep)
    mv, hill, pf = ch["mean_volume"], ch["hill_index"], ch["prefactor"]
    assert mv["target"] == pytest.approx(coverage_probability(SPEC) * 256.0, rel=1e-12)
    ok = mv["passed"] and hill["passed"] and pf["passed"]
    hv = "degenerate" if hill["value"] is None else f"{hill['value']:.3f}"
    pv = "n/a" if pf["value"] is None else f"{pf['value']:.4f}"
    acceptance_line(9, ok, f"mean={mv['value']:.3f} vs {mv['target']:.3f} (3 SE={mv['tolerance']:.3f})  "
                           f"Hill={hv}  prefactor={pv} vs e^-mu={pf['target']:.4f}")
    assert ok


def test_criterion_10_burgers_exponents(acceptance_line):
    r1 = burgers_scaling_experiment(burgers_from(_preset("cor51-burgers")))
    r0 = burgers_scaling_experiment(burgers_from(_preset("cor52-burgers-gamma0")))
    ok = r1["passed"] and r0["passed"]
    s1 = ", ".join(f"{p['slope']:.3f}" for p in r1["points"])
    s0 = ", ".join(f"{p['slope']:.3f}" for p in r0["points"])
    acceptance_line(10, ok, f"gamma=1 slopes [{s1}] vs -1.25; gamma=0 slopes [{s0}] vs -1.333; "
                            f"degenerate rates {r1['degenerate_rate']:.3f}/{r0['degenerate_rate']:.3f}")
    assert ok


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_11_infrastructure(acceptance_line, tmp_path):
    hashes = []
    for threads in (1, 8):
        out = tmp_path / f"t{threads}"
        main(["limit-test", "--preset", "thm22-gaussian", "--out-dir", str(out), "--threads", str(threads)])
        (run,) = [p for p in out.iterdir() if p.is_dir()]
        hashes.append(_sha(run / "samples.csv"))
    bcfg = BurgersConfig(lambdas=(16.0,), replications=60)
    b1, b8 = run_burgers(bcfg, threads=1), run_burgers(bcfg, threads=8)
    b1.write_csv(tmp_path / "b1.csv")
    b8.write_csv(tmp_path / "b8.csv")
    same = hashes[0] == hashes[1] and _sha(tmp_path / "b1.csv") == _sha(tmp_path / "b8.csv")
    fault_rc = main(["charlier-check", "--inject-fault", "1e-6", "--out-dir", str(tmp_path / "c")])
    clean_rc = main(["charlier-check", "--out-dir", str(tmp_path / "c")])
    (run,) = [p for p in (tmp_path / "t1").iterdir() if p.is_dir()]
    with open(run / "samples.csv", "a", encoding="utf-8") as fh:
        fh.write("\n")
    tamper_rc = main(["report", str(tmp_path / "t1")])
    ok = same and fault_rc == 1 and clean_rc == 0 and tamper_rc == 3
    acceptance_line(11, ok, f"threads 1/8 CSV sha256 equal={same}  fault-injected charlier exit={fault_rc}  "
                            f"clean exit={clean_rc}  tampered report exit={tamper_rc}")
    assert ok
