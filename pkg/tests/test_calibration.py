import json

import numpy as np
import pytest

from mfeuler import calibration as cal
from mfeuler import modulated_energy as me


def test_packaged_constants_present_and_positive():
    c = cal.load_constants()
    assert set(c) == {"melb", "mect", "mesob", "com", "gronwall"}
    assert all(v > 0 and np.isfinite(v) for v in c.values())


def test_suite_is_deterministic_and_covers_families():
    a = [cal.suite_config(1, i) for i in range(12)]
    assert a == [cal.suite_config(1, i) for i in range(12)]
    assert {c.kind for c in a} == set(cal.KINDS)
    assert {c.N for c in a} == {64, 256}
    assert all(0.2 <= c.theta <= 0.8 and 0 < c.epsilon_cap <= 0.12 for c in a)
    assert cal.suite_config(1, 0) != cal.suite_config(2, 0)


def test_suite_positions_in_unit_box():
    for i in range(6):
        x = cal.suite_positions(cal.suite_config(1, i))
        assert x.shape[1] == 2 and np.all((0 <= x) & (x < 1))


def test_required_constants_reproduce_checks():
    cfg = cal.suite_config(1, 3)
    raw = cal.evaluate_config(cfg)
    need = cal.required_constants(raw, 0.0)
    # with C equal to the required value the energy lower bound is tight
    x = cal.suite_positions(cfg)
    u, U = cal._velocity(cfg.field)
    mu = me.BackgroundDensity.from_corrector(U, cfg.epsilon)
    eta = cfg.epsilon_cap * cal._rng(cfg, 3).uniform(0.5, 1.0, cfg.N)
    chk = me.melb_check(x, mu, eta, C=need["melb"])
    assert chk.lhs == pytest.approx(chk.rhs, rel=1e-9, abs=1e-12)


def test_calibrate_and_check_small(tmp_path):
    consts, stats = cal.calibrate_static(seed=5, n_configs=6)
    for k in ("melb", "mesob", "com"):
        assert consts[k] == pytest.approx(cal.SAFETY * max(stats[k], 0.0))
    violations, worst = cal.check_static(consts, seed=5, n_configs=6)
    assert all(not v for v in violations.values())
    assert all(w <= 1 / cal.SAFETY + 1e-12 for k, w in worst.items() if k != "mect")


def test_gronwall_fit_is_tight():
    t = np.linspace(0, 0.2, 9)
    run = {"t": t, "H": 0.01 + 0.5 * t, "c1s": np.ones_like(t), "grad_inf": np.ones_like(t),
           "N": 256, "epsilon": 0.25}
    C_safe, C = cal.calibrate_gronwall([run])
    rhs = me.gronwall_rhs(0.01, t, run["c1s"], run["grad_inf"], 256, 0.25, C)
    assert np.all(run["H"] <= rhs)
    assert np.any(run["H"] > me.gronwall_rhs(0.01, t, run["c1s"], run["grad_inf"], 256, 0.25, 0.99 * C))
    assert C_safe == pytest.approx(cal.SAFETY * C)


def test_write_and_load(tmp_path):
    p = cal.write_constants({"melb": 1.0}, {"melb": 0.5}, {"suite": "x"}, tmp_path / "c.json")
    assert json.loads(p.read_text())["required_max"]["melb"] == 0.5
    assert cal.load_constants(str(p)) == {"melb": 1.0}
