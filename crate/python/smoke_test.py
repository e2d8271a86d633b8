"""Smoke test for the starris extension module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/starris-*.whl
"""

import json
import math

import starris


def main():
    x = starris.inv_q(1e-5)
    assert abs(starris.q_function(x) - 1e-5) < 1e-13

    cfg = starris.ScenarioConfig(users=2, seed=3)
    cfg.ris_elements = 4
    assert json.loads(cfg.to_json())["M"] == 4
    again = starris.ScenarioConfig.from_json(cfg.to_json())
    assert again.ris_elements == 4

    tin = starris.solve(cfg, scheme="tin", ris_mode="star")
    assert all(b >= a - 1e-9 for a, b in zip(tin.trajectory, tin.trajectory[1:]))
    assert tin.transmit_power <= cfg.power_budget * (1 + 1e-9)
    assert all(q == 0.0 for q in tin.common_shares)
    assert len(tin.theta_t) == 4 and all(abs(z) <= 1.0 for z in tin.theta_t + tin.theta_r)
    assert math.isclose(tin.min_ee, min(tin.efficiencies), rel_tol=1e-12)

    rsma = starris.solve(cfg, scheme="rsma", ris_mode="star")
    print(tin, rsma, sep="\n")

    text = starris.run_experiment(json.dumps({"K": 2, "M": 4, "scheme": "tin", "ris_mode": "none", "trials": 2}))
    lines = text.strip().splitlines()
    assert lines[0].startswith("sweep_var,sweep_value,trial,scheme,ris_mode,min_ee_nats")
    assert len(lines) == 3

    try:
        starris.run_experiment('{"K": 2, "typo": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    for cid, name, passed, detail in starris.run_checks([1, 2]):
        print(cid, name, "PASS" if passed else "FAIL", detail)
        assert passed
    print("smoke test passed")


if __name__ == "__main__":
    main()
