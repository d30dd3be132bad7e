"""Smoke test for the latsched_py extension.

Build and install with `maturin develop -m crates/python/Cargo.toml`, or copy
target/release/liblatsched_py.so to latsched_py.so next to this script.
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import latsched_py as ls


def main() -> None:
    plant = ls.Plant()
    assert len(plant.params_hash()) == 64
    assert json.loads(plant.params_json())

    hold = [plant.nominal_setpoint] * 4
    out = plant.replay(hold, [50.0] * 4)
    assert len(out["t"]) == 4 * 10 + 1
    assert abs(out["x2"][-1] - plant.nominal_setpoint) < 1e-3, out["x2"][-1]

    prices = ls.two_tier_prices(48)
    assert len(prices) == 48 and min(prices) < max(prices)
    assert ls.generate_prices(24, seed=3) == ls.generate_prices(24, seed=3)

    with tempfile.TemporaryDirectory() as out_dir:
        config = os.path.join(out_dir, "config.json")
        with open(config, "w") as f:
            json.dump({"campaign": {"episodes": 4}}, f)
        code = ls.run_cli(["--config", config, "--out", out_dir, "--arch", "pca", "pipeline"])
        assert code in (0, 2), code

        manifold = ls.Manifold.load(os.path.join(out_dir, "manifold.pcamodel.json"))
        model = ls.LatentModel.load(os.path.join(out_dir, "latent.sbm.json"))
        row = [out[c][0] for c in manifold.channels]
        latent = manifold.encode(row)
        assert len(latent) == manifold.latent_dim
        assert len(manifold.decode(latent)) == len(manifold.channels)

        schedule = ls.optimize(model, manifold, prices)
        assert len(schedule.setpoints) == 48
        assert all(16.0 - 1e-9 <= s <= 24.0 + 1e-9 for s in schedule.setpoints)
        assert schedule.cost <= schedule.baseline_cost + 1e-6
        assert len(schedule.storage) == 48 * 10 + 1
        assert len(schedule.channel("x2")) == len(schedule.storage)

    print("latsched_py smoke test passed")


if __name__ == "__main__":
    main()
