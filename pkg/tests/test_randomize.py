import numpy as np
import pytest

from stageflow.errors import RandomizeError
from stageflow.randomize import desk_scene, resample_per_env, sample

RULES = {
    "body_mass": [{
        "target": "ALL",
        "distribution": {"uniform": {"minval": 0.9, "maxval": 1.1}},
        "operation": "scale",
    }],
    "geom_friction": [{
        "target": "ALL",
        "distribution": {"uniform": {"minval": [0.6, 0.0, 0.0],
                                     "maxval": [1.1, 0.0, 0.0]}},
        "operation": "set",
    }],
}


class TestSample:
    def test_draws_stay_inside_bounds_10k(self):
        nominal = desk_scene()
        lo, hi = 0.9, 1.1
        for i in range(10_000):
            scene = sample({"body_mass": RULES["body_mass"]}, nominal, seed=i)
            ratio = scene["body_mass"] / nominal["body_mass"]
            assert np.all(ratio >= lo - 1e-12) and np.all(ratio <= hi + 1e-12)

    def test_set_operation_bounds_10k(self):
        nominal = desk_scene()
        for i in range(10_000):
            scene = sample({"geom_friction": RULES["geom_friction"]}, nominal, seed=i)
            f = scene["geom_friction"]
            assert np.all(f[:, 0] >= 0.6) and np.all(f[:, 0] <= 1.1)
            assert np.all(f[:, 1:] == 0.0)

    def test_degenerate_interval_exact(self):
        rules = {"body_mass": [{
            "target": "ALL",
            "distribution": {"uniform": {"minval": 1.25, "maxval": 1.25}},
            "operation": "scale",
        }]}
        nominal = desk_scene()
        scene = sample(rules, nominal, seed=123)
        np.testing.assert_array_equal(scene["body_mass"],
                                      nominal["body_mass"] * 1.25)

    def test_deterministic_under_seed_and_env_index(self):
        nominal = desk_scene()
        a = sample(RULES, nominal, seed=7, env_index=3)
        b = sample(RULES, nominal, seed=7, env_index=3)
        c = sample(RULES, nominal, seed=7, env_index=4)
        np.testing.assert_array_equal(a["body_mass"], b["body_mass"])
        assert not np.array_equal(a["body_mass"], c["body_mass"])

    def test_nominal_untouched(self):
        nominal = desk_scene()
        before = nominal["body_mass"].copy()
        sample(RULES, nominal, seed=0)
        np.testing.assert_array_equal(nominal["body_mass"], before)

    def test_resample_per_env_matches_sample(self):
        nominal = desk_scene()
        a = resample_per_env(RULES, nominal, base_seed=5, env_index=2)
        b = sample(RULES, nominal, seed=5, env_index=2)
        np.testing.assert_array_equal(a["body_mass"], b["body_mass"])

    def test_unknown_field_rejected(self):
        with pytest.raises(RandomizeError) as e:
            sample({"warp_drive": RULES["body_mass"]}, desk_scene(), seed=0)
        assert e.value.code == "UNKNOWN_FIELD"


class TestCorpusRandomize:
    def test_desk_bundle_rules_sample(self):
        from stageflow.schema import parse_bundle
        from conftest import DATA
        bundle = parse_bundle(DATA / "bundles" / "desk")
        for stage in bundle.stages:
            rules = stage.randomize_doc.get("randomization") or {}
            scene = sample(rules, desk_scene(), seed=1)
            assert np.all(scene["body_mass"] > 0)
