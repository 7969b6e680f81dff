import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from stageflow.errors import RewardError
from stageflow.reward import (BatchValue, compile_program, compile_term,
                              eval_step, eval_term, eval_term_batch,
                              eval_total, eval_total_batch)
from stageflow.tensor import Tensor

from conftest import DATA


def term(spec_yaml: str, name="t"):
    return compile_term(name, yaml.safe_load(spec_yaml))


# -- compilation ---------------------------------------------------------------

class TestCompile:
    def test_unknown_evaluation(self):
        with pytest.raises(RewardError) as e:
            term("""
            evaluations:
              - type: frobnicate
                parameters: {vector: "a"}
            """)
        assert e.value.code == "UNKNOWN_EVALUATION"

    def test_wrong_parameter_set(self):
        with pytest.raises(RewardError) as e:
            term("""
            inputs: {a: "command"}
            evaluations:
              - type: sum_square
                parameters: {vector: "a", extra: 1}
            """)
        assert e.value.code == "TYPE_ARITY"

    def test_unbound_parameter_variable(self):
        with pytest.raises(RewardError) as e:
            term("""
            inputs: {a: "command"}
            evaluations:
              - type: sum_square
                parameters: {vector: "nonexistent"}
            """)
        assert e.value.code == "UNBOUND_VARIABLE"

    def test_outputs_become_visible_in_order(self):
        t = term("""
        inputs: {a: "command"}
        evaluations:
          - type: sum_square
            parameters: {vector: "a"}
            output: err
          - type: exponential_decay
            parameters: {error: "err", sigma: 0.25}
        """)
        assert len(t.evaluations) == 2

    def test_empty_evaluations(self):
        with pytest.raises(RewardError) as e:
            term("inputs: {a: 'command'}")
        assert e.value.code == "EMPTY_EVALUATIONS"

    def test_bad_scale(self):
        with pytest.raises(RewardError) as e:
            term("""
            inputs: {a: "command"}
            evaluations:
              - {type: sum_square, parameters: {vector: "a"}}
            scale: .nan
            """)
        assert e.value.code == "BAD_SCALE"

    def test_program_keeps_term_order(self):
        spec = {"inputs": {"v": "command"},
                "evaluations": [{"type": "sum_square", "parameters": {"vector": "v"}}]}
        prog = compile_program({"a": spec, "b": dict(spec)})
        assert [t.name for t in prog.terms] == ["a", "b"]

    def test_required_variables_from_inputs(self):
        t = term("""
        inputs: {a: "command[0:2] - local_vel[0:2]"}
        evaluations:
          - {type: sum_square, parameters: {vector: "a"}}
        """)
        assert t.required_variables == {"command", "local_vel"}


# -- primitive oracles ---------------------------------------------------------

def step_value(etype, params, scope):
    t = term_for_step(etype, params)
    return eval_step(t.evaluations[0], {k: v for k, v in scope.items()})


def term_for_step(etype, params):
    names = sorted({v for v in params.values() if isinstance(v, str)})
    return compile_term("t", {
        "inputs": {n: n for n in names},
        "evaluations": [{"type": etype, "parameters": params}],
    })


class TestPrimitiveOracles:
    """Each primitive against an independent scalar-loop oracle, 1000 cases."""

    N_CASES = 1000

    def cases(self):
        rng = np.random.default_rng(42)
        for _ in range(self.N_CASES):
            rank = int(rng.integers(0, 3))
            shape = tuple(int(rng.integers(1, 4)) for _ in range(rank))
            yield rng, rng.standard_normal(shape)

    def test_sum_square(self):
        for rng, x in self.cases():
            got = eval_step(term_for_step("sum_square", {"vector": "x"}).evaluations[0],
                            {"x": Tensor(x)})
            oracle = 0.0
            for v in np.atleast_1d(x).ravel():
                oracle += v * v
            assert got.item() == pytest.approx(oracle, rel=1e-12, abs=1e-12)

    def test_exponential_decay(self):
        for rng, x in self.cases():
            sigma = float(rng.uniform(0.05, 2.0))
            got = eval_step(
                term_for_step("exponential_decay",
                              {"error": "x", "sigma": sigma}).evaluations[0],
                {"x": Tensor(x)})
            oracle = np.vectorize(lambda e: math.exp(-e / (2 * sigma * sigma)))(
                np.atleast_1d(x))
            np.testing.assert_allclose(np.atleast_1d(got.to_numpy()), oracle,
                                       rtol=1e-12)

    def test_norms(self):
        for rng, x in self.cases():
            l2 = eval_step(term_for_step("norm_L2", {"vector": "x"}).evaluations[0],
                           {"x": Tensor(x)})
            l1 = eval_step(term_for_step("norm_L1", {"vector": "x"}).evaluations[0],
                           {"x": Tensor(x)})
            if x.ndim == 0:
                assert l2.item() == pytest.approx(abs(float(x)), rel=1e-12)
                assert l1.item() == pytest.approx(abs(float(x)), rel=1e-12)
            else:
                rows = x.reshape(-1, x.shape[-1])
                o2 = np.array([math.sqrt(sum(v * v for v in row)) for row in rows]
                              ).reshape(x.shape[:-1])
                o1 = np.array([sum(abs(v) for v in row) for row in rows]
                              ).reshape(x.shape[:-1])
                np.testing.assert_allclose(l2.to_numpy(), o2, rtol=1e-12)
                np.testing.assert_allclose(l1.to_numpy(), o1, rtol=1e-12)

    def test_quadratic(self):
        for rng, x in self.cases():
            w = float(rng.uniform(-2, 2))
            got = eval_step(
                term_for_step("quadratic", {"value": "x", "weight": w}).evaluations[0],
                {"x": Tensor(x)})
            np.testing.assert_allclose(np.atleast_1d(got.to_numpy()),
                                       np.atleast_1d(w * x * x), rtol=1e-12)

    def test_weighted_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(self.N_CASES):
            n = int(rng.integers(1, 5))
            x, w = rng.standard_normal(n), rng.standard_normal(n)
            got = eval_step(
                term_for_step("weighted_sum", {"values": "x", "weights": "w"}
                              ).evaluations[0],
                {"x": Tensor(x), "w": Tensor(w)})
            oracle = sum(a * b for a, b in zip(x, w))
            assert got.item() == pytest.approx(oracle, rel=1e-12, abs=1e-12)

    def test_binary(self):
        rng = np.random.default_rng(4)
        for _ in range(self.N_CASES):
            n = int(rng.integers(1, 5))
            c = rng.integers(0, 2, n).astype(float)
            a, b = rng.standard_normal(n), rng.standard_normal(n)
            got = eval_step(
                term_for_step("binary", {"condition": "c", "reward_value": "a",
                                         "else_value": "b"}).evaluations[0],
                {"c": Tensor(c), "a": Tensor(a), "b": Tensor(b)})
            oracle = [a[i] if c[i] else b[i] for i in range(n)]
            np.testing.assert_allclose(got.to_numpy(), oracle, rtol=1e-12)

    def test_absolute_difference(self):
        for rng, x in self.cases():
            y = rng.standard_normal(x.shape)
            got = eval_step(
                term_for_step("absolute_difference",
                              {"value1": "x", "value2": "y"}).evaluations[0],
                {"x": Tensor(x), "y": Tensor(y)})
            np.testing.assert_allclose(np.atleast_1d(got.to_numpy()),
                                       np.atleast_1d(abs(x - y)), rtol=1e-12)

    def test_negative_sigma(self):
        with pytest.raises(RewardError) as e:
            eval_step(
                term_for_step("exponential_decay",
                              {"error": "x", "sigma": -0.1}).evaluations[0],
                {"x": Tensor.scalar(1.0)})
        assert e.value.code == "NEGATIVE_SIGMA"


# -- term semantics ------------------------------------------------------------

class TestTermSemantics:
    def test_default_reward_unscaled_on_missing_binding(self):
        t = term("""
        inputs: {a: "command"}
        evaluations:
          - {type: sum_square, parameters: {vector: "a"}}
        scale: 10.0
        default_reward: 0.7
        """)
        assert eval_term(t, {}) == 0.7  # scale NOT applied

    def test_combination_sum_vs_last(self):
        spec = """
        inputs: {a: "command"}
        evaluations:
          - {type: sum_square, parameters: {vector: "a"}, output: s}
          - {type: norm_L1, parameters: {vector: "a"}}
        combination: {type: %s}
        """
        b = {"command": Tensor([1.0, 2.0])}
        last = eval_term(term(spec % "last"), b)
        total = eval_term(term(spec % "sum"), b)
        assert last == pytest.approx(3.0)
        assert total == pytest.approx(5.0 + 3.0)

    def test_weighted_sum_combination(self):
        t = term("""
        inputs: {a: "command"}
        evaluations:
          - {type: sum_square, parameters: {vector: "a"}, output: s}
          - {type: norm_L1, parameters: {vector: "a"}, output: l}
        combination:
          type: weighted_sum
          parameters:
            vectors: ["s", "l"]
            weights: [2.0, -1.0]
        """)
        assert eval_term(t, {"command": Tensor([1.0, 2.0])}) == pytest.approx(
            2.0 * 5.0 - 3.0)

    def test_scale_applied_to_total_sum(self):
        t = term("""
        inputs: {a: "command"}
        evaluations:
          - {type: quadratic, parameters: {value: "a", weight: 1.0}}
        scale: -0.5
        """)
        assert eval_term(t, {"command": Tensor([1.0, 2.0])}) == pytest.approx(-2.5)


# -- full corpus programs -------------------------------------------------------

def load_program(bundle, stage=1):
    import stageflow.schema as schema
    b = schema.parse_bundle(DATA / "bundles" / bundle)
    return compile_program(b.stages[stage - 1].reward_doc["reward"])


def synthetic_bindings(rng):
    from stageflow.env import DeskWalker
    env = DeskWalker({"command_lin_vel_x_range": [-1, 1],
                      "command_lin_vel_y_range": [-1, 1],
                      "command_ang_vel_yaw_range": [-1, 1]},
                     seed=int(rng.integers(1 << 30)))
    env.reset()
    out = []
    for _ in range(100):
        bindings, done = env.step(rng.uniform(-1, 1, 8))
        out.append(bindings)
        if done:
            env.reset()
    return out


class TestCorpusPrograms:
    def test_tune_program_matches_per_term_oracle(self):
        """The 13-term transcribed program over 100 env binding steps against
        a per-term hand evaluation through the public pieces."""
        prog = load_program("tune")
        assert len(prog.terms) == 13
        rng = np.random.default_rng(11)
        for bindings in synthetic_bindings(rng):
            got = eval_total(prog, bindings)
            oracle_total = 0.0
            for t in prog.terms:
                v = eval_term(t, bindings)
                assert got["per_term"][t.name] == pytest.approx(v, rel=1e-9, abs=1e-12)
                oracle_total += v
            assert got["total"] == pytest.approx(oracle_total, rel=1e-9, abs=1e-12)

    def test_blind_program_compiles(self):
        # the transcribed program targets a robot with more joints than the
        # toy walker, so it compiles but is not evaluable on toy bindings
        prog = load_program("blind")
        assert len(prog.terms) > 0
        assert "command" in prog.required_variables


# -- batched evaluator equivalence ---------------------------------------------

class TestBatchEquivalence:
    @pytest.mark.parametrize("bundle", ["desk", "tune"])
    def test_batch_matches_scalar_loop(self, bundle):
        prog = load_program(bundle)
        rng = np.random.default_rng(5)
        steps = synthetic_bindings(rng)[:50]
        n = len(steps)
        batched = {}
        for key in steps[0]:
            batched[key] = BatchValue(
                np.stack([s[key].to_numpy() for s in steps]),
                kind=steps[0][key].kind)
        got = eval_total_batch(prog, batched, n)
        for i, s in enumerate(steps):
            ref = eval_total(prog, s)
            assert got["total"][i] == pytest.approx(ref["total"], rel=1e-12, abs=1e-12)
            for t in prog.terms:
                assert got["per_term"][t.name][i] == pytest.approx(
                    ref["per_term"][t.name], rel=1e-12, abs=1e-12)

    def test_batch_default_reward(self):
        prog = compile_program({"t": {
            "inputs": {"a": "not_bound"},
            "evaluations": [{"type": "sum_square", "parameters": {"vector": "a"}}],
            "scale": 3.0, "default_reward": 0.25,
        }})
        out = eval_total_batch(prog, {}, 4)
        np.testing.assert_array_equal(out["per_term"]["t"], np.full(4, 0.25))

    @given(st.integers(1, 30), st.floats(0.05, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_batch_exponential_decay_property(self, n, sigma):
        prog = compile_program({"t": {
            "inputs": {"e": "err"},
            "evaluations": [{"type": "exponential_decay",
                             "parameters": {"error": "e", "sigma": sigma}}],
        }})
        rng = np.random.default_rng(n)
        errs = rng.uniform(0, 4, n)
        out = eval_total_batch(
            prog, {"err": BatchValue(errs)}, n)
        np.testing.assert_allclose(out["total"],
                                   np.exp(-errs / (2 * sigma * sigma)), rtol=1e-12)
