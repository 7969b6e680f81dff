import time

import pytest

from stageflow.errors import BundleError
from stageflow.schema import mutate_corpus, parse_bundle, validate

from conftest import DATA

BUNDLES = ["tune", "blind", "desk"]


class TestParse:
    @pytest.mark.parametrize("name", BUNDLES)
    def test_parses(self, name):
        b = parse_bundle(DATA / "bundles" / name)
        assert b.num_stages >= 1
        assert [s.index for s in b.stages] == list(range(1, b.num_stages + 1))

    def test_missing_file(self, tmp_path):
        with pytest.raises(BundleError) as e:
            parse_bundle(tmp_path / "nope.yaml")
        assert e.value.code == "MISSING_FILE"

    def test_bad_yaml(self, tmp_path):
        wf = tmp_path / "workflow.yaml"
        wf.write_text("workflow: [unclosed")
        with pytest.raises(BundleError) as e:
            parse_bundle(wf)
        assert e.value.code == "PARSE_ERROR"

    def test_stage_entry_must_be_complete(self, tmp_path):
        (tmp_path / "workflow.yaml").write_text(
            "workflow:\n  stages:\n    - index: 1\n")
        with pytest.raises(BundleError) as e:
            parse_bundle(tmp_path)
        assert e.value.code == "PARSE_ERROR"


class TestValidate:
    @pytest.mark.parametrize("name", BUNDLES)
    def test_corpus_bundles_clean(self, name):
        report = validate(parse_bundle(DATA / "bundles" / name))
        assert report.ok, report.to_text()
        assert report.errors == []

    @pytest.mark.parametrize("name", BUNDLES)
    def test_validation_fast(self, name):
        start = time.perf_counter()
        validate(parse_bundle(DATA / "bundles" / name))
        assert time.perf_counter() - start < 1.0

    def test_report_json_roundtrip(self):
        import json
        report = validate(parse_bundle(DATA / "bundles" / "tune"))
        doc = json.loads(report.to_json())
        assert doc["ok"] is True
        assert isinstance(doc["findings"], list)


class TestMutationCorpus:
    @pytest.mark.parametrize("name", ["tune", "desk"])
    def test_every_mutant_rejected_with_labeled_code(self, name):
        bundle = parse_bundle(DATA / "bundles" / name)
        mutants = mutate_corpus(bundle, seed=0)
        assert len(mutants) >= 20
        for m in mutants:
            report = validate(m.bundle)
            assert not report.ok, f"mutant {m.label!r} was accepted"
            assert m.expected_code in report.codes(), (
                f"mutant {m.label!r}: expected {m.expected_code}, "
                f"got {sorted(report.codes())}")

    def test_deterministic_under_seed(self):
        bundle = parse_bundle(DATA / "bundles" / "tune")
        a = [m.label for m in mutate_corpus(bundle, seed=3)]
        b = [m.label for m in mutate_corpus(bundle, seed=3)]
        assert a == b
