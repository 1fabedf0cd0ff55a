"""Tests for the shared records and their JSON form."""

from promptforge.mutation import Mutant
from promptforge.mutation import MutantClass
from promptforge.oracles import OracleSpec
from promptforge.records import approx_tokens
from promptforge.records import Discard
from promptforge.records import GeneratedArtifact
from promptforge.records import Instance
from promptforge.records import PromptBundle
from promptforge.records import PromptVariant
from promptforge.records import RunRecord
from promptforge.records import Task
from promptforge.testgen import TestCandidate

import pytest


def _instance(**kwargs):
    values = {"id": "a/B.java:3", "task": Task.MUTATION, "payload": "x++;", "path": "a/B.java", "offset": 40}
    values.update(kwargs)
    return Instance(**values)


class TestInstance:
    def test_empty_payload_rejected(self):
        with pytest.raises(ValueError, match="empty payload"):
            _instance(payload="")

    def test_sort_key_orders_by_path_then_offset(self):
        later = _instance(id="a/B.java:9", offset=90)
        earlier = _instance(id="a/B.java:3", offset=40)
        other = _instance(id="a/A.java:9", path="a/A.java", offset=500)
        ordered = sorted([later, earlier, other], key=lambda i: i.sort_key)
        assert [i.id for i in ordered] == ["a/A.java:9", "a/B.java:3", "a/B.java:9"]

    def test_context_keys_are_sorted_in_json(self):
        instance = _instance(context={"path": "a/B.java", "line": "x++;"})
        assert list(instance.to_dict()["context"]) == ["line", "path"]


class TestApproxTokens:
    def test_whitespace_units_times_1_3_rounded_up(self):
        assert approx_tokens("") == 0
        assert approx_tokens("one") == 2
        assert approx_tokens("a b c") == 4


class TestPromptBundle:
    def test_requires_stop_sequence(self):
        with pytest.raises(ValueError, match="stop sequence"):
            PromptBundle("x", PromptVariant.DEFAULT, "text", (), 0.0, 10)

    @pytest.mark.parametrize("temperature", [-0.1, 1.1])
    def test_temperature_range(self, temperature):
        with pytest.raises(ValueError, match="temperature"):
            PromptBundle("x", PromptVariant.DEFAULT, "text", ("\n",), temperature, 10)

    def test_max_tokens_positive(self):
        with pytest.raises(ValueError, match="max_tokens"):
            PromptBundle("x", PromptVariant.DEFAULT, "text", ("\n",), 0.0, 0)


class TestRunRecord:
    def test_completed_needs_one_completion_per_prompt(self):
        bundle = PromptBundle("x", PromptVariant.DEFAULT, "text", ("\n",), 0.0, 10)
        record = RunRecord(instance=_instance(), prompts=[bundle])
        assert not record.completed
        record.raw_completions.append("- x |==> y")
        assert record.completed
        record.incomplete = True
        assert not record.completed

    def test_artifacts_of_every_kind_survive_json(self):
        mutant = Mutant(
            instance_id="a/B.java:3",
            path="a/B.java",
            line=3,
            original_line="x++;",
            mutated_line="x--;",
            compiles=True,
            kind=MutantClass.REPLACE_OPERATOR,
            tokens_changed=1,
        )
        oracle = OracleSpec(condition="!isEmpty()", lhs="first()", rhs="get(0)", method_id="L.first()")
        test = TestCandidate(body="public void t() {}", temperature=0.3, query_index=2, compiles=True)
        record = RunRecord(
            instance=_instance(),
            prompts=[PromptBundle("a/B.java:3", PromptVariant.BAD_EX, "p", ("[[Code]]",), 0.2, 64, 0, 1)],
            raw_completions=["raw"],
            artifacts=[GeneratedArtifact(0, mutant), GeneratedArtifact(0, oracle), GeneratedArtifact(0, test)],
            discards=[Discard("raw", "no mutation parsed")],
        )
        restored = RunRecord.from_dict(record.to_dict())
        assert restored == record
        assert restored.values() == [mutant, oracle, test]
        assert restored.prompts[0].dropped_examples == 1
