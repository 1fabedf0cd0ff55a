"""Tests for the temperature sweep, test parsing, dedup and coverage."""

from promptforge.backend import ModelRequest
from promptforge.backend import RequestKey
from promptforge.config import load_config
from promptforge.errors import BadTemplate
from promptforge.errors import ConfigError
from promptforge.errors import UniverseMismatch
from promptforge.lang_adapter import CoverageMap
from promptforge.lang_adapter import DEFAULT_TEST_TEMPLATE
from promptforge.lang_adapter import load_corpus
from promptforge.lang_adapter import MethodInfo
from promptforge.records import GeneratedArtifact
from promptforge.records import Instance
from promptforge.records import PromptVariant
from promptforge.records import RunRecord
from promptforge.records import Task
from promptforge.testgen import collect_method_coverage
from promptforge.testgen import coverage_report
from promptforge.testgen import dedup
from promptforge.testgen import inject_into_template
from promptforge.testgen import measure_coverage
from promptforge.testgen import method_dir_name
from promptforge.testgen import method_signature
from promptforge.testgen import parse_test_completion
from promptforge.testgen import schedule_queries
from promptforge.testgen import select_example
from promptforge.testgen import select_helpers
from promptforge.testgen import stored_coverage
from promptforge.testgen import SuiteCoverage
from promptforge.testgen import TemperatureSchedule
from promptforge.testgen import TestCandidate
from promptforge.testgen import TestgenTool
from promptforge.testgen import write_tests

import pytest
import random


QUANTILES_COMPLETION = (
    " public static void testQuantiles() {\n"
    "  DoubleArrayList list = new DoubleArrayList(new double[] {1, 2, 3});\n"
    "  DoubleArrayList percentages = new DoubleArrayList(new double[] {0.5});\n"
    '  System.out.println("quantiles=" + Descriptive.quantiles(list, percentages));\n'
    "}\n"
    "\n"
    "Method: public static double median(DoubleArrayList sortedData)\n"
)


def _lines(path, first, last, covered=()):
    return {(path, n): n in covered for n in range(first, last + 1)}


class TestTemperatureSchedule:
    def test_default_sweep(self):
        schedule = TemperatureSchedule()
        assert schedule.grid == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        assert len(schedule) == 100
        points = list(schedule.points())
        assert points[0] == (0.0, 0)
        assert points[11] == (0.1, 1)
        assert points[-1] == (0.9, 9)

    def test_single_temperature(self):
        schedule = TemperatureSchedule(start=0.5, end=0.5, queries_per_temperature=3)
        assert list(schedule.points()) == [(0.5, 0), (0.5, 1), (0.5, 2)]

    @pytest.mark.parametrize(
        "kwargs",
        [{"start": 0.5, "end": 0.2}, {"end": 1.5}, {"step": 0.0}, {"queries_per_temperature": 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TemperatureSchedule(**kwargs)

    def test_schedule_queries(self):
        base = ModelRequest(
            model_id="m",
            prompt="p",
            temperature=0.0,
            max_tokens=8,
            stop=("---",),
            key=RequestKey("colt/A.java::A.f()", "default", 0.0),
        )
        requests = schedule_queries(TemperatureSchedule(), base)
        assert len(requests) == 100
        assert len({r.key.normalized for r in requests}) == 100
        assert requests[13].temperature == 0.1
        assert requests[13].key.query_index == 3
        assert {r.prompt for r in requests} == {"p"}


class TestParseTestCompletion:
    def test_cut_at_balanced_brace(self):
        candidate = parse_test_completion(QUANTILES_COMPLETION, temperature=0.3, query_index=2)
        assert candidate.body.startswith("public static void testQuantiles() {")
        assert candidate.body.endswith("percentages));\n}")
        assert "Method:" not in candidate.body
        assert candidate.label == "t0.3_q2"
        assert candidate.size == 5

    def test_braces_in_literals(self):
        candidate = parse_test_completion('public void t() {\n  String s = "}";\n  char c = \'{\';\n}\nrest')
        assert candidate.body.endswith("'{';\n}")

    @pytest.mark.parametrize(
        "text",
        ["I would test this method with a few arrays.", "public void t() {\n  if (x) {\n    y();\n  }\n"],
    )
    def test_unterminated(self, text):
        assert parse_test_completion(text) is None

    @pytest.mark.parametrize("text", ["static { init(); }", "{ x(); }", "if (ready()) { go(); }"])
    def test_not_a_method(self, text):
        assert parse_test_completion(text) is None

    def test_hash_ignores_comments_and_layout(self):
        one = TestCandidate("public void t() {\n  // first\n  f(1);\n}", 0.0, 0)
        two = TestCandidate("public void t() {   f(1);  // second\n}", 0.4, 7)
        three = TestCandidate("public void t() {\n  f(2);\n}", 0.0, 1)
        assert one.normalized_hash == two.normalized_hash
        assert dedup([one, two, three]) == [one, three]


class TestInjectIntoTemplate:
    def test_default_template_renames_class(self):
        candidate = TestCandidate("public void t() {}", 0.0, 0)
        unit = inject_into_template(candidate, DEFAULT_TEST_TEMPLATE)
        assert f"class GeneratedTest_{candidate.normalized_hash[:8]} {{" in unit
        assert "    public void t() {}\n" in unit

    def test_class_name_placeholder(self):
        candidate = TestCandidate("public void t() {}", 0.0, 0)
        template = "import org.junit.Test;\npublic class {CLASS_NAME} {\n@Test\n{TEST_BODY}\n}\n"
        unit = inject_into_template(candidate, template)
        assert unit.startswith("import org.junit.Test;\npublic class GeneratedTest_")
        assert "{CLASS_NAME}" not in unit

    @pytest.mark.parametrize(
        "template, message",
        [
            ("class T { }", "exactly once"),
            ("class T { {TEST_BODY} {TEST_BODY} }", "exactly once"),
            ("interface T { {TEST_BODY} }", "declares no class"),
        ],
    )
    def test_bad_templates(self, template, message):
        with pytest.raises(BadTemplate, match=message):
            inject_into_template(TestCandidate("public void t() {}", 0.0, 0), template)


class TestCoverageReport:
    def test_combined_coverage_of_two_suites(self):
        first = CoverageMap(_lines("Descriptive.java", 1, 100, range(1, 30)))
        second = CoverageMap(_lines("Descriptive.java", 1, 100, range(14, 40)))
        row = coverage_report({"model": first, "randoop": second})
        assert [t.line_coverage for t in row.tools] == [pytest.approx(0.29), pytest.approx(0.26)]
        assert row.combined == pytest.approx(0.39)
        assert row.tools[0].compiling_tests is None

    def test_combined_is_at_least_the_best_suite(self):
        rng = random.Random(20220527)
        for _ in range(200):
            size = rng.randint(1, 60)
            maps = {
                tool: CoverageMap(_lines("A.java", 1, size, {n for n in range(1, size + 1) if rng.random() < 0.4}))
                for tool in ("a", "b")
            }
            row = coverage_report(maps)
            assert max(t.line_coverage for t in row.tools) <= row.combined <= 1.0

    def test_tool_without_tests_covers_nothing(self):
        cmap = CoverageMap(_lines("A.java", 1, 4, {1, 2}))
        row = coverage_report({"a": cmap, "b": CoverageMap()})
        assert row.tools[1].line_coverage == 0.0
        assert row.combined == 0.5

    def test_universes_must_agree(self):
        with pytest.raises(UniverseMismatch):
            coverage_report({"a": CoverageMap(_lines("A.java", 1, 4)), "b": CoverageMap(_lines("A.java", 1, 5))})

    def test_suite_sizes(self):
        suite = SuiteCoverage(CoverageMap(_lines("A.java", 1, 2, {1})), compiling_tests=3, test_sizes=(4, 5, 6))
        row = coverage_report({"a": suite})
        assert (row.tools[0].compiling_tests, row.tools[0].test_size) == (3, 5)
        assert SuiteCoverage(CoverageMap()).mean_size is None


def _method(name, class_name, params=(), signature=None):
    return MethodInfo(
        signature=signature or f"public {class_name} {name}()",
        body="{}",
        doc_comment=None,
        helpers=(),
        byte_range=(0, 0),
        name=name,
        class_name=class_name,
        params=params,
    )


class TestPromptInputs:
    def test_method_signature_drops_modifiers(self):
        signature = "public static synchronized DoubleArrayList quantiles(DoubleArrayList percentages)"
        assert method_signature(signature) == "DoubleArrayList quantiles(DoubleArrayList percentages)"

    def test_helpers(self):
        constructors = {
            "DoubleArrayList": [
                _method("DoubleArrayList", "DoubleArrayList"),
                _method("DoubleArrayList", "DoubleArrayList", (("double[]", "elements"),)),
            ]
        }
        method = _method("quantiles", "DoubleArrayList", (("DoubleArrayList", "percentages"),))
        assert select_helpers(method, constructors) == ["DoubleArrayList()", "DoubleArrayList(double[] elements)"]

    def test_helpers_for_unknown_class(self):
        method = _method("f", "Widget", (("java.util.List<String>", "items"),))
        constructors = {"List": [_method("List", "List", (("int", "size"),))]}
        assert select_helpers(method, constructors) == ["Widget()", "List(int size)"]

    def test_helpers_are_capped(self):
        params = tuple((f"T{i}", f"p{i}") for i in range(8))
        constructors = {f"T{i}": [_method(f"T{i}", f"T{i}")] for i in range(8)}
        assert len(select_helpers(_method("f", "Widget", params), constructors)) == 5

    def test_same_class_example(self):
        pool = [{"class_name": "A", "project": "colt"}, {"class_name": "B", "project": "colt"}]
        instance = Instance(id="x", task=Task.TESTGEN, payload="p", context={"class_name": "B"})
        assert select_example(pool, instance, "same-class") is pool[1]
        other = Instance(id="x", task=Task.TESTGEN, payload="p", context={"class_name": "C"})
        assert select_example(pool, other, "same-class") is pool[0]

    def test_random_example_prefers_other_projects(self):
        pool = [{"project": "colt"}, {"project": "jdk"}, {"project": "commons-math"}]
        instance = Instance(id="colt/A.java::A.f()", task=Task.TESTGEN, payload="p", context={"project": "colt"})
        chosen = select_example(pool, instance, "random")
        assert chosen["project"] != "colt"
        assert select_example(pool, instance, "random") is chosen

    def test_example_selection(self):
        instance = Instance(id="x", task=Task.TESTGEN, payload="p")
        assert select_example([], instance, "same-class") is None
        with pytest.raises(ConfigError):
            select_example([{}], instance, "closest")

    def test_method_dir_name(self):
        assert method_dir_name("Stats.max()") == "Stats.max"
        assert method_dir_name("A.f(int[],String)") == "A.f_int_String"


@pytest.fixture
def testgen_tool(testgen_project):
    def build(overrides=None):
        config = load_config(testgen_project, overrides)
        tool = TestgenTool(config, config.template)
        instances, failures = tool.extract(load_corpus(config.corpus, config.base_dir))
        assert failures == []
        return tool, config, instances

    return build


TEST_MAX = (
    " public void testMax() {\n"
    "  // covers: colt/Stats.java:6-8 colt/Stats.java:10-17\n"
    "  Stats stats = new Stats(new double[] {1, 3});\n"
    "  assertEquals(3.0, stats.max(), 0.0);\n"
    "}\n"
)


class TestTestgenTool:
    def test_public_methods_only(self, testgen_tool):
        _, _, instances = testgen_tool()
        assert [i.id for i in instances] == ["colt/Stats.java::Stats.max()", "colt/Stats.java::Stats.sum()"]
        assert instances[0].context["method_signature"] == "double max()"
        assert instances[0].context["project"] == "colt"

    def test_method_list(self, testgen_tool, testgen_project):
        listing = testgen_project.parent / "methods.txt"
        listing.write_text("# selected\nStats.sum()\n")
        _, _, instances = testgen_tool({"testgen.methods": str(listing)})
        assert [i.context["method_id"] for i in instances] == ["Stats.sum()"]

    def test_one_prompt_per_schedule_point(self, testgen_tool):
        tool, _, instances = testgen_tool()
        bundles = tool.prompts(instances[0], PromptVariant.DEFAULT)
        assert [(b.temperature, b.query_index) for b in bundles] == [(0.0, 0), (0.0, 1), (0.1, 0), (0.1, 1)]
        text = bundles[0].text
        assert text.startswith("Suggest a test for a method with the double max() signature.")
        assert "public static void testMax() {" in text
        assert text.endswith("        return best;\n    }\nTest:")
        assert len({b.text for b in bundles}) == 1

    def test_nl_only_has_no_example(self, testgen_tool):
        tool, _, instances = testgen_tool()
        text = tool.prompts(instances[0], PromptVariant.NL_ONLY)[0].text
        assert "DynamicBin1D" not in text

    def test_bad_examples_come_from_other_projects(self, testgen_tool):
        tool, _, instances = testgen_tool()
        text = tool.prompts(instances[0], PromptVariant.BAD_EX)[0].text
        assert "DynamicBin1D" not in text
        assert "Vector1D" in text or "ArrayList" in text

    def test_postprocess(self, testgen_tool):
        tool, _, instances = testgen_tool()
        bundle = tool.prompts(instances[0], PromptVariant.DEFAULT)[2]
        (candidate,), discards = tool.postprocess(instances[0], bundle, TEST_MAX)
        assert discards == []
        assert candidate.compiles
        assert candidate.label == "t0.1_q0"
        assert candidate.method_id == "Stats.max()"
        (broken,), _ = tool.postprocess(instances[0], bundle, "public void t() {\n  f(SYNTAX_BOMB);\n}")
        assert not broken.compiles
        values, discards = tool.postprocess(instances[0], bundle, "I would test this method with a few arrays.")
        assert values == []
        assert discards[0].reason == "unterminated test"

    def test_complete_record_drops_duplicates(self, testgen_tool):
        tool, _, instances = testgen_tool()
        bundles = tool.prompts(instances[0], PromptVariant.DEFAULT)
        record = RunRecord(instance=instances[0], prompts=bundles)
        for index, raw in enumerate([TEST_MAX, TEST_MAX.replace("  Stats", "      Stats")]):
            (value,), _ = tool.postprocess(instances[0], bundles[index], raw)
            record.raw_completions.append(raw)
            record.artifacts.append(GeneratedArtifact(index, value))
        tool.complete_record(record)
        assert len(record.artifacts) == 1
        assert record.discards[0].reason == "duplicate of t0.0_q0"

    def test_write_and_measure(self, testgen_tool, tmp_path):
        tool, config, instances = testgen_tool()
        bundles = tool.prompts(instances[0], PromptVariant.DEFAULT)
        (candidate,), _ = tool.postprocess(instances[0], bundles[0], TEST_MAX)
        record = RunRecord(
            instance=instances[0],
            prompts=bundles[:1],
            raw_completions=[TEST_MAX],
            artifacts=[GeneratedArtifact(0, candidate)],
        )
        out = tmp_path / "run"
        written = write_tests([record], config.adapter, out)
        (path,) = written["Stats.max()"]
        assert path == out / "Stats.max" / "t0.0_q0.java"
        assert "public void testMax()" in path.read_text()

        measure_coverage(written, config.adapter, out)
        cmap = stored_coverage(out, "Stats.max()")
        assert len(cmap.lines) == 25
        assert cmap.percent == pytest.approx(11 / 25)
        assert stored_coverage(out, "Stats.sum()").lines == {}

        (row,) = collect_method_coverage([record], out)
        assert row.method_id == "Stats.max()"
        assert row.generated.compiling_tests == 1
        assert row.generated.test_sizes == (5,)

    def test_needs_adapter(self, testgen_project):
        config = load_config(testgen_project, {"adapter.compile_cmd": ""})
        with pytest.raises(ConfigError, match="compile_cmd"):
            TestgenTool(config, config.template)
