import json
import re
from decimal import Decimal

import pytest

from ensql.catalog import FilterLevel
from ensql.config import PipelineConfig
from ensql.formats import RepresentationFormat
from ensql.gateway import (
    STAGE_GENERATION,
    STAGE_LINKING,
    STAGE_SELECTION,
    TokenUsage,
    UsageRow,
)
from ensql.generation import SqlCandidate, load_generation_system_prompt
from ensql.harness import (
    BenchmarkItem,
    DatasetError,
    GoldExecutionError,
    PipelineRunner,
    RunRecord,
    SweepError,
    aggregate_records,
    bounds_analysis,
    build_fewshot_store,
    ex_by_vote,
    execution_accuracy,
    load_dataset,
    rank_combinations,
    read_records,
    run_benchmark,
    sweep,
    write_records,
)
from ensql.gateway import HashEmbeddingBackend
from ensql.selection import (
    Confidence,
    ExecStatus,
    ExecutionResult,
    SelectionMethod,
    SelectionOutcome,
)

from helpers import (
    EXPECTED_CALLS,
    EXPECTED_EX,
    ScriptedBackend,
    TOY_BENCH,
    ToyScript,
    sql_block,
    write_toy_dataset,
)


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    return write_toy_dataset(tmp_path_factory.mktemp("dataset"))


class TestLoadDataset:
    def test_directory_layout(self, toy_dataset):
        items = load_dataset(toy_dataset)
        assert len(items) == len(TOY_BENCH)
        first = items[0]
        assert first.question_id == "1"
        assert first.db_id == "toy_shop"
        assert first.question == TOY_BENCH[0]["question"]
        assert first.gold_sql == TOY_BENCH[0]["gold"]
        assert first.db_path.endswith("dev_databases/toy_shop/toy_shop.sqlite")

    def test_json_file_directly(self, toy_dataset):
        items = load_dataset(toy_dataset / "dev.json")
        assert len(items) == len(TOY_BENCH)

    def test_limit(self, toy_dataset):
        assert len(load_dataset(toy_dataset, limit=3)) == 3

    def test_query_key_and_evidence(self, tmp_path, toy_dataset):
        doc = [
            {
                "db_id": "toy_shop",
                "question": "How many users?",
                "query": "SELECT COUNT(*) FROM users",
                "evidence": "users means rows of users",
            }
        ]
        path = tmp_path / "spiderish.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        items = load_dataset(path, db_root=toy_dataset / "dev_databases")
        assert items[0].gold_sql == "SELECT COUNT(*) FROM users"
        assert items[0].hint == "users means rows of users"
        assert items[0].question_id == "0"  # position fallback

    def test_malformed_records_skipped_with_warning(self, tmp_path, toy_dataset, caplog):
        doc = [
            "not an object",
            {"db_id": "toy_shop", "question": "no sql at all"},
            {
                "db_id": "toy_shop",
                "question": "ok?",
                "SQL": "SELECT 1",
            },
        ]
        path = tmp_path / "dirty.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        with caplog.at_level("WARNING"):
            items = load_dataset(path, db_root=toy_dataset / "dev_databases")
        assert len(items) == 1
        assert "skipped 2 malformed records" in caplog.text

    def test_missing_database_raises(self, tmp_path):
        doc = [{"db_id": "ghost", "question": "q", "SQL": "SELECT 1"}]
        path = tmp_path / "dev.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        with pytest.raises(DatasetError, match="ghost"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(tmp_path)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "dev.json").write_text("{oops", encoding="utf-8")
        with pytest.raises(DatasetError, match="not valid JSON"):
            load_dataset(tmp_path)

    def test_non_list_document(self, tmp_path):
        (tmp_path / "dev.json").write_text("{}", encoding="utf-8")
        with pytest.raises(DatasetError, match="JSON list"):
            load_dataset(tmp_path)


class TestExecutionAccuracy:
    def test_matching_results(self, toy_db):
        assert execution_accuracy(
            "SELECT name FROM users ORDER BY name",
            "SELECT name FROM users ORDER BY user_id",
            toy_db,
        ) == 1

    def test_wrong_results(self, toy_db):
        assert execution_accuracy(
            "SELECT COUNT(*) FROM products", "SELECT COUNT(*) FROM users", toy_db
        ) == 0

    def test_failing_prediction_scores_zero(self, toy_db):
        assert execution_accuracy("SELECT nope FROM users", "SELECT 1", toy_db) == 0

    def test_failing_reference_raises(self, toy_db):
        with pytest.raises(GoldExecutionError, match="reference query failed"):
            execution_accuracy("SELECT 1", "SELECT nope FROM users", toy_db)


def _selection(votes=5, method=SelectionMethod.REGULAR_VOTE, calls=0):
    return SelectionOutcome(
        chosen_index=0,
        chosen_sql="SELECT 1",
        distribution=(votes, 5 - votes) if votes < 5 else (5,),
        confidence=Confidence.HIGH if method is SelectionMethod.REGULAR_VOTE else Confidence.LOW,
        method=method,
        pairwise_calls=calls,
        chosen_votes=votes,
    )


def _record(
    qid="1",
    ex=1,
    gold_ok=True,
    candidate_ex=(1, 1, 1, 1, 1),
    selection=None,
    usage=(),
    error=None,
):
    return RunRecord(
        question_id=qid,
        db_id="toy_shop",
        question="q",
        gold_sql="SELECT 1",
        gold_ok=gold_ok,
        candidates=[],
        selection=selection if selection is not None else _selection(),
        candidate_ex=list(candidate_ex),
        ex=ex,
        usage=list(usage),
        error=error,
    )


class TestRunRecordSerialization:
    def _full_record(self):
        candidate = SqlCandidate(
            spec_index=0,
            sql="SELECT COUNT(*) FROM users",
            raw_response="```sql\nSELECT COUNT(*) FROM users\n```",
            usage=TokenUsage(100, 20),
            execution=ExecutionResult(
                status=ExecStatus.OK,
                signature="abc123",
                row_count=1,
                preview="1 row(s): (4,)",
                elapsed_ms=12.5,
            ),
        )
        return RunRecord(
            question_id="7",
            db_id="toy_shop",
            question="how many?",
            gold_sql="SELECT COUNT(*) FROM users",
            gold_ok=True,
            candidates=[candidate],
            selection=_selection(votes=3, method=SelectionMethod.PAIRWISE_LLM, calls=2),
            candidate_ex=[1],
            ex=1,
            usage=[UsageRow("gpt-4o", STAGE_LINKING, 3, 900, 60)],
            wall_ms=0.0,
        )

    def test_round_trip(self):
        record = self._full_record()
        clone = RunRecord.from_dict(json.loads(json.dumps(record.to_dict())))
        assert clone.question_id == record.question_id
        assert clone.candidates[0].sql == record.candidates[0].sql
        assert clone.candidates[0].usage == record.candidates[0].usage
        assert clone.candidates[0].execution.signature == "abc123"
        assert clone.selection == record.selection
        assert clone.usage == record.usage
        assert clone.candidate_ex == [1]

    def test_elapsed_ms_never_serialized(self):
        doc = self._full_record().to_dict()
        assert "elapsed_ms" not in json.dumps(doc)
        clone = RunRecord.from_dict(doc)
        assert clone.candidates[0].execution.elapsed_ms is None

    def test_call_and_token_tallies(self):
        record = self._full_record()
        record.usage.append(UsageRow("gemini-1.5-flash", STAGE_GENERATION, 5, 2000, 100))
        record.usage.append(UsageRow("embedding", "embedding", 4, 0, 0))
        assert record.llm_calls() == 8  # embedding stage excluded
        assert record.total_tokens() == 900 + 60 + 2000 + 100

    def test_write_read_round_trip(self, tmp_path):
        records = [self._full_record(), _record(qid="2", error="Boom: nope")]
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        loaded = read_records(path)
        assert len(loaded) == 2
        assert loaded[0].selection == records[0].selection
        assert loaded[1].error == "Boom: nope"

    def test_read_bad_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"question_id": "1"}\n', encoding="utf-8")
        with pytest.raises(DatasetError, match="bad.jsonl:1"):
            read_records(path)


class TestAggregateRecords:
    def _records(self):
        return [
            _record(
                qid="1", ex=1,
                usage=[UsageRow("gpt-4o", STAGE_LINKING, 3, 1_000_000, 0),
                       UsageRow("gemini-1.5-flash", STAGE_GENERATION, 5, 50_000, 500)],
            ),
            _record(
                qid="2", ex=0,
                selection=_selection(votes=2, method=SelectionMethod.PAIRWISE_LLM, calls=6),
                usage=[UsageRow("gemini-1.5-flash", STAGE_SELECTION, 6, 30_000, 6),
                       UsageRow("gpt-4o", STAGE_LINKING, 3, 1_000_000, 0)],
            ),
            _record(qid="3", gold_ok=False, ex=0, candidate_ex=[],
                    usage=[UsageRow("gpt-4o", STAGE_LINKING, 2, 0, 0)]),
            _record(qid="4", error="ValueError: boom", ex=0,
                    usage=[UsageRow("gpt-4o", STAGE_LINKING, 9, 10**9, 10**9)]),
        ]

    def test_counts_and_accuracy(self):
        report = aggregate_records(self._records())
        assert report.items == 4
        assert report.scored == 2
        assert report.gold_failures == 1
        assert report.failed == 1
        assert report.ex == 0.5
        assert report.escalated == 1

    def test_calls_and_tokens_cover_worked_items(self):
        report = aggregate_records(self._records())
        # per-record llm calls: 8, 9, 2 -> median 8, mean 19/3
        assert report.calls_typical == 8.0
        assert report.calls_avg == pytest.approx(19 / 3)
        expected_tokens = (1_050_500 + 1_030_006 + 0) / 3 / 1000.0
        assert report.tokens_k_avg == pytest.approx(expected_tokens)

    def test_cost_is_exact_and_excludes_errored_items(self):
        report = aggregate_records(self._records())
        # two full gpt-4o input megatokens at $2.50 plus flash at $0
        assert report.cost_usd_total == Decimal("5.00")
        assert report.cost_usd_avg == Decimal("5.00") / 3

    def test_empty(self):
        report = aggregate_records([])
        assert report.items == 0
        assert report.ex == 0.0
        assert report.cost_usd_total == Decimal(0)

    def test_render_text_table(self):
        text = aggregate_records(self._records()).render_text()
        assert "EX     | LLM Calls Typical(Avg.) | Tokens (K) | Cost ($)" in text
        assert "8(6.3)" in text
        assert "50.00" in text  # EX percentage
        assert "escalated to pairwise selection: 1" in text


class TestBoundsAnalysis:
    def test_grouping_and_bounds(self):
        records = [
            _record(qid="a", ex=1, candidate_ex=[1, 1]),
            _record(qid="b", ex=0, candidate_ex=[1, 0]),
            _record(qid="c", ex=0, candidate_ex=[0, 0, 0]),
            _record(qid="d", ex=1, candidate_ex=[1, 1], error="X: y"),
            _record(qid="e", ex=0, candidate_ex=[1, 1], gold_ok=False),
            _record(qid="f", ex=0, candidate_ex=[]),
        ]
        rows = bounds_analysis(records)
        assert [(r.candidate_count, r.items) for r in rows] == [(2, 2), (3, 1)]
        pair = rows[0]
        assert pair.ex == 0.5
        assert pair.lower == 0.5  # only "a" has every candidate correct
        assert pair.upper == 1.0  # both have at least one correct
        triple = rows[1]
        assert (triple.ex, triple.lower, triple.upper) == (0.0, 0.0, 0.0)


class TestExByVote:
    def test_vote_buckets(self):
        records = [
            _record(qid="a", ex=1, candidate_ex=[1, 1, 0, 0, 0],
                    selection=_selection(votes=2, method=SelectionMethod.PAIRWISE_LLM)),
            _record(qid="b", ex=0, candidate_ex=[0, 1, 0, 0, 0],
                    selection=_selection(votes=2, method=SelectionMethod.PAIRWISE_LLM)),
            _record(qid="c", ex=1, candidate_ex=[1, 1, 1, 1, 1],
                    selection=_selection(votes=5)),
            _record(qid="d", ex=1, candidate_ex=[1, 1, 1, 1, 1],
                    selection=_selection(votes=5), error="X: y"),
        ]
        rows = ex_by_vote(records)
        assert [(r.votes, r.items) for r in rows] == [(2, 2), (5, 1)]
        assert rows[0].ex == 0.5
        assert rows[0].upper == 1.0
        # unanimous bucket: realized accuracy equals the upper bound
        assert rows[1].ex == rows[1].upper == 1.0


class TestRankCombinations:
    def test_tiny_pool(self):
        per_item = [
            [("ok:x", True), ("ok:y", False)],
            [("ok:x", True), ("ok:x", True)],
        ]
        results = rank_combinations(per_item, n=2, labels=["a", "b"])
        assert [(r.pool_indices, r.ex) for r in results] == [
            ((0, 0), 1.0),
            ((0, 1), 1.0),  # tie inside an item resolves to the earlier position
            ((1, 1), 0.5),
        ]
        assert results[1].labels == ("a", "b")

    def test_error_entries_never_win(self):
        per_item = [[("error:Boom", False), ("ok:y", True)]]
        results = rank_combinations(per_item, n=1, labels=["bad", "good"])
        assert [(r.labels, r.ex) for r in results] == [
            (("good",), 1.0),
            (("bad",), 0.0),
        ]

    def test_ragged_rows_rejected(self):
        with pytest.raises(SweepError, match="ragged"):
            rank_combinations([[("ok:a", True)], []], n=1, labels=["a"])

    def test_no_items_rejected(self):
        with pytest.raises(SweepError, match="at least one scored item"):
            rank_combinations([], n=1, labels=["a"])

    def test_bad_n_rejected(self):
        with pytest.raises(SweepError, match="at least 1"):
            rank_combinations([[("ok:a", True)]], n=0, labels=["a"])

    def test_cap_enforced(self):
        row = [("ok:a", True), ("ok:b", False), ("ok:c", False)]
        with pytest.raises(SweepError, match="cap of 5"):
            rank_combinations([row], n=3, labels=["a", "b", "c"], cap=5)
        assert len(rank_combinations([row], n=3, labels=["a", "b", "c"], cap=10)) == 10


class TestPipelineRunner:
    @pytest.fixture()
    def items(self, toy_dataset):
        return load_dataset(toy_dataset)

    def test_unanimous_question(self, items):
        runner = PipelineRunner(PipelineConfig.default(), ScriptedBackend(ToyScript()))
        record = runner.run_item(items[0])
        assert record.gold_ok
        assert record.ex == 1
        assert record.candidate_ex == [1, 1, 1, 1, 1]
        assert record.llm_calls() == 8  # 3 linker + 5 generation
        assert record.selection.chosen_votes == 5
        assert record.selection.method is SelectionMethod.REGULAR_VOTE
        assert record.wall_ms > 0.0
        assert record.error is None

    def test_escalated_question(self, items):
        runner = PipelineRunner(PipelineConfig.default(), ScriptedBackend(ToyScript()))
        record = runner.run_item(items[3])
        assert record.selection.method is SelectionMethod.PAIRWISE_LLM
        assert record.selection.pairwise_calls == 6
        assert record.llm_calls() == 14
        assert record.ex == 1

    def test_timing_disabled(self, items):
        runner = PipelineRunner(
            PipelineConfig.default(), ScriptedBackend(ToyScript()), record_timing=False
        )
        assert runner.run_item(items[0]).wall_ms == 0.0

    def test_catalog_cached_per_database(self, items):
        runner = PipelineRunner(PipelineConfig.default(), ScriptedBackend(ToyScript()))
        first = runner.catalog_for(items[0].db_id, items[0].db_path)
        second = runner.catalog_for(items[1].db_id, items[1].db_path)
        assert first is second


class TestRunBenchmark:
    def test_parallel_run_streams_in_dataset_order(self, toy_dataset, tmp_path):
        items = load_dataset(toy_dataset)
        items.append(
            BenchmarkItem(
                question_id="11",
                db_id="toy_shop",
                question="Completely unscripted question?",
                gold_sql="SELECT 1",
                db_path=items[0].db_path,
            )
        )
        out_path = tmp_path / "records.jsonl"
        seen = []
        records, report = run_benchmark(
            PipelineConfig.default(),
            items,
            ScriptedBackend(ToyScript()),
            out_path=out_path,
            workers=2,
            record_timing=False,
            progress=seen.append,
        )
        assert [r.question_id for r in records] == [str(i) for i in range(1, 12)]
        assert [r.question_id for r in seen] == [r.question_id for r in records]

        failed = records[-1]
        assert failed.error is not None
        assert "AssertionError" in failed.error
        assert failed.selection is None

        streamed = read_records(out_path)
        assert [r.question_id for r in streamed] == [r.question_id for r in records]

        assert report.items == 11
        assert report.failed == 1
        assert report.scored == 10
        assert report.ex == EXPECTED_EX
        assert [r.llm_calls() for r in records[:10]] == EXPECTED_CALLS

    def test_serial_run_matches(self, toy_dataset):
        items = load_dataset(toy_dataset, limit=3)
        records, report = run_benchmark(
            PipelineConfig.default(),
            items,
            ScriptedBackend(ToyScript()),
            workers=1,
            record_timing=False,
        )
        assert report.items == 3
        assert report.failed == 0
        assert [r.ex for r in records] == [q["ex"] for q in TOY_BENCH[:3]]


def _sweep_script():
    gold_by_question = {q["question"]: q["gold"] for q in TOY_BENCH}
    generation_system = load_generation_system_prompt()
    question_re = re.compile(r"Question: (.*)")

    def script(request):
        assert request.messages[0]["content"] == generation_system
        question = question_re.search(request.messages[-1]["content"]).group(1)
        return sql_block(gold_by_question[question])

    return script


class TestSweep:
    def test_all_correct_pool(self, toy_dataset):
        items = load_dataset(toy_dataset, limit=3)
        results = sweep(
            PipelineConfig.default(),
            items,
            ScriptedBackend(_sweep_script()),
            formats=[RepresentationFormat.COMPACT_TAGGED, RepresentationFormat.DDL],
            levels=[FilterLevel.NO_FILTERING],
            n=2,
        )
        assert len(results) == 3  # multisets of size 2 from a pool of 2
        assert {r.ex for r in results} == {1.0}
        assert results[0].labels[0] in (
            "compact_tagged+no_filtering", "ddl+no_filtering"
        )

    def test_reference_failures_skipped(self, toy_dataset, caplog):
        items = load_dataset(toy_dataset, limit=1)
        broken = BenchmarkItem(
            question_id="x",
            db_id="toy_shop",
            question=items[0].question,
            gold_sql="SELECT nope FROM users",
            db_path=items[0].db_path,
        )
        with caplog.at_level("WARNING"):
            results = sweep(
                PipelineConfig.default(),
                [items[0], broken],
                ScriptedBackend(_sweep_script()),
                formats=[RepresentationFormat.COMPACT_TAGGED],
                levels=[FilterLevel.NO_FILTERING],
                n=1,
            )
        assert "skipped 1 items" in caplog.text
        assert results[0].ex == 1.0

    def test_subset_is_deterministic(self, toy_dataset):
        items = load_dataset(toy_dataset)
        kwargs = dict(
            formats=[RepresentationFormat.COMPACT_TAGGED],
            levels=[FilterLevel.NO_FILTERING],
            n=1,
            subset_fraction=0.3,
            seed=7,
        )
        first = sweep(PipelineConfig.default(), items,
                      ScriptedBackend(_sweep_script()), **kwargs)
        second = sweep(PipelineConfig.default(), items,
                       ScriptedBackend(_sweep_script()), **kwargs)
        assert first == second

    def test_bad_subset_fraction(self, toy_dataset):
        items = load_dataset(toy_dataset, limit=1)
        with pytest.raises(SweepError, match="subset fraction"):
            sweep(
                PipelineConfig.default(),
                items,
                ScriptedBackend(_sweep_script()),
                formats=[RepresentationFormat.COMPACT_TAGGED],
                levels=[FilterLevel.NO_FILTERING],
                n=1,
                subset_fraction=1.5,
            )

    def test_empty_pool_rejected(self, toy_dataset):
        items = load_dataset(toy_dataset, limit=1)
        with pytest.raises(SweepError, match="at least one format"):
            sweep(
                PipelineConfig.default(),
                items,
                ScriptedBackend(_sweep_script()),
                formats=[],
                levels=[FilterLevel.NO_FILTERING],
                n=1,
            )


class TestBuildFewshotStore:
    def test_store_from_items(self, toy_dataset):
        items = load_dataset(toy_dataset, limit=3)
        store = build_fewshot_store(items, HashEmbeddingBackend())
        assert len(store) == 3
        assert store.embeddings.shape == (3, 64)
        assert store.examples[0].question == TOY_BENCH[0]["question"]
        assert store.examples[0].sql == TOY_BENCH[0]["gold"]
        assert "[DB_ID]  toy_shop" in store.examples[0].schema_text
