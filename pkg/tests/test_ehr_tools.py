from __future__ import annotations

import csv
import math
import re

import pytest

from ehrseek.core import DomainError
from ehrseek.ehr_tools import (
    SqlEngine,
    format_sql_result,
    format_table,
    get_candidates_by_keyword,
    get_candidates_by_semantic_similarity,
    get_column_names,
    get_latest_records,
    get_records_by_time,
    get_table_description,
    get_table_names,
    run_sql_query,
    trigram_cosine,
)
from ehrseek.store import (
    DICTIONARY_TABLE,
    ColumnSpec,
    EhrSnapshot,
    TableManifest,
    TableSpec,
    read_manifest,
)

TIMESTAMP_RE = re.compile(r"\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}")


def _raw_rows(store_dir, table):
    with open(store_dir / f"{table}.csv", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


class TestSchemaTools:
    def test_table_names_match_manifest(self, snapshot, store_dir):
        names = get_table_names(snapshot)
        manifest = read_manifest(store_dir)
        expected_events = sorted(t.name for t in manifest.event_tables())
        expected_dicts = sorted(t.name for t in manifest.dictionary_tables())
        assert [n for n, k in names if k == "event_table"] == expected_events
        assert [n for n, k in names if k == "dictionary_table"] == expected_dicts
        assert len(expected_events) == 6 and len(expected_dicts) == 2

    def test_table_names_pure(self, snapshot):
        assert get_table_names(snapshot) == get_table_names(snapshot)

    def test_description_row_count(self, snapshot):
        desc = get_table_description(snapshot, "labevents")
        assert desc["visible_rows"] == len(snapshot.rows("labevents"))
        assert desc["description"]
        assert [c["name"] for c in desc["columns"]][0] == "labevent_id"

    def test_description_unknown_table(self, snapshot):
        with pytest.raises(DomainError) as err:
            get_table_description(snapshot, "nope")
        assert err.value.code == "unknown_table"

    def test_description_empty_table(self, store_dir, patient_ids):
        from ehrseek.store import load_snapshot

        snap = load_snapshot(store_dir, patient_ids[0], "2100-01-01 00:00:00")
        assert get_table_description(snap, "labevents")["visible_rows"] == 0

    def test_column_names_in_manifest_order(self, snapshot, store_dir):
        manifest = read_manifest(store_dir)
        spec = manifest.get("prescriptions")
        cols = get_column_names(snapshot, "prescriptions")
        assert [c["name"] for c in cols] == spec.column_names()

    def test_column_names_unknown_table(self, snapshot):
        with pytest.raises(DomainError):
            get_column_names(snapshot, "missing")


class TestRecordsByTime:
    def test_full_range_matches_linear_scan(self, snapshot):
        result = get_records_by_time(
            snapshot, "labevents", "2100-01-01 00:00:00", "2199-01-01 00:00:00", limit=10_000
        )
        time_idx = snapshot.manifest.get("labevents").column_index("charttime")
        expected = sorted(snapshot.rows("labevents"), key=lambda r: r[time_idx])
        assert list(result.rows) == expected
        assert result.row_count_total == len(expected)

    def test_point_range_hits_one_event(self, snapshot):
        time_idx = snapshot.manifest.get("labevents").column_index("charttime")
        stamps = sorted(row[time_idx] for row in snapshot.rows("labevents"))
        # pick a timestamp that occurs exactly once
        singles = [s for s in stamps if stamps.count(s) == 1]
        target = singles[0]
        result = get_records_by_time(snapshot, "labevents", target, target)
        assert result.row_count_total == 1
        assert result.rows[0][time_idx] == target

    def test_end_clamped_to_cutoff(self, store_dir, patient_ids):
        from ehrseek.store import load_snapshot

        rows = _raw_rows(store_dir, "labevents")
        stamps = sorted(r["charttime"] for r in rows if r["subject_id"] == patient_ids[0])
        cutoff = stamps[len(stamps) // 2]
        snap = load_snapshot(store_dir, patient_ids[0], cutoff)
        wide = get_records_by_time(snap, "labevents", "2100-01-01 00:00:00", "2199-01-01 00:00:00")
        clamped = get_records_by_time(snap, "labevents", "2100-01-01 00:00:00", cutoff)
        assert wide == clamped

    def test_invalid_range(self, snapshot):
        with pytest.raises(DomainError) as err:
            get_records_by_time(snapshot, "labevents", "2131-01-01 00:00:00", "2130-01-01 00:00:00")
        assert err.value.code == "invalid_range"

    def test_not_event_table(self, snapshot):
        with pytest.raises(DomainError) as err:
            get_records_by_time(snapshot, "d_labitems", "2130-01-01 00:00:00", "2131-01-01 00:00:00")
        assert err.value.code == "not_event_table"

    def test_cap_and_flag(self, snapshot):
        result = get_records_by_time(
            snapshot, "labevents", "2100-01-01 00:00:00", "2199-01-01 00:00:00", limit=3
        )
        assert len(result.rows) == 3
        assert result.capped is (result.row_count_total > 3)
        assert result.row_count_total == len(snapshot.rows("labevents"))


class TestLatestRecords:
    def test_max_scan_oracle(self, snapshot):
        time_idx = snapshot.manifest.get("prescriptions").column_index("starttime")
        latest = max(row[time_idx] for row in snapshot.rows("prescriptions"))
        expected = [row for row in snapshot.rows("prescriptions") if row[time_idx] == latest]
        result = get_latest_records(snapshot, "prescriptions")
        assert list(result.rows) == expected

    def test_ties_all_returned(self, store_dir, patient_ids):
        # Force a tie by duplicating the max-time row in a copy of the store.
        import shutil

        from ehrseek.store import load_snapshot

        copy = store_dir.parent / "tie_store"
        if not copy.exists():
            shutil.copytree(store_dir, copy)
            path = copy / "microbiologyevents.csv"
            lines = path.read_text().splitlines()
            header = lines[0].split(",")
            t_idx = header.index("charttime")
            s_idx = header.index("subject_id")
            mine = [l for l in lines[1:] if l.split(",")[s_idx] == patient_ids[0]]
            top = max(mine, key=lambda l: l.split(",")[t_idx])
            dup = top.split(",")
            dup[0] = "999999"  # fresh microevent_id
            lines.append(",".join(dup))
            path.write_text("\n".join(lines) + "\n")
        snap = load_snapshot(copy, patient_ids[0], "2141-01-01 00:00:00")
        result = get_latest_records(snap, "microbiologyevents")
        assert result.row_count_total == 2

    def test_empty_table(self, store_dir, patient_ids):
        from ehrseek.store import load_snapshot

        snap = load_snapshot(store_dir, patient_ids[0], "2100-01-01 00:00:00")
        result = get_latest_records(snap, "labevents")
        assert result.rows == () and result.row_count_total == 0

    def test_single_row(self, tmp_path):
        from ehrseek.fixtures import fixture_generate
        from ehrseek.store import load_snapshot

        store = fixture_generate(tmp_path / "s", seed=5, n_patients=1, n_events_per_patient=1)
        snap = load_snapshot(store, "10000000", "2141-01-01 00:00:00")
        result = get_latest_records(snap, "labevents")
        assert result.row_count_total == 1


class TestSqlSandbox:
    def test_count_matches_linear_scan(self, snapshot):
        result = run_sql_query(snapshot, "SELECT COUNT(*) FROM labevents")
        assert result.rows[0][0] == len(snapshot.rows("labevents"))

    def test_max_charttime_not_after_cutoff(self, snapshot):
        result = run_sql_query(snapshot, "SELECT MAX(charttime) FROM labevents")
        assert result.rows[0][0] <= snapshot.cutoff

    @pytest.mark.parametrize(
        "sql",
        [
            "DROP TABLE labevents",
            "DELETE FROM labevents",
            "INSERT INTO labevents VALUES (1)",
            "UPDATE labevents SET itemid = 0",
            "CREATE TABLE x (a INT)",
            "ALTER TABLE labevents ADD COLUMN x",
            "ATTACH DATABASE ':memory:' AS other",
            "PRAGMA table_info(labevents)",
            "SELECT 1; SELECT 2",
            "EXPLAIN SELECT 1",
            "VACUUM",
        ],
    )
    def test_forbidden_statements(self, snapshot, sql):
        with pytest.raises(DomainError) as err:
            run_sql_query(snapshot, sql)
        assert err.value.code == "forbidden_statement"

    def test_cte_select_allowed(self, snapshot):
        result = run_sql_query(
            snapshot,
            "WITH labs AS (SELECT charttime FROM labevents) SELECT COUNT(*) FROM labs",
        )
        assert result.rows[0][0] == len(snapshot.rows("labevents"))

    def test_leading_comment_allowed(self, snapshot):
        result = run_sql_query(snapshot, "-- count\nSELECT COUNT(*) FROM labevents")
        assert result.row_count_total == 1

    def test_sql_error_passthrough(self, snapshot):
        with pytest.raises(DomainError) as err:
            run_sql_query(snapshot, "SELECT nope FROM labevents")
        assert err.value.code == "sql_error"
        assert "nope" in err.value.message

    def test_timeout(self, snapshot):
        heavy = (
            "WITH RECURSIVE cnt(x) AS (SELECT 1 UNION ALL SELECT x+1 FROM cnt LIMIT 100000000) "
            "SELECT COUNT(*) FROM cnt"
        )
        with pytest.raises(DomainError) as err:
            run_sql_query(snapshot, heavy, timeout_s=0.05)
        assert err.value.code == "timeout"

    def test_row_cap(self, snapshot):
        result = run_sql_query(snapshot, "SELECT * FROM labevents", row_cap=2)
        assert len(result.rows) == 2
        assert result.capped and result.row_count_total == len(snapshot.rows("labevents"))

    def test_engine_reuse(self, snapshot):
        engine = SqlEngine(snapshot)
        try:
            a = engine.query("SELECT COUNT(*) FROM prescriptions")
            b = engine.query("SELECT COUNT(*) FROM prescriptions")
            assert a == b
        finally:
            engine.close()

    def test_write_attempt_leaves_data_intact(self, snapshot):
        engine = SqlEngine(snapshot)
        try:
            before = engine.query("SELECT COUNT(*) FROM labevents")
            with pytest.raises(DomainError):
                engine.query("DELETE FROM labevents")
            after = engine.query("SELECT COUNT(*) FROM labevents")
            assert before == after
        finally:
            engine.close()


def _dictionary_snapshot(entries: list[tuple[str, str]]) -> EhrSnapshot:
    manifest = TableManifest(
        tables=(
            TableSpec(
                name="d_terms",
                kind=DICTIONARY_TABLE,
                description="terms",
                columns=(
                    ColumnSpec(name="code", type="text"),
                    ColumnSpec(name="title", type="text"),
                ),
            ),
        )
    )
    return EhrSnapshot(
        patient_id="p",
        cutoff="2130-01-01 00:00:00",
        tables={"d_terms": tuple(entries)},
        manifest=manifest,
    )


def _oracle_trigram_cosine(query: str, title: str) -> float:
    """Independent brute-force 3-gram cosine (loop construction)."""

    def grams(s: str) -> dict[str, int]:
        s = s.lower()
        if not s:
            return {}
        if len(s) < 3:
            return {s: 1}
        out: dict[str, int] = {}
        for i in range(len(s) - 2):
            g = s[i : i + 3]
            out[g] = out.get(g, 0) + 1
        return out

    a, b = grams(query), grams(title)
    dot = 0
    for g, c in a.items():
        if g in b:
            dot += c * b[g]
    if not a or not b or dot == 0:
        return 0.0
    na = math.sqrt(sum(c * c for c in a.values()))
    nb = math.sqrt(sum(c * c for c in b.values()))
    return dot / (na * nb)


class TestSimilarity:
    ENTRIES = [
        ("I214", "Non-ST elevation myocardial infarction"),
        ("J189", "Pneumonia, unspecified organism"),
        ("I2510", "Atherosclerotic heart disease"),
    ]

    def test_ranking_matches_brute_force_oracle(self):
        snap = _dictionary_snapshot(self.ENTRIES)
        query = "myocardial infarct"
        oracle = sorted(
            ((-_oracle_trigram_cosine(query, title), code) for code, title in self.ENTRIES),
        )
        expected_order = [code for _, code in oracle]
        got = get_candidates_by_semantic_similarity(snap, query, "d_terms", top_k=3)
        assert [e.code for e in got] == expected_order
        assert got[0].code == "I214"
        for entry in got:
            title = dict(self.ENTRIES)[entry.code]
            assert entry.score == pytest.approx(_oracle_trigram_cosine(query, title), abs=1e-6)

    def test_exact_title_scores_one(self):
        snap = _dictionary_snapshot(self.ENTRIES)
        got = get_candidates_by_semantic_similarity(
            snap, "Pneumonia, unspecified organism", "d_terms", top_k=1
        )
        assert got[0].code == "J189" and got[0].score == pytest.approx(1.0)

    def test_empty_query(self):
        snap = _dictionary_snapshot(self.ENTRIES)
        with pytest.raises(DomainError) as err:
            get_candidates_by_semantic_similarity(snap, "  ", "d_terms")
        assert err.value.code == "empty_query"

    def test_not_dictionary_table(self, snapshot):
        with pytest.raises(DomainError) as err:
            get_candidates_by_semantic_similarity(snapshot, "x", "labevents")
        assert err.value.code == "not_dictionary_table"

    def test_scores_bounded(self, snapshot):
        got = get_candidates_by_semantic_similarity(snapshot, "sepsis", "d_icd_diagnoses", top_k=50)
        assert all(0.0 <= e.score <= 1.0 for e in got)

    def test_ties_break_by_code(self):
        snap = _dictionary_snapshot([("B2", "zzz"), ("A1", "zzz")])
        got = get_candidates_by_semantic_similarity(snap, "zzz", "d_terms", top_k=2)
        assert [e.code for e in got] == ["A1", "B2"]


class TestKeyword:
    def test_substring_scan_oracle(self, snapshot):
        rows = snapshot.rows("d_icd_diagnoses")
        expected = sorted(str(r[0]) for r in rows if "sepsis" in str(r[2]).lower())
        got = get_candidates_by_keyword(snapshot, "sepsis", "d_icd_diagnoses", top_k=50)
        assert [e.code for e in got] == expected
        assert len(got) == 2

    def test_no_match_is_ok_empty(self, snapshot):
        assert get_candidates_by_keyword(snapshot, "zebra", "d_icd_diagnoses") == []

    def test_empty_keyword(self, snapshot):
        with pytest.raises(DomainError) as err:
            get_candidates_by_keyword(snapshot, "", "d_icd_diagnoses")
        assert err.value.code == "empty_query"

    def test_top_k_caps_respected(self, snapshot):
        few = get_candidates_by_semantic_similarity(snapshot, "sepsis", "d_icd_diagnoses", top_k=3)
        assert len(few) == 3
        clamped = get_candidates_by_semantic_similarity(
            snapshot, "sepsis", "d_icd_diagnoses", top_k=500
        )
        assert len(clamped) <= 50
        assert len(get_candidates_by_keyword(snapshot, "a", "d_icd_diagnoses", top_k=4)) <= 4

    def test_keyword_exact_title_is_similarity_top1(self, snapshot):
        """Any entry keyword-matched by its own full title is also the
        similarity top-1 for that title."""
        rows = snapshot.rows("d_icd_diagnoses")
        for row in list(rows)[:5]:
            title = str(row[2])
            by_kw = get_candidates_by_keyword(snapshot, title, "d_icd_diagnoses")
            assert any(e.code == str(row[0]) for e in by_kw)
            top = get_candidates_by_semantic_similarity(snapshot, title, "d_icd_diagnoses", top_k=1)
            assert top[0].title == title


class TestFormatting:
    def test_aligned_table(self):
        text = format_table(("a", "bb"), [(1, "x"), (22, "yy")])
        lines = text.splitlines()
        assert lines[0].rstrip() == "a  | bb"
        assert lines[2].startswith("1 ")

    def test_sql_result_footer(self, snapshot):
        result = run_sql_query(snapshot, "SELECT * FROM labevents", row_cap=2)
        rendered = format_sql_result(result)
        assert "capped" in rendered

    def test_no_rows_render(self, snapshot):
        result = run_sql_query(snapshot, "SELECT * FROM labevents WHERE 1=0")
        assert format_sql_result(result).startswith("No rows.")


class TestLeakageSmoke:
    def test_no_tool_output_contains_post_cutoff_timestamp(self, store_dir, patient_ids):
        from ehrseek.store import load_snapshot

        rows = _raw_rows(store_dir, "labevents")
        stamps = sorted(r["charttime"] for r in rows if r["subject_id"] == patient_ids[1])
        cutoff = stamps[len(stamps) // 2]
        snap = load_snapshot(store_dir, patient_ids[1], cutoff)

        outputs = [
            format_sql_result(run_sql_query(snap, "SELECT * FROM admissions")),
            format_sql_result(run_sql_query(snap, "SELECT * FROM transfers")),
            format_sql_result(run_sql_query(snap, "SELECT MAX(charttime) FROM labevents")),
            format_sql_result(
                get_records_by_time(snap, "prescriptions", "2100-01-01 00:00:00", "2199-01-01 00:00:00")
            ),
            format_sql_result(get_latest_records(snap, "microbiologyevents")),
        ]
        for text in outputs:
            for stamp in TIMESTAMP_RE.findall(text):
                assert stamp <= cutoff
