import json

import pytest

from atlasground.metrics import MetricEntry
from atlasground.reportio import (
    ReportFormatError,
    RunManifest,
    Table,
    TableRow,
    config_digest,
    digest_path,
    read_table,
    table_differences,
    table_markdown,
    timestamp,
    write_summary,
    write_table,
)


def sample_table():
    t = Table("general")
    t.rows.append(TableRow("SOD", meta={"config_hash": "abc"}).add(MetricEntry("IOR", 0.1 + 0.2, 1 / 3, 30)))
    t.rows[-1].add(MetricEntry("NVD-O", None, None, 0))
    t.rows.append(TableRow("Center").add(MetricEntry("IOR", 0.0, 0.0, 30)))
    return t


def test_round_trip_is_exact(tmp_path):
    t = sample_table()
    back = read_table(write_table(t, tmp_path / "t.tsv"))
    assert back == t
    assert back.row("SOD")["IOR"].mean == 0.1 + 0.2
    assert not back.row("SOD")["NVD-O"].defined
    assert "null\tnull\t0" in (tmp_path / "t.tsv").read_text()


def test_differences_respect_tolerance():
    a, b = sample_table(), sample_table()
    assert table_differences(a, b) == []
    b.rows[0].entries["IOR"] = MetricEntry("IOR", a.rows[0]["IOR"].mean + 5e-10, 1 / 3, 30)
    assert table_differences(a, b) == []
    b.rows[0].entries["IOR"] = MetricEntry("IOR", a.rows[0]["IOR"].mean + 2e-9, 1 / 3, 30)
    assert len(table_differences(a, b)) == 1
    b.rows[1].label = "Random"
    assert "rows" in table_differences(a, b)[0]


def test_null_against_number_is_a_difference():
    a, b = sample_table(), sample_table()
    b.rows[0].entries["NVD-O"] = MetricEntry("NVD-O", 1.0, 0.0, 1)
    assert len(table_differences(a, b)) == 3  # count, mean and se


def test_malformed_files(tmp_path):
    (tmp_path / "a").write_text("hello\n")
    with pytest.raises(ReportFormatError):
        read_table(tmp_path / "a")
    text = (write_table(sample_table(), tmp_path / "b")).read_text()
    (tmp_path / "c").write_text(text + "X\tIOR\t1\n")
    with pytest.raises(ReportFormatError, match=":7:"):
        read_table(tmp_path / "c")


def test_markdown_uses_percent_for_rates(tmp_path):
    md = table_markdown(sample_table())
    assert "| SOD | 30.0 ± 33.3 | n/a |" in md
    write_summary([sample_table()], tmp_path / "s.md", title="T")
    assert (tmp_path / "s.md").read_text().startswith("# T\n")


def test_digest_changes_with_content(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x").write_text("1")
    first = digest_path(tmp_path / "d")
    (tmp_path / "d" / "x").write_text("2")
    assert digest_path(tmp_path / "d") != first
    (tmp_path / "d" / "x").write_text("1")
    assert digest_path(tmp_path / "d") == first


def test_manifest_pinned_by_source_date_epoch(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert timestamp() == "1970-01-01T00:00:00Z"
    (tmp_path / "cfg").write_text("{}")
    for name in ("m1", "m2"):
        RunManifest.start("h", 3, {"config": tmp_path / "cfg"}).write(tmp_path / name)
    assert (tmp_path / "m1").read_bytes() == (tmp_path / "m2").read_bytes()
    m = json.loads((tmp_path / "m1").read_text())
    assert m["seed"] == 3 and m["inputs"]["config"] == digest_path(tmp_path / "cfg")


def test_config_digest_ignores_key_order():
    assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})
    assert len(config_digest({})) == 16
