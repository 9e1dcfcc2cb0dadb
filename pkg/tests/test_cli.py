import json
from pathlib import Path

import pytest

from atlasground import __version__
from atlasground.atlas import load_atlas
from atlasground.cli import main
from atlasground.corpus import load_corpus
from atlasground.experiments import build_atlas, load_plan
from atlasground.reportio import read_table, table_differences

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke_plan.json"
GOLDEN = Path(__file__).resolve().parent / "golden" / "smoke"


@pytest.fixture(autouse=True)
def pinned_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")


def files(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([args[0], "--config", str(SMOKE), "--out", str(out), *args[1:]])
    return code, out


@pytest.mark.parametrize(
    "command,expected",
    [
        ("generate-atlas", {"atlas/meta.json", "atlas/labels.raw"}),
        ("generate-corpus", {"corpus.jsonl", "train.jsonl", "val.jsonl", "test.jsonl"}),
        ("train", {"run/config.json", "run/history.tsv", "run/model.ckpt", "run/optimizer.ckpt"}),
        ("evaluate", {"general/table.tsv", "summary.md"}),
        ("ablate", {"ablation/table.tsv", "summary.md"}),
        ("retrieve", {"retrieval/table.tsv", "summary.md"}),
    ],
)
def test_subcommands_are_deterministic(tmp_path, command, expected):
    code_a, a = run(tmp_path, "a", command)
    code_b, b = run(tmp_path, "b", command)
    assert code_a == code_b == 0
    fa, fb = files(a), files(b)
    assert expected | {"config.json", "manifest.json"} <= set(fa)
    assert fa == fb
    config = json.loads(fa["config.json"])
    assert config["command"] == command and "resolved_train_config" in config


def test_generate_atlas_with_seed_twice(tmp_path):
    trees = []
    for rep in ("a", "b"):
        out = tmp_path / rep
        assert main(["generate-atlas", "--config", str(ROOT / "configs" / "benchmark_atlas.json"), "--out", str(out), "--seed", "7"]) == 0
        trees.append(files(out))
    assert trees[0] == trees[1]


def test_run_plan_layout(tmp_path):
    code, out = run(tmp_path, "layout", "run-plan")
    assert code == 0
    expected = {"config.json", "manifest.json", "summary.md"}
    for name in ("general", "merged", "heldout", "selfsupervised", "retrieval", "ablation"):
        expected |= {f"{name}/table.tsv", f"{name}/summary.md"}
    assert set(files(out)) == expected


def test_generated_inputs_load_back(tmp_path):
    assert run(tmp_path, "atlas", "generate-atlas")[0] == 0
    assert run(tmp_path, "corpus", "generate-corpus")[0] == 0
    atlas = load_atlas(tmp_path / "atlas" / "atlas")
    assert atlas == build_atlas(load_plan(SMOKE))
    docs = load_corpus(tmp_path / "corpus" / "corpus.jsonl", atlas)
    parts = [load_corpus(tmp_path / "corpus" / f"{s}.jsonl") for s in ("train", "val", "test")]
    assert sorted(d.id for p in parts for d in p) == sorted(d.id for d in docs)


def test_plan_from_generated_files_matches_spec_plan(tmp_path):
    run(tmp_path, "atlas", "generate-atlas")
    run(tmp_path, "corpus", "generate-corpus")
    plan = json.loads(SMOKE.read_text())
    plan.update({"atlas": {"path": str(tmp_path / "atlas" / "atlas")}, "corpus": {"path": str(tmp_path / "corpus" / "corpus.jsonl")}, "experiments": ["general"]})
    (tmp_path / "files.json").write_text(json.dumps(plan))
    assert main(["run-plan", "--config", str(tmp_path / "files.json"), "--out", str(tmp_path / "f")]) == 0
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"config", "atlas", "corpus"}
    golden = read_table(GOLDEN / "general.tsv")
    assert table_differences(read_table(tmp_path / "f" / "general" / "table.tsv"), golden) == []


def test_run_plan_matches_golden_tables(tmp_path):
    code, out = run(tmp_path, "plan", "run-plan")
    assert code == 0
    for golden in sorted(GOLDEN.glob("*.tsv")):
        produced = read_table(out / golden.stem / "table.tsv")
        assert table_differences(produced, read_table(golden), tol=1e-9) == [], golden.stem
    code, again = run(tmp_path, "again", "run-plan")
    assert files(out) == files(again)


def test_seed_flag_overrides_plan(tmp_path):
    code, out = run(tmp_path, "s", "evaluate", "--seed", "11")
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 11
    assert table_differences(read_table(out / "general" / "table.tsv"), read_table(GOLDEN / "general.tsv")) != []


def test_usage_errors_write_nothing(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["evaluate", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) == 1
    assert not out.exists()
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["evaluate", "--config", str(tmp_path / "bad.json"), "--out", str(out)]) == 1
    (tmp_path / "unknown.json").write_text('{"name": "x", "colour": 1}')
    assert main(["evaluate", "--config", str(tmp_path / "unknown.json"), "--out", str(out)]) == 1
    assert main(["train", "--config", str(SMOKE), "--out", str(out), "--method", "Center"]) == 1
    assert main(["frobnicate", "--out", str(out)]) == 1
    assert main([]) == 1
    (tmp_path / "file").write_text("")
    assert main(["evaluate", "--config", str(SMOKE), "--out", str(tmp_path / "file")]) == 1
    assert not out.exists()
    assert "config file not found" in capsys.readouterr().err


def test_missing_input_path_is_a_usage_error(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps({"name": "x", "atlas": {"path": "nowhere"}}))
    assert main(["evaluate", "--config", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_runtime_failure_exits_2(tmp_path):
    plan = json.loads(SMOKE.read_text())
    plan["merged_pair"] = ["lung", "spleen"]
    plan["experiments"] = ["merged"]
    (tmp_path / "p.json").write_text(json.dumps(plan))
    assert main(["run-plan", "--config", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 2


def test_version_and_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out
    with pytest.raises(SystemExit) as exc:
        main(["run-plan", "--help"])
    assert exc.value.code == 0 and "--config" in capsys.readouterr().out


def test_log_level_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ATLASGROUND_LOG_LEVEL", "LOUD")
    assert main(["generate-atlas", "--config", str(SMOKE), "--out", str(tmp_path / "o")]) == 1
    monkeypatch.setenv("ATLASGROUND_LOG_LEVEL", "debug")
    assert main(["generate-atlas", "--config", str(SMOKE), "--out", str(tmp_path / "o"), "-q"]) == 0
