import csv
import json

import pytest

from citilab.cli import RunConfig, config_from_mapping, load_config, main
from citilab.errors import ContractError
from citilab.harness import TABLE_ROWS

from pipeline import run_pipeline, write_config


def test_empty_config_takes_defaults():
    cfg = config_from_mapping({})
    assert cfg.canonical() == RunConfig().canonical() | {"seed": 0}
    assert cfg.train.molora_fraction == 0.2 and cfg.train.n_experts == 4 and cfg.train.rank == 8


def test_invalid_values_are_rejected_by_name():
    with pytest.raises(ContractError, match="molora_fraction"):
        config_from_mapping({"molora_fraction": 1.5})
    with pytest.raises(ContractError, match="wingspan"):
        config_from_mapping({"wingspan": 3})
    with pytest.raises(ContractError, match="alt_task"):
        config_from_mapping({"alt_task": "TOOLCALL"})


def test_config_hash_is_stable_and_seed_sensitive(tmp_path):
    a = load_config(write_config(tmp_path / "a.json"))
    b = load_config(write_config(tmp_path / "b.json"))
    assert a.hash() == b.hash()
    assert load_config(tmp_path / "a.json", seed=3).hash() != a.hash()
    with pytest.raises(ContractError):
        load_config(tmp_path / "missing.json")


def test_unknown_command_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_eval_without_checkpoint_fails_with_json_error(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ContractError" and "pretrain" in err["message"]


def test_bad_config_file_fails_cleanly(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return run_pipeline(base / "out", write_config(base / "tiny.json"))


def test_pipeline_writes_comparison_table(tiny_run):
    rows = list(csv.DictReader(open(tiny_run / "reports" / "citi_vs_baselines" / "citi_vs_baselines.csv")))
    assert [r[next(iter(r))] for r in rows] == list(TABLE_ROWS)
    for r in rows:
        assert 0 <= float(r["C (parse-match)"]) <= 1


def test_manifest_links_every_command_to_its_artifacts(tiny_run):
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert manifest["config_hash"] == tiny_run.name
    for command, entry in manifest["runs"].items():
        for rel in entry["artifacts"]:
            assert (tiny_run / rel).exists(), (command, rel)
