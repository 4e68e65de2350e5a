import json
import subprocess
import sys

import pytest

from bifair.cli import apply_override, run

TINY = {
    "synth": {"num_users": 40, "num_items": 30, "num_genres": 2, "d_sem": 6,
              "group_noise_scale": [0.05, 0.5], "min_interactions": 24,
              "max_interactions": 32},
    "train": {"grouping": "genre", "fairness": "bifair", "d_rec": 8,
              "inner_lr": 0.1, "outer_lr": 0.01, "tau": 0.1,
              "batch_size": 128, "num_negatives": 8,
              "max_epochs": 2, "patience": 2},
    "compare": {"methods": ["plain", "reweight", "groupdro", "bifair"],
                "seeds": [0]},
}


def write_cfg(tmp_path, name="cfg.json", **extra):
    cfg = json.loads(json.dumps(TINY))
    cfg["out_dir"] = str(tmp_path / "run")
    for key, value in extra.items():
        cfg.setdefault(key, {}).update(value) if isinstance(value, dict) \
            else cfg.__setitem__(key, value)
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


class TestConfigHandling:
    def test_overrides_parse_json_values(self):
        cfg = {"train": {"inner_lr": 0.1}}
        apply_override(cfg, "train.inner_lr=0.5")
        apply_override(cfg, "train.fairness=plain")
        apply_override(cfg, "compare.seeds=[1,2]")
        assert cfg["train"]["inner_lr"] == 0.5
        assert cfg["train"]["fairness"] == "plain"
        assert cfg["compare"]["seeds"] == [1, 2]

    def test_missing_config_file(self, tmp_path):
        assert run("train", str(tmp_path / "none.json")) == 2

    def test_invalid_lr_exits_2_with_message(self, tmp_path, capsys):
        p = write_cfg(tmp_path)
        code = run("train", str(p), overrides=["train.inner_lr=-1"])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert code == 2
        assert "inner_lr must be > 0" in err["error"]

    def test_unknown_command(self, capsys):
        assert run("frobnicate") == 2

    def test_unknown_train_key_rejected(self, tmp_path, capsys):
        p = write_cfg(tmp_path)
        code = run("train", str(p), overrides=["train.bogus_option=3"])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert code == 2
        assert "bogus_option" in err["error"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> prep -> train -> eval once for the whole module."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = write_cfg(tmp_path)
    for command in ("synth", "prep", "train", "eval"):
        assert run(command, str(cfg_path)) == 0, command
    return tmp_path / "run", cfg_path


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        out, _ = pipeline
        for rel in ("raw/interactions.csv", "raw/item_meta.csv", "embeddings.bin",
                    "dataset/meta.json", "dataset/split_train.csv",
                    "checkpoint/model.json", "checkpoint/model.bin",
                    "checkpoint/z.bin", "checkpoint/history.jsonl",
                    "checkpoint/config.echo.json",
                    "report/report.json", "report/report.csv"):
            assert (out / rel).exists(), rel

    def test_report_schema(self, pipeline):
        out, _ = pipeline
        report = json.loads((out / "report/report.json").read_text())
        assert set(report["overall"]) == {"recall", "ndcg", "hr"}
        for entry in report["groupings"].values():
            assert "cv" in entry and "min_bottom" in entry and "epsilon_if" in entry
            assert len(entry["utilities"]) == len(entry["labels"])
        assert "runtime_seconds" in report
        assert report["split"] == "test" and report["k"] == 20

    def test_config_echo_contains_input(self, pipeline):
        out, cfg_path = pipeline
        src = json.loads(cfg_path.read_text())
        echo = json.loads((out / "checkpoint/config.echo.json").read_text())

        def subset(a, b, path=""):
            for k, v in a.items():
                assert k in b, f"{path}{k} missing from echo"
                if isinstance(v, dict):
                    subset(v, b[k], f"{path}{k}.")
                else:
                    assert b[k] == v, f"{path}{k} differs"

        subset(src, echo)

    def test_history_is_jsonl(self, pipeline):
        out, _ = pipeline
        lines = (out / "checkpoint/history.jsonl").read_text().strip().splitlines()
        assert lines
        for line in lines:
            rec = json.loads(line)
            assert {"epoch", "val_recall", "group_losses"} <= set(rec)


def test_compare_table(tmp_path):
    cfg_path = write_cfg(tmp_path)
    assert run("synth", str(cfg_path)) == 0
    assert run("compare", str(cfg_path)) == 0
    out = tmp_path / "run"
    table = json.loads((out / "compare/compare.json").read_text())["table"]
    assert len(table) == 4
    cols = {"recall", "ndcg", "hr", "pop_cv", "pop_min", "genre_cv", "genre_min"}
    for row in table:
        assert cols <= set(row)
        for c in cols:
            assert row[c] is not None and abs(row[c]) < 1e6
    csv_lines = (out / "compare/compare.csv").read_text().strip().splitlines()
    header = csv_lines[0].split(",")
    assert header[0] == "method" and set(header[1:]) == cols
    assert len(csv_lines) == 5  # header + one row per method


def test_determinism_byte_identical(tmp_path):
    cfg_path = write_cfg(tmp_path)
    assert run("synth", str(cfg_path)) == 0
    blobs = {}
    for attempt in ("one", "two"):
        ckpt = tmp_path / attempt / "checkpoint"
        rep = tmp_path / attempt / "report"
        assert run("train", str(cfg_path),
                   overrides=[f"train.checkpoint_dir={ckpt}"]) == 0
        assert run("eval", str(cfg_path),
                   overrides=[f"train.checkpoint_dir={ckpt}",
                              f"eval.report_dir={rep}"]) == 0
        blobs[attempt] = ((ckpt / "history.jsonl").read_bytes(),
                          (rep / "report.json").read_bytes())
    assert blobs["one"][0] == blobs["two"][0]
    # reports echo the config, which differs by the injected paths; compare
    # everything except the echoed config block
    r1 = json.loads(blobs["one"][1])
    r2 = json.loads(blobs["two"][1])
    r1.pop("config")
    r2.pop("config")
    assert r1 == r2


def test_console_entrypoint_smoke(tmp_path):
    cfg_path = write_cfg(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "bifair.cli", "synth",
                           "--config", str(cfg_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
