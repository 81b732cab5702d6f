import json

import pytest

from viti.cli import main
from viti.perturb import NoiseSchedule, build_probe_dataset
from viti.runtime import ModelConfig, init_model, save_model
from viti.synthtask import VOCAB_SIZE, gen_dataset, save_dataset
from viti.vnd import ProbeHyper, save_bank, train_probe_bank


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=VOCAB_SIZE, max_seq=40)
    model = init_model(cfg, 1, std=0.2)
    save_model(model, d / "m.bin")
    samples = gen_dataset(0, 12)
    save_dataset(samples, d / "d.jsonl")
    bank = train_probe_bank(build_probe_dataset(model, samples, NoiseSchedule()), ProbeHyper(epochs=20))
    save_bank(bank, d / "p.vprb")
    other = init_model(ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=VOCAB_SIZE, max_seq=41), 1)
    save_model(other, d / "other.bin")
    return d


def test_missing_model_exits_2_naming_key(files, capsys):
    code = main(["eval", "--dataset", str(files / "d.jsonl"), "--report", str(files / "r.json")])
    assert code == 2
    assert "model" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["eval", "--no-such-flag"])
    assert e.value.code == 2


def test_bad_config_value_exits_2(files, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"alpha0": 7}')
    code = main(["eval", "--config", str(cfg), "--model", str(files / "m.bin"), "--dataset",
                 str(files / "d.jsonl"), "--report", str(tmp_path / "r.json")])
    assert code == 2 and "alpha0" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_3(files, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + (files / "m.bin").read_bytes()[4:])
    code = main(["eval", "--model", str(bad), "--dataset", str(files / "d.jsonl"), "--report",
                 str(tmp_path / "r.json")])
    assert code == 3


def test_bank_for_other_model_exits_3(files, tmp_path):
    code = main(["eval", "--model", str(files / "other.bin"), "--probes", str(files / "p.vprb"), "--dataset",
                 str(files / "d.jsonl"), "--intervene", "--report", str(tmp_path / "r.json")])
    assert code == 3


def test_eval_reports_are_deterministic(files, tmp_path):
    args = ["eval", "--model", str(files / "m.bin"), "--probes", str(files / "p.vprb"), "--dataset",
            str(files / "d.jsonl"), "--intervene", "--perturb-steps", "500", "--seed", "3"]
    assert main(args + ["--report", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--report", str(tmp_path / "b.json")]) == 0
    a, b = (json.loads((tmp_path / n).read_text()) for n in ("a.json", "b.json"))
    a.pop("timing"), b.pop("timing")
    assert a == b
    assert a["config"]["seed"] == 3 and a["format_version"] == 1


def test_out_dir_from_environment(files, tmp_path, monkeypatch):
    monkeypatch.setenv("VITI_OUT_DIR", str(tmp_path))
    assert main(["gen-data", "--out", "gen.jsonl", "--size", "5"]) == 0
    assert (tmp_path / "gen.jsonl").exists()


def test_sweep_then_report_pivot(files, tmp_path):
    code = main(["sweep", "--model", str(files / "m.bin"), "--probes", str(files / "p.vprb"), "--dataset",
                 str(files / "d.jsonl"), "--alpha0s", "0,0.5", "--betas", "0.25,1", "--csv",
                 str(tmp_path / "s.csv"), "--report", str(tmp_path / "s.json")])
    assert code == 0
    assert main(["report", "--in", str(tmp_path / "s.csv"), "--out", str(tmp_path / "pivot.csv")]) == 0
    lines = (tmp_path / "pivot.csv").read_text().splitlines()
    assert lines[0] == "alpha0,0.25,1.0"
    assert [l.split(",")[0] for l in lines[1:]] == ["0.0", "0.5"]
    report = json.loads((tmp_path / "s.json").read_text())
    cells = {(g["alpha0"], g["beta"]): g["score"] for g in report["result"]["grid"]}
    assert cells[(0.0, 0.25)] == cells[(0.0, 1.0)]


def test_report_rejects_non_sweep_csv(tmp_path):
    src = tmp_path / "x.csv"
    src.write_text("a,b\n1,2\n")
    assert main(["report", "--in", str(src), "--out", str(tmp_path / "y.csv")]) == 3


def test_probe_pipeline_commands(files, tmp_path):
    assert main(["gen-data", "--probe-data", "--model", str(files / "m.bin"), "--dataset", str(files / "d.jsonl"),
                 "--out", str(tmp_path / "pd.vpds")]) == 0
    assert main(["train-probes", "--dataset", str(tmp_path / "pd.vpds"), "--epochs", "10", "--out",
                 str(tmp_path / "b.vprb")]) == 0
    assert main(["generate", "--model", str(files / "m.bin"), "--probes", str(tmp_path / "b.vprb"),
                 "--prompt-file", str(files / "d.jsonl"), "--max-new", "2", "--report",
                 str(tmp_path / "g.json")]) == 0
    out = json.loads((tmp_path / "g.json").read_text())["result"]["outputs"]
    assert len(out) == 12 and all(len(o["tokens"]) <= 2 for o in out)


def test_bench_context_too_long_for_model(files, tmp_path, capsys):
    code = main(["bench", "--model", str(files / "m.bin"), "--probes", str(files / "p.vprb"), "--report",
                 str(tmp_path / "b.json")])
    assert code == 2 and "context" in capsys.readouterr().err
