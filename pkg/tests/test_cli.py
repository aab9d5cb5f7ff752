import json
import subprocess
import sys

import pytest

from splitkv.cli import main, parse_token_ids
from splitkv.model import ModelConfig, init_model, split_generate

CFG = {"n_layers": 2, "n_heads": 2, "d_model": 8, "vocab_size": 32, "max_positions": 64, "init_seed": 42}


@pytest.fixture
def files(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps(CFG))
    (tmp_path / "prompts.json").write_text(json.dumps({"3": [1, 2, 3, 4, 5, 6]}))
    (tmp_path / "profile.json").write_text(json.dumps({"n_layers": 4, "t_prefix": 10, "t_cc": 2, "t_ct": 3, "t_ec": 4}))
    return tmp_path


def test_token_id_parsing(tmp_path):
    assert parse_token_ids("1, 2 3") == [1, 2, 3]
    (tmp_path / "ids.json").write_text("[4, 5]")
    (tmp_path / "ids.txt").write_text("6 7\n8\n")
    assert parse_token_ids(str(tmp_path / "ids.json")) == [4, 5]
    assert parse_token_ids(str(tmp_path / "ids.txt")) == [6, 7, 8]


def test_serve_and_run_edge(files, capsys):
    proc = subprocess.Popen(
        [sys.executable, "-m", "splitkv", "serve-cloud", "--listen", "127.0.0.1:0",
         "--config", str(files / "model.json"), "--prompts", str(files / "prompts.json")],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("listening on ")
        addr = line.split()[-1]
        cap = files / "cap.bin"
        rc = main(["run-edge", "--cloud", addr, "--config", str(files / "model.json"), "--edge-prompt", "9,10,11",
                   "--prompt-id", "3", "--steps", "5", "--capture", str(cap)])
        assert rc == 0
        out = capsys.readouterr().out.split()
        model = init_model(ModelConfig(**CFG))
        assert [int(t) for t in out] == split_generate(model, [1, 2, 3, 4, 5, 6], [9, 10, 11], 5)
        assert main(["audit", "--capture", str(cap), "--edge-prompt", "9,10,11"]) == 0
        assert capsys.readouterr().out.startswith("clean")

        rc = main(["run-edge", "--cloud", addr, "--config", str(files / "model.json"), "--edge-prompt", "1 2",
                   "--prompt-id", "999", "--steps", "1", "--sequential"])
        assert rc == 2
        assert "unknown prompt" in capsys.readouterr().err
    finally:
        proc.terminate()
        proc.wait(5)


def test_simulate_writes_trace(files, capsys):
    out = files / "trace.csv"
    assert main(["simulate", "--profile", str(files / "profile.json"), "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "actor,layer,start,end"
    assert "total 34.0  closed form 34.0" in capsys.readouterr().err


def test_classify_and_validate(files, capsys):
    assert main(["classify", "--profile", str(files / "profile.json")]) == 0
    assert capsys.readouterr().out.splitlines() == ["P2_edge_compute_bound", "objective 31.0"]
    assert main(["validate", "--profile", str(files / "profile.json"), "--f-cloud", "2", "--f-edge", "1"]) == 0
    assert main(["validate", "--profile", str(files / "profile.json"), "--f-cloud", "1", "--f-edge", "2"]) == 1
    assert "A1 cloud FLOPS >= edge FLOPS: FAIL" in capsys.readouterr().out


def test_bench_batch_sweep(tmp_path, capsys):
    out = tmp_path / "b.csv"
    rc = main(["bench", "batch", "--cloud-len-sweep", "64,128", "--edge-len", "512", "--requests", "20",
               "--groups", "2", "--mode", "edgeprompt", "--out", str(out)])
    assert rc == 0
    assert (tmp_path / "b_c64.csv").exists() and (tmp_path / "b_c128.csv").exists()
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "cloud_len,tokens_per_s,req_per_s" and len(lines) == 3
    assert main(["bench", "batch", "--requests", "10", "--groups", "3", "--out", str(out)]) == 2


def test_bench_interactive(tmp_path, capsys):
    out = tmp_path / "i.csv"
    rc = main(["bench", "interactive", "--rate", "0.1", "--requests", "20", "--mode", "monolithic", "--out", str(out)])
    assert rc == 0
    assert out.read_text().splitlines()[-1].startswith("summary,")
    assert capsys.readouterr().out.startswith("req/s ")
