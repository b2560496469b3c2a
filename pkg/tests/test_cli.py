import json
import subprocess
import sys

import pytest

from octfew.cli import main
from octfew.dataset import ClassLabel, Provenance, read_manifest


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, small_corpus):
    d = tmp_path_factory.mktemp("cli")
    assert main(["ingest", str(small_corpus), "--out", str(d / "m.json")]) == 0
    return d


def test_synth_and_ingest_with_mapping(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "c"), "--count", "CNV=3", "--count", "DME=2", "--size", "32"]) == 0
    (tmp_path / "c" / "RP").rename(tmp_path / "c" / "retinitis")
    # an explicit mapping must cover every subdirectory
    assert main(["ingest", str(tmp_path / "c"), "--out", str(tmp_path / "m.json"), "--map", "retinitis=RP"]) == 1
    assert "unmapped subdirectory" in capsys.readouterr().err
    maps = [a for c in ClassLabel if c not in (ClassLabel.RP, ClassLabel.CSC) for a in ("--map", f"{c.name}={c.name}")]
    assert main(["ingest", str(tmp_path / "c"), "--out", str(tmp_path / "m.json"), "--map", "retinitis=RP",
                 *maps, "--ignore", "CSC"]) == 0
    counts = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert counts["CNV"] == 3 and counts["DME"] == 2 and "CSC" not in counts and counts["RP"] == 10


def test_augment(workdir, tmp_path):
    out = tmp_path / "aug.json"
    assert main(["augment", "--manifest", str(workdir / "m.json"), "--label", "MH", "--target", "9",
                 "--img-dir", str(tmp_path / "img"), "--out", str(out), "--seed", "3"]) == 0
    m = read_manifest(out)
    assert m.provenance_histogram(ClassLabel.MH) == {"real": 6, "augmented": 3}


def test_gan_train_generate_balance(workdir, tmp_path, capsys):
    m = str(workdir / "m.json")
    rare = ("CSC", "MH", "MacTel", "RP", "Stargardt")
    for c in rare:
        assert main(["gan-train", "--domain-a", m, "--domain-b", m, "--label", c, "--iterations", "1",
                     "--config", '{"image_size": 32, "channels": 1}', "--out", str(tmp_path / c)]) == 0
    ckpt = tmp_path / "CSC"
    assert (ckpt / "header.json").is_file()
    assert main(["gan-generate", "--ckpt", str(ckpt), "--source", m, "--count", "3",
                 "--img-dir", str(tmp_path / "gen"), "--out", str(tmp_path / "gen.json")]) == 0
    gen = read_manifest(tmp_path / "gen.json")
    assert len(gen) == 3 and all(r.provenance is Provenance.generated and r.label is ClassLabel.CSC
                                 for r in gen.records)
    capsys.readouterr()
    ckpt_args = [a for c in rare for a in ("--checkpoint", f"{c}={tmp_path / c}")]
    assert main(["balance", "--manifest", m, "--strategy", "bal_5000", "--scale", "0.004", "--major-fill", "topup",
                 "--img-dir", str(tmp_path / "bimg"), "--out", str(tmp_path / "bal.json"), "--plan-only",
                 *ckpt_args]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert {row["target"] for row in plan["ledger"]} == {20}
    assert main(["balance", "--manifest", m, "--strategy", "bal_5000", "--scale", "0.004", "--major-fill", "topup",
                 "--img-dir", str(tmp_path / "bimg"), "--out", str(tmp_path / "bal.json"), *ckpt_args]) == 0
    bal = read_manifest(tmp_path / "bal.json")
    assert all(n == 20 for n in bal.counts().values())
    assert main(["balance", "--manifest", m, "--strategy", "bal_5000", "--scale", "0.004", "--img-dir",
                 str(tmp_path / "x"), "--out", str(tmp_path / "x.json"), *ckpt_args[:2], "--checkpoint", f"MH={ckpt}",
                 *ckpt_args[4:]]) == 1
    assert "used to generate MH" in capsys.readouterr().err


def test_balance_missing_checkpoint_exits_1(workdir, tmp_path, capsys):
    code = main(["balance", "--manifest", str(workdir / "m.json"), "--strategy", "bal_5000", "--scale", "0.004",
                 "--img-dir", str(tmp_path), "--out", str(tmp_path / "b.json")])
    assert code == 1
    assert "missing translation checkpoint" in capsys.readouterr().err


def test_train_predict_evaluate_embed(workdir, tmp_path, capsys):
    m = str(workdir / "m.json")
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"backbone": {"variant": "toy_cnn", "seed": 1},
                               "train": {"epochs": 2, "batch_size": 16, "learning_rate": 1e-3, "seed": 1}}))
    model = tmp_path / "model"
    assert main(["train", "--manifest", m, "--config", str(cfg), "--epochs", "1", "--out", str(model),
                 "--predict", m]) == 0
    header = json.loads((model / "header.json").read_text())
    assert header["train"]["epochs"] == 1 and header["train"]["batch_size"] == 16
    pred = model / "predictions.json"
    assert pred.is_file()
    assert main(["evaluate", "--predictions", str(pred), "--out", str(tmp_path / "ev.json")]) == 0
    ev = json.loads((tmp_path / "ev.json").read_text())
    assert sum(map(sum, ev["confusion"])) == 110
    capsys.readouterr()
    assert main(["embed", "--model", str(model), "--manifest", m, "--perplexity", "5", "--iters", "60",
                 "--out", str(tmp_path / "emb.csv"), "--plot", str(tmp_path / "emb.png")]) == 0
    meta = json.loads((tmp_path / "emb.json").read_text())
    assert meta["legend_entries"] == 9 and meta["rows"] == 110
    assert meta["manifest"].endswith("m.json")


def test_crossval_writes_report(workdir, tmp_path, capsys):
    assert main(["crossval", "--manifest", str(workdir / "m.json"), "--k", "2", "--epochs", "1",
                 "--name", "toy", "--out", str(tmp_path / "reports")]) == 0
    rep = json.loads((tmp_path / "reports" / "crossval.json").read_text())
    assert rep["aggregate"]["n_folds"] == 2 and len(rep["folds"]) == 2
    assert "toy" in capsys.readouterr().out


def test_validate_and_run_exit_codes(small_corpus, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data_root": str(small_corpus), "output_root": "out", "strategy": "bal_10000",
                               "gan": {"train": False}, "crossval": {"k": 1}}))
    assert main(["validate", str(bad)]) == 1
    err = capsys.readouterr().err
    assert err.count("error: gan.checkpoints.") == 5 and "crossval.k" in err
    assert main(["run", str(bad)]) == 1
    assert main(["run", str(tmp_path / "absent.json")]) == 1
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"data_root": str(small_corpus), "output_root": "out"}))
    assert main(["validate", str(good)]) == 0
    assert main(["run", str(good), "--stages", "evaluate"]) == 1
    assert "predictions" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "out")]) == 1


def test_unknown_subcommand_and_bad_args_exit_1():
    with pytest.raises(SystemExit) as info:
        main(["polish"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["balance", "--strategy", "bal_1"])
    assert info.value.code == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "octfew.cli", "validate", str(tmp_path / "none.json")],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "does not exist" in res.stderr
