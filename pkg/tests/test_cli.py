import re
import subprocess
import sys

import pytest

from stainmix.cli import RunManifest, main
from stainmix.dataset import list_images
from stainmix.metrics import MetricReport

TINY = ["--set", "crop=32", "--set", "base_width=8", "--set", "n_res_blocks=1", "--set", "embed_dim=32",
        "--set", "disc_width=8", "--set", "m_patches=64"]


def _images_under(root):
    return sorted(p for p in root.rglob("*") if p.suffix == ".png")


def test_make_toy(tmp_path):
    out = tmp_path / "d"
    assert main(["make-toy", "--out", str(out), "--n", "8", "--size", "64", "--seed", "1"]) == 0
    assert len(_images_under(out)) == 16
    man = RunManifest.read(out / "manifest.json")
    assert man.command == "make-toy" and man.seed == 1


def test_make_toy_missing_out(capsys):
    assert main(["make-toy", "--n", "8"]) == 2
    assert "usage" in capsys.readouterr().err


def test_make_toy_bad_count(tmp_path, capsys):
    assert main(["make-toy", "--out", str(tmp_path / "d"), "--n", "0"]) == 1
    assert "n" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stainmix", "make-toy"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--out" in proc.stderr


@pytest.fixture(scope="module")
def trained(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = main(["train", "--data", str(toy_root), "--out", str(out), "--epochs", "2", "--seed", "3", *TINY])
    return code, out


def test_train_artifacts(trained):
    code, out = trained
    assert code == 0
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_001.pt", "epoch_002.pt"]
    assert (out / "trace.csv").exists()
    man = RunManifest.read(out / "manifest.json")
    assert man.config["epochs"] == 2 and man.config["decay_start"] == 2 and man.seed == 3
    assert man.config["crop"] == 32
    assert man.objective == {"he_term": "mix_domain", "gt_term": "adaptive_weighted_mix_domain",
                             "adaptive_weighting": "rank_similarity_linear_ramp"}


def test_train_unknown_key(toy_root, tmp_path, capsys):
    code = main(["train", "--data", str(toy_root), "--out", str(tmp_path), "--set", "learning_rate=1"])
    assert code == 2
    err = capsys.readouterr().err
    assert "valid keys" in err and "lr0" in err


def test_train_config_file_and_flag_precedence(toy_root, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("loss_variant = MIX_DOMAIN\nepochs = 1\ndecay_start = 1\n")
    out = tmp_path / "run"
    code = main(["train", "--data", str(toy_root), "--out", str(out), "--config", str(cfg),
                 "--loss-variant", "nce", "--no-gt-branch", "--max-iterations", "2", *TINY])
    assert code == 0
    man = RunManifest.read(out / "manifest.json")
    assert man.config["loss_variant"] == "PATCH_NCE" and man.config["use_gt_branch"] is False
    assert man.objective["he_term"] == "patchnce" and man.objective["gt_term"] == "none"


def test_translate_and_evaluate(trained, toy_root, tmp_path, capsys):
    _, out = trained
    src = tmp_path / "src"
    src.mkdir()
    for p in list(list_images(toy_root / "train" / "HE").values())[:3]:
        (src / p.name).write_bytes(p.read_bytes())
    code = main(["translate", "--checkpoint", str(out / "checkpoints" / "epoch_002.pt"),
                 "--in", str(src), "--out", str(tmp_path / "gen")])
    assert code == 0
    assert len(list_images(tmp_path / "gen")) == 3
    assert (tmp_path / "gen.manifest.json").exists()

    capsys.readouterr()
    report = tmp_path / "r.txt"
    gt = toy_root / "train" / "IHC"
    assert main(["evaluate", "--generated", str(gt), "--gt", str(gt), "--report", str(report)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    m = re.fullmatch(r"FID=(\S+) KID\(x1000\)=(\S+) PHV\(avg\)=(\S+)", line)
    assert m and float(m.group(1)) == pytest.approx(0.0, abs=1e-6)
    rep = MetricReport.load(report)
    assert rep.phv_average == pytest.approx(sum(rep.phv_layers) / len(rep.phv_layers), abs=1e-9)
    assert rep.n_images == 8


def test_evaluate_mismatch_exit_1(toy_root, tmp_path):
    code = main(["evaluate", "--generated", str(toy_root / "train" / "HE"), "--gt", str(tmp_path),
                 "--report", str(tmp_path / "r.txt")])
    assert code == 1


def test_translate_bad_checkpoint_exit_1(tmp_path):
    (tmp_path / "c.pt").write_text("junk")
    assert main(["translate", "--checkpoint", str(tmp_path / "c.pt"), "--in", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
