import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ctgan_sim.cli import main
from ctgan_sim.rawio import read_raw, write_raw
from ctgan_sim.phantom import read_truth


def run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def phantom_file(workdir):
    path = str(workdir / "p.raw")
    assert main(["--seed", "3", "phantom", "--out", path, "--nodules", "2"]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(workdir):
    data = str(workdir / "d.npz")
    ckpt = str(workdir / "m.ckpt")
    assert main(["dataset", "--out", data, "--n", "2"]) == 0
    assert main(["train", "--data", data, "--out", ckpt, "--iterations", "2", "--log-every", "1"]) == 0
    return ckpt


def test_phantom_writes_truth(phantom_file):
    truth = read_truth(phantom_file[:-4] + ".truth")
    assert len(truth) == 2
    assert read_raw(phantom_file).series_id == "phantom-3"


def test_dataset_npz(workdir, capsys):
    out = str(workdir / "clean.npz")
    rc, text, _ = run(capsys, "--seed", "1", "dataset", "--out", out, "--n", "3", "--mode", "remove")
    assert rc == 0 and "3 samples" in text
    with np.load(out) as d:
        assert d["cubes"].shape == (3, 32, 32, 32) and not d["diameters"].any()


def test_inject_with_model_is_deterministic(phantom_file, checkpoint, workdir, capsys):
    # a two-iteration model cannot draw a detectable nodule, so skip the success check
    cfg = workdir / "lenient.json"
    cfg.write_text(json.dumps({"tamper": {"success_diameter_mm": 0}}))
    outs = []
    for name in ("b1.raw", "b2.raw"):
        out = str(workdir / name)
        rc, text, _ = run(capsys, "--config", str(cfg), "inject", "--in", phantom_file, "--out", out,
                          "--model", checkpoint, "--seed", "7", "--count", "1")
        assert rc == 0 and text.startswith("inject ")
        with open(out, "rb") as fh:
            outs.append(fh.read())
    assert outs[0] == outs[1]
    assert os.path.exists(str(workdir / "b1.record"))


def test_oracle_inject_and_detect(phantom_file, workdir, capsys):
    out = str(workdir / "inj.raw")
    rc, text, _ = run(capsys, "--seed", "2", "inject", "--in", phantom_file, "--out", out, "--count", "2")
    assert rc == 0 and text.count("inject") == 2
    assert len(read_truth(str(workdir / "inj.truth"))) == 4
    rc, text, _ = run(capsys, "detect", "--in", out)
    assert rc == 0 and len(text.splitlines()) == 4


def test_remove_clears_detector(phantom_file, workdir, capsys):
    out = str(workdir / "rem.raw")
    rc, text, _ = run(capsys, "remove", "--in", phantom_file, "--out", out)
    assert rc == 0 and text.count("remove") >= 2
    assert read_truth(str(workdir / "rem.truth")) == []
    rc, text, _ = run(capsys, "detect", "--in", out)
    assert rc == 0 and text == ""


def test_splice_and_noise_detect(workdir, capsys):
    clean = str(workdir / "clean.raw")
    assert main(["--seed", "40", "phantom", "--out", clean]) == 0
    out = str(workdir / "spliced.raw")
    rc, text, _ = run(capsys, "splice", "--in", clean, "--out", out, "--library-seed", "7")
    assert rc == 0 and text.startswith("splice ")
    rc, text, _ = run(capsys, "detect", "--in", out, "--method", "noise")
    assert rc == 0 and text.strip().splitlines()[-1] in ("suspicious", "clean")


def test_sign_verify_raw(phantom_file, workdir, capsys):
    key = str(workdir / "key.pem")
    rc, _, _ = run(capsys, "sign", "--new-key", key, "--in", phantom_file)
    assert rc == 0
    rc, text, _ = run(capsys, "verify", "--in", phantom_file, "--pub", key + ".pub")
    assert rc == 0 and text.strip() == "valid"

    vol = read_raw(phantom_file)
    v = vol.voxels.copy()
    v[10, 10, 10] += 1
    tampered = str(workdir / "tampered.raw")
    write_raw(type(vol)(v, vol.spacing, vol.series_id), tampered)
    rc, text, _ = run(capsys, "verify", "--in", tampered, "--sig", phantom_file[:-4] + ".sig",
                      "--pub", key + ".pub")
    assert rc == 1 and text.startswith("invalid")


def test_sign_verify_dicom(workdir, capsys):
    from ctgan_sim import dicom
    from ctgan_sim.phantom import random_phantom

    vol, _ = random_phantom(1, dims=(32, 32, 8))
    d = workdir / "dcm"
    d.mkdir()
    for i, s in enumerate(dicom.split_volume(vol)):
        (d / f"s{i:03d}.dcm").write_bytes(dicom.write_dicom(s))
    key = str(workdir / "k2.pem")
    assert run(capsys, "--seed", "5", "sign", "--new-key", key, "--deterministic-key", "--in", str(d))[0] == 0
    rc, text, _ = run(capsys, "verify", "--in", str(d), "--pub", key + ".pub")
    assert rc == 0 and text.strip() == "valid"
    out = str(workdir / "dcm_inj")
    rc, _, _ = run(capsys, "inject", "--in", str(d), "--out", out, "--count", "1")
    # an 8-slice phantom is too thin for a 32 mm cuboid
    assert rc == 1


def test_eval(phantom_file, workdir, capsys, tmp_path):
    import shutil
    scans = tmp_path / "scans"
    scans.mkdir()
    for stem in ("p", "inj", "rem"):
        for ext in (".raw", ".truth", ".record"):
            src = workdir / (stem + ext)
            if src.exists():
                shutil.copy(src, scans / (stem + ext))
    rc, text, _ = run(capsys, "eval", "--scans", str(scans), "--out", str(tmp_path / "rep"), "--svg")
    assert rc == 0
    assert sorted(os.listdir(tmp_path / "rep")) == ["attacks.csv", "attacks.svg", "report.csv"]
    assert "injection=1.000 removal=1.000" in text


def test_config_file(workdir, capsys, phantom_file):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"phantom": {"dims": [64, 64, 48]}}))
    out = str(workdir / "small.raw")
    assert run(capsys, "--config", str(cfg), "phantom", "--out", out)[0] == 0
    assert read_raw(out).dims == (64, 64, 48)
    cfg.write_text("[1]")
    rc, _, err = run(capsys, "--config", str(cfg), "phantom", "--out", out)
    assert rc == 1 and "config" in err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["inject", "--in", "a.raw", "--out", "b.raw", "--bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert err.startswith("usage:") and "--bogus" in err


def test_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "ctgan_sim", "verify", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage:" in proc.stderr and proc.stdout == ""


def test_usage_and_operational_errors(capsys, workdir):
    rc, _, err = run(capsys, "sign", "--in", "x.raw")
    assert rc == 2 and "usage:" in err
    rc, _, err = run(capsys, "detect", "--in", str(workdir / "missing.raw"))
    assert rc == 1 and err.startswith("error:")
    rc, _, err = run(capsys, "send", "--in", str(workdir / "p.raw"), "--to", "nohostport")
    assert rc == 2


def test_serve_send_bridge(phantom_file, workdir, capsys):
    server = subprocess.Popen([sys.executable, "-m", "ctgan_sim", "serve", "--port", "0", "--duration", "60"],
                              stdout=subprocess.PIPE, text=True)
    try:
        addr = server.stdout.readline().split()[1]
        cap = str(workdir / "cap.jsonl")
        bridge = subprocess.Popen(
            [sys.executable, "-m", "ctgan_sim", "--seed", "1", "bridge", "--listen", "127.0.0.1:0",
             "--upstream", addr, "--attack", "inject", "--count", "1", "--capture", cap, "--duration", "60"],
            stdout=subprocess.PIPE, text=True)
        try:
            baddr = bridge.stdout.readline().split()[1]
            back = str(workdir / "back.raw")
            rc, text, _ = run(capsys, "send", "--in", phantom_file, "--to", baddr, "--retrieve", back)
            assert rc == 0 and "stored" in text
            sent, got = read_raw(phantom_file), read_raw(back)
            assert got.dims == sent.dims and not np.array_equal(got.voxels, sent.voxels)
        finally:
            bridge.terminate()
            bridge.wait(10)
        entries = [json.loads(l) for l in open(cap)]
        assert entries[0]["hook_applied"] is True
    finally:
        server.terminate()
        server.wait(10)
