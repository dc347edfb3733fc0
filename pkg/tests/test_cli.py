import numpy as np
import pytest

from voxcycle.cli import read_config, run
from voxcycle.tensor import ConfigurationError
from voxcycle.toy import make_domains
from voxcycle.volume import Volume, load, save


def test_rf_discriminator(capsys):
    assert run(["rf", "--preset", "discriminator"]) == 0
    out = capsys.readouterr().out
    assert "receptive field: 46" in out
    assert "51x51x51" in out and "warning" in out


def test_rf_classic_and_custom(capsys):
    assert run(["rf", "--preset", "classic"]) == 0
    assert "receptive field: 70" in capsys.readouterr().out
    assert run(["rf", "--layers", "4,2"]) == 0
    assert "receptive field: 4" in capsys.readouterr().out


def test_rf_generator_is_rejected(capsys):
    assert run(["rf", "--preset", "generator"]) == 2
    assert "plain convolutions" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert run([]) == 2
    assert run(["train", "--bogus-flag"]) == 2
    assert "usage" in capsys.readouterr().err
    assert run(["translate", "--in", "x.nii", "--out", "y.nii"]) == 2


def test_every_subcommand_takes_seed(capsys):
    for cmd in ("train", "translate", "augment", "preprocess", "inspect", "rf", "gradcheck"):
        assert run([cmd, "--help"]) == 0
        assert "--seed" in capsys.readouterr().out


def test_preprocess_working_grid(tmp_path, capsys):
    data = np.random.default_rng(0).uniform(0, 100, (1, 182, 218, 182)).astype(np.float32)
    save(Volume(data), tmp_path / "mni.nii.gz")
    out = tmp_path / "cropped.nii.gz"
    assert run(["preprocess", "--in", str(tmp_path / "mni.nii.gz"), "--out", str(out)]) == 0
    vol = load(out)
    assert vol.shape == (152, 180, 120)
    assert vol.data.min() >= -1 and vol.data.max() <= 1
    raw = tmp_path / "raw.nii"
    assert run(["preprocess", "--in", str(tmp_path / "mni.nii.gz"), "--out", str(raw),
                "--no-normalize", "--size", "8", "8", "8", "--offset", "0", "0", "0"]) == 0
    np.testing.assert_array_equal(load(raw).data, data[:, :8, :8, :8])


def test_preprocess_bounds_error(tmp_path, capsys):
    save(Volume(np.ones((1, 10, 10, 10), np.float32)), tmp_path / "v.nii")
    assert run(["preprocess", "--in", str(tmp_path / "v.nii"), "--out", str(tmp_path)]) == 2
    assert "crop along x" in capsys.readouterr().err


def test_augment_count(tmp_path, capsys):
    src = tmp_path / "in"
    src.mkdir()
    for i in range(4):
        save(Volume(np.random.default_rng(i).random((1, 6, 6, 6), dtype=np.float32)),
             src / f"s{i}.nii")
    assert run(["augment", "--in", str(src), "--out", str(tmp_path / "out"), "--n", "3"]) == 0
    assert len(list((tmp_path / "out").iterdir())) == 16
    assert "wrote 16 volumes" in capsys.readouterr().out


def test_inspect(tmp_path, capsys):
    save(Volume(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2), (1.5, 2.0, 2.5)),
         tmp_path / "v.nii")
    assert run(["inspect", "--in", str(tmp_path / "v.nii")]) == 0
    out = capsys.readouterr().out
    assert "sizeof_hdr: 348" in out and "datatype: 16" in out and "nonzero: 7" in out
    (tmp_path / "bad.nii").write_bytes(b"\0" * 400)
    assert run(["inspect", "--in", str(tmp_path / "bad.nii")]) == 2


def test_config_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nepochs = 3\nbase_lr = 1e-3  # faster\n"
                    "deterministic = false\nconstant_epochs = none\ndata_a = /x\n")
    assert read_config(path) == {"epochs": 3, "base_lr": 1e-3, "deterministic": False,
                                 "constant_epochs": None, "data_a": "/x"}
    path.write_text("epoch = 3\n")
    with pytest.raises(ConfigurationError, match="unknown config key"):
        read_config(path)
    path.write_text("epochs = many\n")
    with pytest.raises(ConfigurationError, match="epochs"):
        read_config(path)


def test_dry_run(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 200\n")
    assert run(["train", "--config", str(cfg), "--dry-run"]) == 0
    out = capsys.readouterr().out
    for name in ("[G_A2B]", "[G_B2A]", "[D_A]", "[D_B]"):
        assert name in out
    assert "(152, 180, 120) -> (152, 180, 120)" in out
    assert "GiB" in out
    cfg.write_text("epochs = 0\n")
    assert run(["train", "--config", str(cfg), "--dry-run"]) == 2


def test_train_and_translate(tmp_path, capsys):
    dom_a, dom_b = make_domains(2, 16, seed=0)
    for name, dom in (("a", dom_a), ("b", dom_b)):
        (tmp_path / name).mkdir()
        for i, v in enumerate(dom):
            save(v, tmp_path / name / f"v{i}.nii")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data_a = {tmp_path / 'a'}\ndata_b = {tmp_path / 'b'}\n"
                   f"width_divisor = 16\ncheckpoint_dir = {tmp_path / 'ck'}\n")
    log = tmp_path / "metrics.log"
    assert run(["train", "--config", str(cfg), "--epochs", "1", "--seed", "4",
                "--log", str(log)]) == 0
    lines = log.read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("step=1 epoch=1 lr=0.0002")
    out = tmp_path / "out"
    assert run(["translate", "--checkpoint", str(tmp_path / "ck" / "final.vxcg"),
                "--direction", "b2a", "--in", str(tmp_path / "b"), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["v0_b2a.nii", "v1_b2a.nii"]
    assert load(out / "v0_b2a.nii").shape == (16, 16, 16)


def test_numeric_failure_exit_code(tmp_path, monkeypatch, capsys):
    import voxcycle.cli as cli
    from voxcycle.trainer import NumericalError

    def boom(*args, **kwargs):
        raise NumericalError("non-finite value in fake_b at step 1")

    monkeypatch.setattr(cli, "train", boom)
    assert run(["train"]) == 3
    assert "numerical failure" in capsys.readouterr().err
