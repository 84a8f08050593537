import hashlib

import numpy as np
import pytest

from slicenet import cli
from slicenet import config as K
from slicenet import convnet as C
from slicenet import tps_augment as A


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["phantoms", "--per-class", "5", "--seed", "3", "--out", str(out), "--size", "48"]) == 0
    return out


def _config(corpus_dir, tmp_path, **changes):
    cfg = K.load(corpus_dir / "slicenet.ini")
    cfg.corpus.manifest = str(corpus_dir / "manifest.tsv")
    cfg.augment.output = str(tmp_path / "aug")
    cfg.output.model = str(tmp_path / "model.slicenet")
    cfg.output.reports = str(tmp_path / "reports")
    cfg.train.epochs = 2
    for section, values in changes.items():
        for k, v in values.items():
            setattr(getattr(cfg, section), k, v)
    path = tmp_path / "run.ini"
    path.write_text(K.serialize(cfg))
    return path


def test_phantoms_writes_corpus(corpus, capsys, tmp_path):
    assert len(list((corpus / "images").glob("*.pgm"))) == 25
    lines = [l for l in (corpus / "manifest.tsv").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 25
    assert (corpus / "torso.slivol").exists()
    again = tmp_path / "again"
    cli.main(["phantoms", "--per-class", "5", "--seed", "3", "--out", str(again), "--size", "48"])
    assert _digest(again) == _digest(corpus)
    assert "total\t25" in capsys.readouterr().out


def test_phantoms_usage_errors(tmp_path, capsys):
    assert cli.main(["phantoms", "--per-class", "0", "--out", str(tmp_path)]) == 2
    assert "--per-class" in capsys.readouterr().err
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["phantoms", "--per-class", "1", "--out", str(blocker / "sub")]) == 2
    assert "cannot create output directory" in capsys.readouterr().err
    assert cli.main(["phantoms"]) == 2
    assert cli.main(["--threads", "0", "compare", "a", "b"]) == 2


def test_augmentation_summary_table_rows():
    plan = A.AugmentationPlan()
    text = cli.augmentation_summary(A.CLINICAL_COUNTS, plan, ("legs", "pelvis", "liver", "lungs", "neck"))
    lines = text.splitlines()
    assert lines[2].startswith("liver  2,684 → 32,208")
    assert lines[-1] == "total  4,298 → 128,056"


def test_augment_copy_through(corpus, tmp_path, capsys):
    cfg = _config(corpus, tmp_path, augment={"max_translation": 0.0, "max_rotation": 0.0,
                                             "max_control_jitter": 0.0})
    text = cfg.read_text().split("[augment.counts]")[0] + "[augment.counts]\n"
    cfg.write_text(text + "".join(f"{n} = 1,1,1\n" for n in C.DEFAULT_CLASSES))
    assert cli.main(["augment", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "total 25 → 25" in out.replace("  ", " ")
    assert "# config_sha256" in out
    from slicenet import dataset as D
    recs = D.parse_manifest(tmp_path / "aug" / "manifest.tsv").records
    assert len(recs) == 25 and recs[0].extra["source"] == "neck_0000"
    src = D.read_image(corpus / "images" / "neck_0000.pgm").pixels
    np.testing.assert_array_equal(D.read_image(tmp_path / "aug" / recs[0].path).pixels, src)
    assert (tmp_path / "aug" / "examples.png").exists()


def test_augment_reports_unlabelable(corpus, tmp_path, capsys):
    manifest = tmp_path / "m.tsv"
    manifest.write_text((corpus / "manifest.tsv").read_text()
                        + f"odd\t{corpus}/images/neck_0000.pgm\tCT HEAD\tBRAIN\t\n")
    cfg = _config(corpus, tmp_path, corpus={"manifest": str(manifest), "root": str(corpus)})
    text = cfg.read_text().split("[augment.counts]")[0] + "[augment.counts]\n"
    cfg.write_text(text)
    assert cli.main(["augment", "--config", str(cfg)]) == 2
    assert "unlabelable: odd" in capsys.readouterr().err


def test_train_eval_compare_profile(corpus, tmp_path, capsys):
    cfg = _config(corpus, tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    model = tmp_path / "model.slicenet"
    assert model.exists()
    log = (tmp_path / "reports" / "training_log.tsv").read_text()
    assert log.count("\n# ") >= 5 and "# seed.train\t3" in log
    assert (tmp_path / "reports" / "training_log.png").exists()

    assert cli.main(["eval", "--config", str(cfg), "--model", str(model)]) == 0
    reports = tmp_path / "reports"
    for name in ("report.txt", "report.tsv", "report_features.tsv", "report_roc.png", "report_confusion.png"):
        assert (reports / name).exists(), name
    assert "# model_fnv1a64" in (reports / "report.tsv").read_text()
    assert len((reports / "report_features.tsv").read_text().splitlines()) == 5

    capsys.readouterr()
    tsv = str(reports / "report.tsv")
    assert cli.main(["compare", tsv, tsv, "--out", str(tmp_path / "cmp")]) == 0
    out = capsys.readouterr().out
    assert "+0.000000" in out and "-0.000000" not in out
    assert (tmp_path / "cmp" / "comparison_confusion.png").exists()

    prof = tmp_path / "prof" / "torso.csv"
    assert cli.main(["--threads", "2", "profile", "--model", str(model),
                     "--volume", str(corpus / "torso.slivol"), "--out", str(prof)]) == 0
    assert len(prof.read_text().splitlines()) == 1 + 5 * 6 + 4 * 5
    assert prof.with_suffix(".png").exists()
    assert "# volume" in (tmp_path / "prof" / "torso.csv.repro.txt").read_text()

    # rerunning training reproduces the model bitwise
    first = model.read_bytes()
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert model.read_bytes() == first


def test_eval_class_count_mismatch(corpus, tmp_path, capsys):
    cfg = _config(corpus, tmp_path)
    specs = C.scaled_down_architecture(4)
    m = C.ConvNetModel.build(specs, C.DEFAULT_CLASSES[:4], (1, 48, 48))
    C.save_model(m, tmp_path / "four.slicenet")
    assert cli.main(["eval", "--config", str(cfg), "--model", str(tmp_path / "four.slicenet")]) == 2
    assert "4 classes" in capsys.readouterr().err


def test_divergence_exits_one(corpus, tmp_path, capsys):
    cfg = _config(corpus, tmp_path, train={"learning_rate": 1e6, "epochs": 3})
    with pytest.warns(RuntimeWarning):
        assert cli.main(["train", "--config", str(cfg)]) == 1
    assert "diverged" in capsys.readouterr().err


def test_config_and_input_errors(corpus, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepoch = 3\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "unknown key 'epoch'" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    cfg = _config(corpus, tmp_path, train={"use_augmented": True})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "run 'augment' first" in capsys.readouterr().err
    assert cli.main(["compare", str(tmp_path / "a.tsv"), str(tmp_path / "b.tsv")]) == 2
    (tmp_path / "v.slivol").write_bytes(b"SLIVOL1\0" + bytes(30))
    assert cli.main(["profile", "--model", str(tmp_path / "none"), "--volume", str(tmp_path / "v.slivol"),
                     "--out", str(tmp_path / "p.csv")]) == 2


def test_repro_block_contents():
    block = cli.repro_block("eval", {"split": 1}, K.RunConfig())
    keys = [line.split("\t")[0] for line in block.splitlines()]
    assert keys == ["# command", "# seed.split", "# config_sha256", "# slicenet", "# python", "# numpy"]
