import json

import pytest

from gliograde.cli import main
from gliograde.volumes import ModelCheckpoint, load_manifest
from gliograde.unet import UNetConfig, build_unet

SEG_FLAGS = ["--levels", "2", "--features", "3", "--patch", "8", "--log-every", "0"]


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Phantoms plus tiny trained checkpoints shared by the slower tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--out", str(root / "data"), "--count", "4", "--size", "16", "--seed", "3"]) == 0
    manifest = root / "data" / "manifest.csv"
    assert main(["train-seg", "--out", str(root / "seg"), "--manifest", str(manifest), "--steps", "2", *SEG_FLAGS]) == 0
    assert main(["train-cls", "--out", str(root / "cls"), "--manifest", str(manifest), "--steps", "2",
                 "--batch", "2", "--log-every", "0"]) == 0
    return root, manifest, root / "seg" / "seg.ggc", root / "cls" / "cls.ggc"


def _tree(folder):
    return {p.relative_to(folder).as_posix(): p.read_bytes() for p in sorted(folder.rglob("*")) if p.is_file()}


def test_phantom_is_byte_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = _run(capsys, "phantom", "--out", tmp_path / name, "--count", "2", "--size", "16", "--seed", 5)
        assert code == 0 and out.strip().endswith("manifest.csv")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and "phantom_001/flair.ggv" in a
    descriptors = load_manifest(tmp_path / "a" / "manifest.csv")
    assert [d.grade for d in descriptors] == ["LGG", "GBM"]


def test_unknown_config_key_lists_valid_keys(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# phantoms\ncount = 2\ncolour = blue\n")
    code, _, err = _run(capsys, "phantom", "--config", cfg, "--out", tmp_path)
    assert code == 2
    record = _error(err)
    assert record["exit_code"] == 2 and record["error"] == "ConfigError"
    assert "colour" in record["message"] and "count, noise, out, seed, size" in record["message"]


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count=3\nsize=16\nout=" + str(tmp_path / "from_file") + "\n")
    assert _run(capsys, "phantom", "--config", cfg, "--count", 1)[0] == 0
    assert len(load_manifest(tmp_path / "from_file" / "manifest.csv")) == 1


@pytest.mark.parametrize("argv", [["phantom"], ["phantom", "--out", "x", "--count", "two"], ["frobnicate"],
                                  ["pipeline", "--out", "x", "--manifest", "m", "--seg-ckpt", "s", "--cls-ckpt", "c",
                                   "--mode", "t2-only"]])
def test_bad_invocations_exit_2(argv, capsys):
    code, _, err = _run(capsys, *argv)
    assert code == 2 and _error(err)["exit_code"] == 2


def test_missing_checkpoint_exits_5(workspace, tmp_path, capsys):
    _, manifest, _, _ = workspace
    code, _, err = _run(capsys, "segment", "--out", tmp_path, "--manifest", manifest, "--seg-ckpt", tmp_path / "no.ggc")
    assert code == 5 and "no.ggc" in _error(err)["message"]


def test_missing_manifest_exits_5(tmp_path, capsys):
    code, _, err = _run(capsys, "train-seg", "--out", tmp_path, "--manifest", tmp_path / "none.csv")
    assert code == 5 and _error(err)["exit_code"] == 5


def test_zero_step_training_writes_the_initialisation(workspace, tmp_path, capsys):
    _, manifest, _, _ = workspace
    code, out, _ = _run(capsys, "train-seg", "--out", tmp_path, "--manifest", manifest, "--steps", 0, "--seed", 7,
                        *SEG_FLAGS)
    assert code == 0
    init = ModelCheckpoint(build_unet(UNetConfig(levels=2, base_features=3, patch_size=8), 7).state_dict())
    assert ModelCheckpoint.load(out.strip()) == init
    assert (tmp_path / "seg_trace.csv").read_text() == "step,loss\n"


def test_training_commands_are_byte_reproducible(workspace, tmp_path, capsys):
    root, manifest, seg, cls = workspace
    _run(capsys, "train-seg", "--out", tmp_path, "--manifest", manifest, "--steps", 2, *SEG_FLAGS)
    _run(capsys, "train-cls", "--out", tmp_path, "--manifest", manifest, "--steps", 2, "--batch", 2, "--log-every", 0)
    assert (tmp_path / "seg.ggc").read_bytes() == seg.read_bytes()
    assert (tmp_path / "cls.ggc").read_bytes() == cls.read_bytes()
    assert (tmp_path / "seg_trace.csv").read_bytes() == (root / "seg" / "seg_trace.csv").read_bytes()


@pytest.mark.parametrize("mode", ["all", "t1ce+flair", "t1ce+t2"])
def test_pipeline_equals_the_staged_commands(workspace, tmp_path, capsys, mode):
    _, manifest, seg, cls = workspace
    common = ["--manifest", manifest, "--patch", 8, "--mode", mode]
    code, summary, _ = _run(capsys, "pipeline", "--out", tmp_path / "p", "--seg-ckpt", seg, "--cls-ckpt", cls, *common)
    assert code == 0
    assert summary.splitlines()[0] == "dataset,auc,mcc,acc,sens,spec"
    assert _run(capsys, "segment", "--out", tmp_path / "s", "--seg-ckpt", seg, *common)[0] == 0
    assert _run(capsys, "grade", "--out", tmp_path / "s", "--cls-ckpt", cls, "--masks", tmp_path / "s" / "masks.csv",
                *common)[0] == 0
    code, staged, _ = _run(capsys, "eval", "--out", tmp_path / "s", "--predictions", tmp_path / "s" / "predictions.csv")
    assert code == 0 and staged == summary
    for name in ("masks.csv", "predictions.csv", "report.csv"):
        assert (tmp_path / "p" / name).read_bytes() == (tmp_path / "s" / name).read_bytes()


def test_predictions_do_not_depend_on_worker_count(workspace, tmp_path, capsys):
    _, manifest, seg, cls = workspace
    for workers in (1, 3):
        assert _run(capsys, "grade", "--out", tmp_path / str(workers), "--manifest", manifest, "--patch", 8,
                    "--seg-ckpt", seg, "--cls-ckpt", cls, "--workers", workers)[0] == 0
    assert _tree(tmp_path / "1") == _tree(tmp_path / "3")


def test_preprocess_writes_a_loadable_manifest(workspace, tmp_path, capsys):
    _, manifest, _, _ = workspace
    code, out, _ = _run(capsys, "preprocess", "--out", tmp_path, "--manifest", manifest, "--spacing", "2")
    assert code == 0
    cases = [d.load() for d in load_manifest(out.strip())]
    assert len(cases) == 4 and cases[0].dims == (8, 8, 8) and cases[0].spacing == (2.0, 2.0, 2.0)
