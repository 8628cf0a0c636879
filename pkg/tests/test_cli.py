import csv
import json

import numpy as np
import pytest

from psselect import cli, gradsuite
from psselect.autodiff import Tensor
from psselect.networks import NetworkSpec, build_network, save_checkpoint
from psselect.stack import read_mask, read_pgm, read_stack

SMALL_SCENE = {"width": 48, "height": 40, "n_ifgs": 6, "seed": 3}
PS_ONLY = dict(velocity=0.0, atmosphere_std=0.0, orbit_ramp_std=0.0, dem_error_sc_std=0.0,
               ps_noise_std=0.0, nonps_noise_std=0.0, ps_amp_dispersion=0.0)


def _json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    cfg = _json(root / "scene.json", SMALL_SCENE)
    assert cli.main(["--out", str(root / "data"), "synth", "--config", cfg]) == cli.EXIT_OK
    return root / "data"


# ---------------------------------------------------------------- synth

def test_synth_outputs(scene):
    names = {p.name for p in scene.iterdir()}
    assert {"stack.ifg", "truth.psm", "truth.json", "truth.npz", "manifest.json"} <= names
    assert (scene / "stack.ifg").read_bytes().startswith(b"IFGSTACK1")
    assert read_stack(scene / "stack.ifg").phase.shape == (6, 40, 48)
    assert read_mask(scene / "truth.psm").labels.shape == (40, 48)
    man = _manifest(scene)
    assert man["command"] == "synth" and man["exit_code"] == 0 and man["seed"] == 3
    assert set(man["outputs"]) == {"stack.ifg", "truth.psm", "truth.json", "truth.npz"}


def test_synth_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"width": 10,\n "height": }')
    assert cli.main(["--out", str(tmp_path), "synth", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_synth_invalid_field(tmp_path):
    cfg = _json(tmp_path / "c.json", {"width": 0})
    assert cli.main(["--out", str(tmp_path), "synth", "--config", cfg]) == cli.EXIT_CONFIG
    assert _manifest(tmp_path)["exit_code"] == cli.EXIT_CONFIG


def test_synth_seed_flag_overrides_config(tmp_path):
    cfg = _json(tmp_path / "c.json", SMALL_SCENE)
    cli.main(["--seed", "9", "--out", str(tmp_path / "a"), "synth", "--config", cfg])
    assert _manifest(tmp_path / "a")["config"]["seed"] == 9


def test_bad_thread_count(tmp_path):
    assert cli.main(["--threads", "0", "--out", str(tmp_path), "gradcheck"]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- classical

def test_classical_outputs_and_duration(scene, tmp_path):
    out = tmp_path / "cl"
    code = cli.main(["--out", str(out), "classical", str(scene / "stack.ifg")])
    assert code == cli.EXIT_OK
    man = _manifest(out)
    assert man["duration_s"] > 0 and man["n_candidates"] > 0
    assert {"mask.psm", "candidates.csv"} <= set(man["outputs"])
    rows = list(csv.reader(open(out / "candidates.csv")))
    assert len(rows) - 1 == man["n_candidates"]


def test_classical_noise_free_mask_equals_candidates(tmp_path):
    cfg = _json(tmp_path / "c.json", {"width": 24, "height": 20, "n_ifgs": 6, "seed": 1, **PS_ONLY})
    cli.main(["--out", str(tmp_path / "d"), "synth", "--config", cfg])
    out = tmp_path / "cl"
    assert cli.main(["--out", str(out), "classical", str(tmp_path / "d" / "stack.ifg")]) == cli.EXIT_OK
    mask = read_mask(out / "mask.psm").labels
    cand = np.zeros_like(mask)
    for row in csv.DictReader(open(out / "candidates.csv")):
        cand[int(row["row"]), int(row["col"])] = True
    assert np.array_equal(mask, cand)


def test_classical_empty_candidates(scene, tmp_path):
    cfg = _json(tmp_path / "c.json", {"d_a_threshold": 1e-9})
    out = tmp_path / "cl"
    with pytest.warns(RuntimeWarning):
        code = cli.main(["--out", str(out), "classical", str(scene / "stack.ifg"), "--config", cfg])
    assert code == cli.EXIT_EMPTY
    assert read_mask(out / "mask.psm").count == 0
    assert _manifest(out)["exit_code"] == cli.EXIT_EMPTY


def test_classical_missing_stack(tmp_path):
    assert cli.main(["--out", str(tmp_path), "classical", str(tmp_path / "nope.ifg")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- train / predict

@pytest.mark.parametrize("kind,lr,epochs", [("clstm_iss", 0.001, 300), ("cnn_iss", 0.01, 400)])
def test_train_defaults_recorded(scene, tmp_path, kind, lr, epochs):
    out = tmp_path / kind
    args = ["--out", str(out), "train", str(scene), "--kind", kind, "--patch-size", "16",
            "--filters", "2,2", "--epochs", "2", "--patience", "1"]
    assert cli.main(args) == cli.EXIT_OK
    man = _manifest(out)
    assert man["config"]["train"]["lr"] == lr
    assert {"model.psnet", "history.csv"} <= set(man["outputs"])
    # without overrides the per-kind defaults apply
    from psselect.trainer import TrainConfig
    assert TrainConfig.for_kind(kind).epochs == epochs and TrainConfig.for_kind(kind).lr == lr


def test_train_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    assert "400" in text and "300" in text and "0.001" in text


def test_train_missing_dataset(tmp_path):
    code = cli.main(["--out", str(tmp_path), "train", str(tmp_path / "missing")])
    assert code == cli.EXIT_CONFIG


def test_train_bad_filters(scene, tmp_path):
    code = cli.main(["--out", str(tmp_path), "train", str(scene), "--filters", "a,b"])
    assert code == cli.EXIT_CONFIG


def test_predict_zero_checkpoint_is_uniform_half(scene, tmp_path):
    net = build_network(NetworkSpec(kind="clstm_iss", filter_plan=(2, 2), input_patch=16), seed=0)
    net.zero_()
    ck = tmp_path / "zero.psnet"
    save_checkpoint(net, ck)
    out = tmp_path / "pred"
    assert cli.main(["--out", str(out), "predict", str(ck), str(scene / "stack.ifg")]) == cli.EXIT_OK
    prob = read_pgm(out / "prob.pgm")
    assert prob.shape == (40, 48)
    assert np.abs(prob - 0.5).max() <= 1 / 65535
    assert read_mask(out / "mask.psm").labels.all()
    assert _manifest(out)["duration_s"] > 0


def test_predict_bad_checkpoint(scene, tmp_path):
    ck = tmp_path / "junk.psnet"
    ck.write_bytes(b"junk")
    assert cli.main(["--out", str(tmp_path), "predict", str(ck), str(scene / "stack.ifg")]) == cli.EXIT_CONFIG


# ---------------------------------------------------------------- eval

def test_eval_reports(scene, tmp_path):
    truth = scene / "truth.psm"
    out = tmp_path / "ev"
    code = cli.main(["--out", str(out), "eval", str(scene / "stack.ifg"), str(truth), str(truth),
                     "--truth", str(truth), "--landcover", str(scene / "truth.json"),
                     "--names", "a,b"])
    assert code == cli.EXIT_OK
    rows = list(csv.DictReader(open(out / "overlap.csv")))
    assert any(r["mask_a"] == "a" and r["mask_b"] == "b" and float(r["percent_of_a"]) == 100.0 for r in rows)
    header = (out / "truth_metrics.csv").read_text().splitlines()[0]
    assert "precision" in header and "recall" in header
    assert len((out / "stip_hist_a.csv").read_text().splitlines()) == 125 + 1


def test_eval_names_mismatch(scene, tmp_path):
    truth = str(scene / "truth.psm")
    code = cli.main(["--out", str(tmp_path), "eval", str(scene / "stack.ifg"), truth, "--names", "a,b"])
    assert code == cli.EXIT_CONFIG


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_injected_wrong_backward(tmp_path, monkeypatch, capsys):
    from psselect.autodiff.tensor import _result

    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)

    def bad():
        def backward(g):
            x._accumulate(g * 0.5 * np.ones(2))  # should be 2x
        return _result(np.float64((x.data ** 2).sum()), (x,), backward)

    def good():
        return (x * x).sum()

    monkeypatch.setattr(gradsuite, "default_cases", lambda: {"good": (good, [x], None), "bad": (bad, [x], None)})
    assert cli.main(["--out", str(tmp_path), "gradcheck"]) == cli.EXIT_NUMERIC
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "case,max_rel_error,n_checked,passed"
    assert lines[1].startswith("good,") and lines[1].endswith(",1")
    assert lines[2].startswith("bad,") and lines[2].endswith(",0")
    assert _manifest(tmp_path)["failed"] == ["bad"]
    assert "FAIL bad" in capsys.readouterr().out


# ---------------------------------------------------------------- determinism

def _checksums(out):
    return _manifest(out)["outputs"]


def test_synth_and_classical_deterministic_across_threads(tmp_path):
    cfg = _json(tmp_path / "c.json", SMALL_SCENE)
    sums = []
    for i, threads in enumerate(("1", "4", "1")):
        d = tmp_path / f"run{i}"
        cli.main(["--seed", "5", "--threads", threads, "--out", str(d / "s"), "synth", "--config", cfg])
        cli.main(["--threads", threads, "--out", str(d / "c"), "classical", str(d / "s" / "stack.ifg")])
        sums.append((_checksums(d / "s"), _checksums(d / "c")))
    assert sums[0] == sums[1] == sums[2]
