import json

import numpy as np
import pytest

from mtcm import checkpoint as ck
from mtcm import cli
from mtcm import evaluate as ev
from mtcm import model as mm
from mtcm import pipeline as pl
from mtcm import synth

SMALL = ["--n_train=3", "--n_eval=2", "--scene.frames=4", "--model.channels=16",
         "--codebook.channels=16", "--codebook.rff_features=8", "--train.epochs=[1,1,1]"]


def small_model(seed=0):
    cb = synth.Codebook(synth.CodebookConfig(channels=16, rff_features=8))
    cfg = pl.ModelConfig(mtcm=mm.MtcmConfig(channels=16, aligner_layers=1, mce_layers=1), seed=seed)
    return pl.Model(cfg, cb)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = small_model(3)
    ck.save_checkpoint(model, tmp_path / "a", {"proxy": "proxy"})
    back, manifest = ck.load_checkpoint(tmp_path / "a")
    for name, t in model.named_parameters().items():
        assert np.array_equal(back.named_parameters()[name].data, t.data)
    assert back.cfg == model.cfg and back.codebook.cfg == model.codebook.cfg
    ck.save_checkpoint(back, tmp_path / "b", {"proxy": "proxy"})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    ja = json.loads((tmp_path / "a.json").read_text())
    jb = json.loads((tmp_path / "b.json").read_text())
    assert ja.pop("payload") == "a.bin" and jb.pop("payload") == "b.bin"
    assert ja == jb


def test_payload_length_matches_shapes(tmp_path):
    model = small_model()
    ck.save_checkpoint(model, tmp_path / "m.v1")  # dots in the name are kept
    m = ck.read_manifest(tmp_path / "m.v1")
    expected = 8 * sum(t.data.size for t in model.named_parameters().values())
    assert m["payload_bytes"] == expected == (tmp_path / "m.v1.bin").stat().st_size
    assert [p["name"] for p in m["params"]] == list(model.named_parameters())


def test_truncated_payload_is_rejected(tmp_path):
    ck.save_checkpoint(small_model(), tmp_path / "m")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="bytes"):
        ck.load_checkpoint(tmp_path / "m")
    with pytest.raises(ValueError):
        ck.read_manifest(_not_a_checkpoint(tmp_path))


def _not_a_checkpoint(tmp_path):
    p = tmp_path / "other.json"
    p.write_text('{"format": "something-else"}')
    return p


# ---------------------------------------------------------------- config

def test_overrides_parse_json_and_reject_unknown_keys():
    cfg = cli.load_config(None, ["--train.epochs=[2,3,4]", "--seed=9", "--train.strategy=false",
                                 "--scene.layout=free"])
    assert cfg["train"]["epochs"] == [2, 3, 4] and cfg["seed"] == 9
    assert cfg["train"]["strategy"] is False and cfg["scene"]["layout"] == "free"
    assert cli.DEFAULTS["seed"] == 0  # defaults untouched
    for bad in (["--train.nope=1"], ["--nosection.x=1"], ["seed=1"], ["--seed"]):
        with pytest.raises(SystemExit):
            cli.load_config(None, bad)


def test_config_file_then_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 4, "train": {"lr": 0.01}}))
    cfg = cli.load_config(f, ["--train.lr=0.5"])
    assert cfg["seed"] == 4 and cfg["train"]["lr"] == 0.5 and cfg["train"]["batch_size"] == 2


def test_output_dir_resolution(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "env"))
    assert cli.output_dir(tmp_path / "x") == tmp_path / "x"
    assert cli.output_dir() == tmp_path / "env"
    monkeypatch.delenv(cli.RUNS_ENV)
    monkeypatch.chdir(tmp_path)
    out = cli.output_dir()
    assert out.parent.name == "runs" and out.is_dir()


# ---------------------------------------------------------------- commands

@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert cli.main(["gen", "--out", str(root)] + SMALL) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root), "--quiet"] + SMALL) == 0
    return root


def test_train_writes_stage_checkpoints(run):
    names = sorted(p.name for p in (run / "checkpoints").glob("*.json"))
    assert names == ["final.json", "stage1-proxy.json", "stage2-aligner.json", "stage3-mce.json"]
    log = [json.loads(line) for line in (run / "loss.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in log] == ["proxy", "aligner", "mce"]
    m = ck.read_manifest(run / "checkpoints" / "final")
    stages = {p["module"]: p["stage"] for p in m["params"]}
    assert stages == {"proxy": "proxy", "head": "proxy", "aligner": "aligner", "mce": "mce"}
    s1 = ck.read_manifest(run / "checkpoints" / "stage1-proxy")
    assert {p["stage"] for p in s1["params"] if p["module"] == "mce"} == {None}


def test_eval_writes_report_and_masks(run, capsys):
    out = run / "ev"
    code = cli.main(["eval", "--checkpoint", str(run / "checkpoints" / "final.json"),
                     "--data", str(run / "data"), "--out", str(out), "--dump-masks"])
    assert code == 0
    lines = [json.loads(x) for x in (out / "report.jsonl").read_text().splitlines()]
    assert [x["kind"] for x in lines] == ["scene", "scene", "aggregate"]
    agg = lines[-1]
    assert agg["JF"] == (agg["J"] + agg["F"]) / 2
    masks = sorted((out / "masks").glob("*.npy"))
    assert len(masks) == 2 and np.load(masks[0]).shape == (4, 32, 32)
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["scenes"] == 2


def test_eval_exits_nonzero_on_nan(run, monkeypatch):
    real = ev.evaluate_model

    def poisoned(*a, **kw):
        rep = real(*a, **kw)
        rep.scenes[0]["J"] = float("nan")
        return ev.summarize(rep.scenes, rep.fingerprint)

    monkeypatch.setattr(ev, "evaluate_model", poisoned)
    code = cli.main(["eval", "--checkpoint", str(run / "checkpoints" / "final"),
                     "--data", str(run / "data"), "--out", str(run / "nan")])
    assert code == 2


def test_inspect_checkpoint_and_dataset(run, capsys):
    assert cli.main(["inspect", str(run / "checkpoints" / "final.bin")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("checkpoint v1") and "aligner" in out
    assert cli.main(["inspect", str(run / "data"), "--json"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("dataset v1") and '"mtcm-scenes"' in out
    with pytest.raises(SystemExit):
        cli.main(["inspect", str(_not_a_checkpoint(run))])


def test_eval_rejects_codebook_mismatch(run, tmp_path):
    other = tmp_path / "d"
    assert cli.main(["gen", "--out", str(other)] + SMALL + ["--codebook.seed=8"]) == 0
    with pytest.raises(SystemExit):
        cli.main(["eval", "--checkpoint", str(run / "checkpoints" / "final"),
                  "--data", str(other / "data"), "--out", str(tmp_path / "e")])
