import json
import os

import pytest
from PIL import Image

from superguide.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, parse_prompt_variants
from superguide.evaluation import read_report

SPEC = "seed=3\ntrain_size=64\nval_size=16\ntest_size=16\n"
CFG = "epochs=2\nbatch_size=16\nlambda1=0.01\nlambda2=0.01\nseed=1\n"
JTT = "jtt_id_epochs=1\njtt_id_lr=1e-3\njtt_upweight=100\n"


@pytest.fixture
def ws(tmp_path, monkeypatch):
    monkeypatch.delenv("SUPER_CACHE_DIR", raising=False)
    (tmp_path / "tiny.spec").write_text(SPEC)
    (tmp_path / "tiny.cfg").write_text(CFG)
    assert main(["generate", "--spec", str(tmp_path / "tiny.spec"), "--out", str(tmp_path / "data")]) == EXIT_OK
    return tmp_path


def _train(ws, out, *extra):
    return main(["train", "--data", str(ws / "data"), "--config", str(ws / "tiny.cfg"), "--out", str(ws / out), *extra])


def _manifest(path):
    with open(os.path.join(path, "manifest.jsonl")) as f:
        return [json.loads(l) for l in f]


def test_generate_and_determinism(ws, capsys):
    assert main(["generate", "--spec", str(ws / "tiny.spec"), "--out", str(ws / "again")]) == EXIT_OK
    assert "split,label,attribute,count" in capsys.readouterr().out
    assert (ws / "data" / "metadata.csv").read_bytes() == (ws / "again" / "metadata.csv").read_bytes()
    assert len(_manifest(ws / "data")) == 1


def test_generate_bad_rho(ws, capsys):
    (ws / "bad.spec").write_text("correlation_ratio=1.3\n")
    assert main(["generate", "--spec", str(ws / "bad.spec"), "--out", str(ws / "bad")]) == EXIT_USAGE
    assert "correlation_ratio" in capsys.readouterr().err
    assert not (ws / "bad").exists()


def test_refuses_overwrite_without_force(ws):
    assert main(["generate", "--spec", str(ws / "tiny.spec"), "--out", str(ws / "data")]) == EXIT_USAGE
    assert main(["generate", "--spec", str(ws / "tiny.spec"), "--out", str(ws / "data"), "--force"]) == EXIT_OK
    assert len(_manifest(ws / "data")) == 2  # append-only


def test_train_outputs(ws):
    assert _train(ws, "run") == EXIT_OK
    for name in ("checkpoint.pt", "loss_log.csv", "epochs.csv", "val_report.csv", "manifest.jsonl"):
        assert (ws / "run" / name).is_file()
    log = (ws / "run" / "loss_log.csv").read_text().splitlines()
    assert log[0] == "epoch,batch,ce1,ce2,beta,att,reg,total" and len(log) == 1 + 2 * 4
    (rec,) = _manifest(ws / "run")
    assert rec["command"] == "train" and rec["seed"] == 1 and rec["config"]["epochs"] == 2
    assert _train(ws, "run") == EXIT_USAGE


def test_train_vlm_without_cache(ws, capsys):
    assert _train(ws, "run", "--guidance", "vlm") == EXIT_USAGE
    assert "vlm" in capsys.readouterr().err


def test_train_vlm_with_cache(ws):
    args = ["cache-guidance", "--data", str(ws / "data"), "--guidance", "vlm", "--config", str(ws / "tiny.cfg")]
    assert main(args) == EXIT_OK
    assert _train(ws, "run", "--guidance", "vlm") == EXIT_OK


def test_cache_dir_env(ws, monkeypatch):
    monkeypatch.setenv("SUPER_CACHE_DIR", str(ws / "elsewhere"))
    assert _train(ws, "run") == EXIT_OK
    assert (ws / "elsewhere" / "oracle" / "KEY.json").is_file()
    assert not (ws / "data" / "guidance_cache").exists()


def test_jtt_requires_keys(ws):
    assert _train(ws, "run", "--jtt") == EXIT_USAGE
    (ws / "tiny.cfg").write_text(CFG + JTT)
    assert _train(ws, "run2", "--jtt") == EXIT_OK
    assert (ws / "run2" / "jtt_ids.txt").is_file()


def test_detach_alpha_flag_recorded(ws):
    assert _train(ws, "run", "--detach-alpha") == EXIT_OK
    assert _manifest(ws / "run")[0]["config"]["detach_alpha"] is True


def test_nonfinite_exit_3(ws, capsys):
    (ws / "tiny.cfg").write_text(CFG.replace("lambda1=0.01", "lambda1=1e308").replace("lambda2=0.01", "lambda2=1e308"))
    assert _train(ws, "run") == EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def test_evaluate(ws):
    assert _train(ws, "run") == EXIT_OK
    ck = str(ws / "run" / "checkpoint.pt")
    for out in ("ev1", "ev2"):
        assert main(["evaluate", "--data", str(ws / "data"), "--checkpoint", ck, "--split", "test", "--out", str(ws / out)]) == EXIT_OK
    assert (ws / "ev1" / "report.csv").read_bytes() == (ws / "ev2" / "report.csv").read_bytes()
    rep = read_report(ws / "ev1" / "report.csv")
    assert rep.split == "test" and len(rep.per_group_acc) == 4
    assert main(["evaluate", "--data", str(ws / "data"), "--checkpoint", ck, "--split", "dev", "--out", str(ws / "ev3")]) == EXIT_USAGE


def test_export_maps(ws):
    assert _train(ws, "run") == EXIT_OK
    ck = str(ws / "run" / "checkpoint.pt")
    base = ["export-maps", "--data", str(ws / "data"), "--checkpoint", ck, "--ids", "test000001"]
    assert main(base + ["--out", str(ws / "m1")]) == EXIT_OK
    assert main(base + ["--out", str(ws / "m2")]) == EXIT_OK
    pngs = sorted(n for n in os.listdir(ws / "m1") if n.endswith(".png"))
    assert pngs == [f"test000001_{k}.png" for k in ("guidance", "head1", "head2", "original")]
    for n in pngs:
        assert (ws / "m1" / n).read_bytes() == (ws / "m2" / n).read_bytes()
        with Image.open(ws / "m1" / n) as im:
            assert im.size == (16, 16)
    bad = ["export-maps", "--data", str(ws / "data"), "--checkpoint", ck, "--ids", "nope", "--out", str(ws / "m3")]
    assert main(bad) == EXIT_USAGE


def test_ablate_beta(ws):
    args = ["ablate", "--data", str(ws / "data"), "--config", str(ws / "tiny.cfg"), "--out", str(ws / "abl")]
    assert main(args + ["--param", "beta", "--values", "1,4"]) == EXIT_OK
    deltas = (ws / "abl" / "deltas.csv").read_text().splitlines()
    assert deltas[0] == "param,value,reference,delta_worst_pct,delta_average_pct" and len(deltas) == 2
    seeds = {_manifest(ws / "abl" / f"run{i:02d}")[0]["seed"] for i in range(2)}
    betas = [_manifest(ws / "abl" / f"run{i:02d}")[0]["config"]["beta"] for i in range(2)]
    assert seeds == {1} and betas == [1.0, 4.0]
    assert main(args[:-1] + [str(ws / "abl2"), "--param", "beta", "--values", ","]) == EXIT_USAGE


def test_ablate_prompts(ws):
    (ws / "variants.txt").write_text("n1: a shape\nn2: a shape | a photo of a shape\n")
    args = [
        "ablate", "--data", str(ws / "data"), "--config", str(ws / "tiny.cfg"), "--out", str(ws / "abl"),
        "--guidance", "vlm", "--param", "prompts", "--values", str(ws / "variants.txt"),
    ]
    assert main(args) == EXIT_OK
    runs = (ws / "abl" / "runs.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in runs[1:]] == ["n1", "n2"]
    prompts = [_manifest(ws / "abl" / f"run{i:02d}")[0]["config"]["prompts"] for i in range(2)]
    assert prompts == [["a shape"], ["a shape", "a photo of a shape"]]


def test_prompt_variants_parser(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("# variants\nn1: a bird\nn2: a bird | a photo of a bird\n")
    v = parse_prompt_variants(p)
    assert [n for n, _ in v] == ["n1", "n2"] and len(v[1][1]) == 2


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == EXIT_USAGE
