import json
import subprocess
import sys

import pytest

from collapse_lab.cli import dumps17, main


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


UNIFORM = """
[data]
n_c = 3
s_c = 400
L = 15
K = {K}
seed = 0
[theory]
d = 100
lam = 0.001
types = ["I", "II"]
"""

TINY = """
[data]
n_c = 2
s_c = 2
L = 2
K = {K}
distribution = "{dist}"
seed = 1
[verify]
d = 4
lam = 0.01
n_fd = 2
"""

TRAIN = """
[data]
n_c = 2
s_c = 3
L = 4
K = 8
seed = 5
[train]
kind = "both"
d = 6
learning_rate = 0.5
batch_size = 8
n_spl = 4
max_epochs = 15
n_test = 5
"""


def load(path):
    return json.loads(open(path).read())


@pytest.mark.parametrize("K,c", [(1000, 1.42214), (50, 0.61602)])
def test_theory_constants(tmp_path, K, c):
    rc = main(["theory", "--config", write(tmp_path, UNIFORM.format(K=K)), "--out", str(tmp_path / "o")])
    assert rc == 0
    pred = load(tmp_path / "o" / "prediction.json")
    assert pred["type_I"]["c"] == pytest.approx(c, abs=1e-5)
    assert "created" in pred["metadata"]


def test_theory_zipf_small_radii_ordered(tmp_path):
    cfg = TINY.format(K=4, dist="zipf").replace("[verify]", "[theory]")
    assert main(["theory", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 0
    r = load(tmp_path / "o" / "prediction.json")["type_III"]["radii"]
    assert r[0] > r[1]


def test_theory_full_scale_zipf_violates_bound(tmp_path):
    cfg = UNIFORM.format(K=1000).replace("seed = 0", 'seed = 0\ndistribution = "zipf"').replace('["I", "II"]', '["III"]')
    assert main(["theory", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3


def test_missing_config(tmp_path, capsys):
    assert main(["theory", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["[data]\nn_c = 2\n", "[data\n", "[data]\nn_c=2\ns_c=2\nL=2\nK=9\nseed=0\n"])
def test_invalid_configs(tmp_path, text):
    assert main(["verify", "--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 2


def test_seed_required(tmp_path):
    cfg = TINY.format(K=4, dist="uniform").replace("seed = 1\n", "")
    assert main(["verify", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["verify", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0


def test_verify_full_instance_passes(tmp_path):
    assert main(["verify", "--config", write(tmp_path, TINY.format(K=4, dist="uniform")), "--out", str(tmp_path)]) == 0
    checks = load(tmp_path / "verify.json")["checks"]
    assert all(c.get("passed", True) for c in checks.values())
    assert checks["closed_form"]["passed"] and checks["criticality"]["passed"]


def test_verify_random_subset_fails_symmetry(tmp_path):
    assert main(["verify", "--config", write(tmp_path, TINY.format(K=3, dist="uniform")), "--out", str(tmp_path)]) == 1
    sym = load(tmp_path / "verify.json")["checks"]["symmetry"]
    assert sym["passed"] is False and sym["n_violations"] > 0


def test_verify_corrupted_weights(tmp_path):
    bad = tmp_path / "w.bin"
    bad.write_bytes(b"not weights at all")
    cfg = write(tmp_path, TINY.format(K=4, dist="uniform"))
    assert main(["verify", "--config", cfg, "--out", str(tmp_path), "--weights", str(bad)]) == 2


def test_train_report_roundtrip_and_idempotence(tmp_path):
    cfg = write(tmp_path, TRAIN)
    outs = []
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    for f in ("weights_plain.bin", "weights_layernorm.bin", "history_plain.csv", "words_layernorm.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    ra, rb = load(outs[0] / "report.json"), load(outs[1] / "report.json")
    ra.pop("metadata"), rb.pop("metadata")
    assert ra == rb
    assert set(ra["runs"]) == {"plain", "layernorm"}
    assert 0 <= ra["runs"]["plain"]["test_acc"] <= 1
    assert main(["report", "--config", cfg, "--out", str(tmp_path / "r"),
                 "--weights", str(outs[0] / "weights_layernorm.bin")]) == 0
    rep = load(tmp_path / "r" / "collapse_report.json")
    assert rep["kind"] == "layernorm" and "collapse_layernorm" in rep


def test_train_rejects_unknown_kind(tmp_path):
    cfg = write(tmp_path, TRAIN.replace('"both"', '"deep"'))
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_dumps17_roundtrip():
    x = {"a": 0.1, "b": [1 / 3, 2.0, 7], "c": None, "d": float("nan"), "e": "s"}
    back = json.loads(dumps17(x))
    assert back["a"] == 0.1 and back["b"] == [1 / 3, 2.0, 7] and back["d"] is None
    assert "0.10000000000000001" in dumps17(x)


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "collapse_lab.cli", "theory", "--config", str(tmp_path / "x.toml")],
                         capture_output=True, text=True)
    assert out.returncode == 2


def test_bad_threads(tmp_path):
    assert main(["theory", "--config", write(tmp_path, UNIFORM.format(K=50)), "--threads", "0"]) == 2
