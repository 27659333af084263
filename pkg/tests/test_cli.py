import json

import pytest

from utrlab import experiments
from utrlab.cli import main
from utrlab.experiments import (
    DEFENSE_COLUMNS, HPARAM_COLUMNS, SUMMARY_COLUMNS, ConfigError, load_config, read_csv,
)

SMALL = ["model.d_hidden=32", "model.vocab_size=100", "batch_sizes=[1,2]", "rounds=2"]


def run(tmp_path, verb, *extra, out="out"):
    args = [verb, "--out", str(tmp_path / out)]
    for o in SMALL + list(extra):
        args += ["--override", o]
    return main(args)


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def meta(path):
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ")
    return json.loads(first[2:])


def test_attack_outputs(tmp_path, capsys):
    assert run(tmp_path, "attack") == 0
    out = tmp_path / "out" / "attack"
    assert capsys.readouterr().out.strip() == str(out / "summary.csv")
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[1] == ",".join(SUMMARY_COLUMNS)
    rows = read_csv(out / "summary.csv")
    assert [(r["batch_size"], r["round"]) for r in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert all(float(r["R1"]) == 100.0 and r["seconds"] == "0.0" for r in rows)
    assert sorted(p.name for p in (out / "reports").iterdir()) == [
        "b001_r00.json", "b001_r01.json", "b002_r00.json", "b002_r01.json"]
    report = json.loads((out / "reports" / "b002_r01.json").read_text())
    assert report["experiment"]["batch_size"] == 2 and report["timings"] == {}


def test_config_echo(tmp_path):
    assert run(tmp_path, "attack") == 0
    m = meta(tmp_path / "out" / "attack" / "summary.csv")
    assert m["format"] == "utrlab-attack-summary" and m["version"] == 1
    cfg = load_config(None, SMALL, output_dir=str(tmp_path / "out"))
    assert m["config"] == json.loads(json.dumps(cfg.to_dict()))
    assert m["config"]["attack"]["end_token"] == 99


def _without_n_jobs(blobs):
    out = {}
    for k, v in blobs.items():
        if k.endswith(".csv"):
            head, body = v.split(b"\n", 1)
            m = json.loads(head[2:])
            m["config"]["n_jobs"] = 0
            out[k] = (m, body)
        else:
            d = json.loads(v)
            d["experiment"]["config"]["n_jobs"] = 0
            out[k] = d
    return out


def test_determinism_including_parallel(tmp_path):
    assert run(tmp_path, "attack") == 0
    first = files(tmp_path / "out")
    assert run(tmp_path, "attack") == 0
    assert files(tmp_path / "out") == first
    # n_jobs is echoed in the metadata; everything else must be byte-identical
    assert run(tmp_path, "attack", "n_jobs=2") == 0
    parallel = files(tmp_path / "out")
    assert _without_n_jobs(parallel) == _without_n_jobs(first)
    assert run(tmp_path, "attack", "n_jobs=2") == 0
    assert files(tmp_path / "out") == parallel


def test_seed_changes_batches(tmp_path):
    assert main(["attack", "--seed", "1", "--out", str(tmp_path / "s1")] + sum((["--override", o] for o in SMALL), [])) == 0
    assert run(tmp_path, "attack", out="s0") == 0
    a = (tmp_path / "s0" / "attack" / "reports" / "b002_r00.json").read_text()
    b = (tmp_path / "s1" / "attack" / "reports" / "b002_r00.json").read_text()
    assert json.loads(a)["sentences"] != json.loads(b)["sentences"]


def test_defense_sweep(tmp_path):
    assert run(tmp_path, "defense-sweep", "sweep.sigmas=[0.0]", "sweep.prune_rates=[0.0, 0.999]") == 0
    path = tmp_path / "out" / "defense" / "defense_sweep.csv"
    assert path.read_text().splitlines()[1] == ",".join(DEFENSE_COLUMNS)
    rows = read_csv(path)
    assert [(r["defense"], r["parameter"]) for r in rows] == [("dp", "0.0"), ("prune", "0.0"), ("prune", "0.999")]
    assert rows[0]["success_rate"] == rows[1]["success_rate"] == "1.0"
    assert float(rows[2]["success_rate"]) == 0.0
    assert all(r["runs"] == "4" for r in rows)


def test_hparam_sweep(tmp_path):
    assert run(tmp_path, "hparam-sweep", "sweep.reduction_factors=[2,4]", "sweep.epsilons=[1e-3]") == 0
    path = tmp_path / "out" / "hparam" / "hparam_sweep.csv"
    assert path.read_text().splitlines()[1] == ",".join(HPARAM_COLUMNS)
    rows = read_csv(path)
    assert [(r["sweep"], r["batch_size"]) for r in rows] == [
        ("reduction_factor", "1"), ("reduction_factor", "1"), ("epsilon", "1"),
        ("reduction_factor", "2"), ("reduction_factor", "2"), ("epsilon", "2")]
    assert all(r["runs"] == "2" for r in rows)


def test_capacity(tmp_path):
    assert run(tmp_path, "capacity", "capacity.batch_sizes=[1,8]", "capacity.rounds=2") == 0
    rows = read_csv(tmp_path / "out" / "capacity" / "capacity.csv")
    assert len(rows) == 4
    for r in rows:
        assert int(r["k"]) <= int(r["rank"]) <= int(r["kmax"])


def test_config_file_and_corpus(tmp_path):
    (tmp_path / "c.txt").write_text("the cat sat\na dog ran far\nbirds fly\n")
    (tmp_path / "exp.toml").write_text(
        'corpus_path = "c.txt"\nbatch_sizes = [2]\nrounds = 1\n[model]\nd_hidden = 32\nvocab_size = 20\n')
    assert main(["attack", "--config", str(tmp_path / "exp.toml"), "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "attack" / "summary.csv")
    assert rows[0]["R1"] == "100.0"
    too_many = ["attack", "--config", str(tmp_path / "exp.toml"), "--out", str(tmp_path / "o2"),
                "--override", "batch_sizes=[5]"]
    assert main(too_many) == 2


@pytest.mark.parametrize("argv", [
    ["attack", "--override", "model.nope=1"],
    ["attack", "--override", "nonsense"],
    ["attack", "--override", "attack.mode=\"unidirectional\""],
    ["attack", "--override", "update_precision=\"float16\""],
    ["attack", "--override", "corpus_path=\"/no/such/file\""],
    ["attack", "--override", "model.reduction_factor=3"],
    ["attack", "--config", "/no/such/config.toml"],
    ["attack", "--override", "attack.filter_grammar=true"],
    ["frobnicate"],
    [],
])
def test_config_errors_exit_1(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)] if argv and argv[0] == "attack" else argv) == 1
    assert capsys.readouterr().err


def test_runtime_error_exits_2(tmp_path, capsys):
    # more sentences than the position budget can hold
    assert run(tmp_path, "attack", "batch_sizes=[64]") == 2
    assert "attack failed" in capsys.readouterr().err


def test_override_parsing():
    cfg = load_config(None, ["model.d_hidden=32", "attack.epsilon_la=1e-2", "sweep.epsilons=[0.5]"])
    assert cfg.model.d_hidden == 32 and cfg.attack.epsilon_la == 0.01 and cfg.sweep.epsilons == (0.5,)
    with pytest.raises(ConfigError):
        load_config(None, ["model=3", "model.d_hidden=2"])
    with pytest.raises(ConfigError):
        load_config(None, ["end_marker=false", "attack.end_token=4"])
    assert load_config(None, ["end_marker=false"]).attack.end_token is None
    assert experiments.load_config(None, seed=7).seed == 7
