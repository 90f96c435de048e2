"""Config validation, the pipeline's artifacts and determinism, and CLI exit codes."""
import json

import pytest

from atpfl import cli, config
from atpfl.errors import ConfigError
from atpfl.pipeline import run_pipeline

SMALL = {
    "name": "small",
    "seed": 3,
    "population": {"n_sources": 8, "n_targets": 3, "shift": {
        "kind": "hybrid", "num_classes": 4, "dim": 6, "major_classes": 1, "major_count": 40,
        "minor_classes": 3, "minor_count": 10, "pool_per_class": 1500}},
    "model": {"hidden": [8]},
    "pretrain": {"rounds": 8, "cohort": 8, "lr": 0.05, "batch_size": 10},
    "atp": {"rounds": 4, "cohort": 4, "eta": 0.2, "batch_size": 10},
    "eval": {"batch_size": 10, "methods": ["none", "atp-batch", "atp-online", "bn-adapt",
                                           "tent", "em"], "tent_lr": [0.001, 0.1]},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def _raw(**patch):
    raw = json.loads(json.dumps(SMALL))
    for dotted, v in patch.items():
        node = raw
        *head, last = dotted.split(".")
        for h in head:
            node = node[h]
        if v is None:
            del node[last]
        else:
            node[last] = v
    return raw


# -- config -----------------------------------------------------------------------

def test_reference_configs_load():
    names = config.reference_names()
    assert names == ["feature", "hybrid", "label", "none_shift"]
    cfgs = [config.reference(n) for n in names]
    assert len({c.hash() for c in cfgs}) == 4
    assert config.reference("hybrid.json").shift.kind == "hybrid"
    assert all(c.n_sources == 40 and c.n_targets == 10 for c in cfgs)


@pytest.mark.parametrize("patch,field", [
    ({"seed": None}, "<root>"),
    ({"population.shift.kind": "covariate"}, "population.shift.kind"),
    ({"atp.eta": -1}, "atp.eta"),
    ({"pretrain.cohort": 20}, "pretrain.cohort"),
    ({"eval.methods": ["memo"]}, "eval.methods.0"),
    ({"model.depth": 3}, "model"),
])
def test_invalid_config_names_field(patch, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config.from_dict(_raw(**patch))


def test_override_and_hash(small_config):
    cfg = config.load(small_config)
    other = config.override(cfg, **{"atp.eta": 0.5, "seed": 9})
    assert other.atp.eta == 0.5 and other.seed == 9 and cfg.atp.eta == 0.2
    assert other.hash() != cfg.hash()
    assert config.override(cfg, output="elsewhere").hash() == cfg.hash()
    assert config.from_dict(cfg.to_dict()).hash() == cfg.hash()


def test_missing_or_broken_config_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        config.resolve("mystery")


# -- pipeline ---------------------------------------------------------------------

CSVS = ("aggregate.csv", "atp_rounds.csv", "pretrain_rounds.csv", "alpha_modules.csv",
        "alpha_groups.csv")


def test_pipeline_artifacts_and_determinism(tmp_path, small_config):
    assert cli.main(["pipeline", "--config", str(small_config), "--jobs", "1",
                     "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["pipeline", "--config", str(small_config), "--jobs", "2",
                     "--out", str(tmp_path / "b")]) == 0
    for name in CSVS + ("alpha.json", "ledger.json", "summary.json", "checkpoint.json"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        assert a == b, name
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config_hash"] == config.load(small_config).hash()
    assert set(summary["accuracy"]) == set(SMALL["eval"]["methods"])
    evals = sorted(p.name for p in (tmp_path / "a" / "eval").iterdir())
    assert len(evals) == 3 * 6 and evals[0] == "client008_atp-batch.json"
    ledger = json.loads((tmp_path / "a" / "ledger.json").read_text())
    assert ledger["atp_scalars_per_path"] == summary["D"] + 2 * 4 * summary["d"]


def test_seed_flag_changes_results(tmp_path, small_config):
    cli.main(["pipeline", "--config", str(small_config), "--out", str(tmp_path / "a")])
    cli.main(["pipeline", "--config", str(small_config), "--seed", "4",
              "--out", str(tmp_path / "b")])
    assert ((tmp_path / "a" / "atp_rounds.csv").read_bytes()
            != (tmp_path / "b" / "atp_rounds.csv").read_bytes())


def test_output_dir_from_environment(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["pipeline", "--config", str(small_config), "--jobs", "1",
                     "--set", "atp.rounds=1"]) == 0
    assert (tmp_path / "env" / "summary.json").exists()
    cfg = json.loads((tmp_path / "env" / "config.json").read_text())
    assert cfg["atp"]["rounds"] == 1


def test_eval_subcommand_reproduces_pipeline(tmp_path, small_config, capsys):
    out = tmp_path / "run"
    cli.main(["pipeline", "--config", str(small_config), "--out", str(out)])
    assert cli.main(["eval", "--config", str(small_config), "--checkpoint",
                     str(out / "checkpoint.json"), "--alpha", str(out / "alpha.json"),
                     "--methods", "none,atp-batch,atp-online", "--out", str(tmp_path / "ev")]) == 0
    a = (out / "aggregate.csv").read_text().splitlines()
    b = (tmp_path / "ev" / "aggregate.csv").read_text().splitlines()
    assert b[1:4] == a[1:4]
    assert cli.main(["eval", "--config", str(small_config), "--checkpoint",
                     str(out / "checkpoint.json"), "--alpha", str(out / "alpha.json"),
                     "--methods", "memo"]) == cli.EXIT_CONFIG


def test_none_shift_adaptation_is_harmless(tmp_path):
    summary = run_pipeline(config.override(config.reference("none_shift"),
                                           **{"eval.methods": ["none", "atp-batch"]}),
                           tmp_path)
    acc = summary["accuracy"]
    assert abs(acc["atp-batch"] - acc["none"]) <= 0.01


# -- exit codes -------------------------------------------------------------------

def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_raw(**{"atp.cohort": 0})))
    assert cli.main(["pipeline", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "atp.cohort" in capsys.readouterr().err


def test_divergence_exit_code_names_stage(tmp_path, small_config, capsys):
    code = cli.main(["pipeline", "--config", str(small_config), "--set", "pretrain.lr=1e9",
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_NUMERIC
    assert "stage pretrain" in capsys.readouterr().err


def test_analysis_subcommands(tmp_path, capsys):
    out = ["--out", str(tmp_path)]
    assert cli.main(["analysis", "bound", "--N", "100", "--K", "4", "--d", "2"] + out) == 0
    assert "bound 8.907" in capsys.readouterr().out
    assert cli.main(["analysis", "prop31", "--p", "0.5,0.5", "--q", "0.5,0.5"] + out) == 0
    assert "identity, max deviation 0" in capsys.readouterr().out
    assert cli.main(["analysis", "prop31", "--samples", "20000"] + out) == 0
    assert cli.main(["analysis", "prop32"] + out) == 0
    assert json.loads((tmp_path / "prop32.json").read_text())["aligned"] is True
    # 50 samples: KS sampling noise alone exceeds the 0.05 alignment threshold
    assert cli.main(["analysis", "prop32", "--scale", "1", "--offset", "0", "--samples", "50"]
                    + out) == cli.EXIT_CHECK
    assert cli.main(["analysis", "toy"] + out) == 0
    assert (tmp_path / "toy.csv").read_text().startswith("alpha,accuracy,exact")
    assert cli.main(["analysis", "prop31", "--p", "1,0", "--q", "0.5,0.5"] + out) == cli.EXIT_CONFIG
