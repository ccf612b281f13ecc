import json
from importlib import resources

import jsonschema
import pytest

from normvae.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, build_parser, main

SMALL_COHORT = {
    "counts": {"CN": 60, "SMC": 10, "EMCI": 12, "LMCI": 12, "AD": 14},
    "n_regions": 6,
    "n_disease_regions": 2,
}
SMALL_NET = ["--epochs", "8", "--latent-dim", "2", "--hidden-dim", "8", "--hidden-layers", "2",
             "--batch-size", "16", "--lr", "1e-3", "--mc-samples", "10"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "synth.json"
    cfg.write_text(json.dumps(SMALL_COHORT))
    assert run("synth", "--seed", 2, "--config", cfg, "-o", d / "c.csv") == EXIT_OK
    assert run("train", d / "c.csv", "--seed", 1, "-o", d / "m.ndev", *SMALL_NET) == EXIT_OK
    assert run("deviate", d / "m.ndev", d / "c.csv", "-o", d / "n.csv") == EXIT_OK
    assert run("eval", d / "n.csv", d / "c.csv", "--model", d / "m.ndev",
               "--truth", d / "c.truth.json", "-o", d / "r.json") == EXIT_OK
    return d


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "default: 500" in out and "default: 0.0001" in out


def test_subcommands_listed():
    assert set(build_parser().parse_args(["synth"]).subcommands) == {
        "synth", "train", "deviate", "eval"}


def test_synth_is_deterministic(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps(SMALL_COHORT))
    for name in ("a", "b"):
        assert run("synth", "--seed", 5, "--config", cfg, "-o", tmp_path / f"{name}.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.truth.json").read_bytes() == (tmp_path / "b.truth.json").read_bytes()


def test_pipeline_outputs(pipeline):
    report = json.loads((pipeline / "r.json").read_text())
    schema = json.loads(resources.files("normvae").joinpath("schemas/report.schema.json")
                        .read_text())
    jsonschema.validate(report, schema)
    assert report["methods"] == ["baseline", "normvae"]
    for panel in "abcde":
        assert (pipeline / f"r.panel_{panel}.csv").exists()
    assert (pipeline / "m.loss.csv").read_text().count("\n") == 2 + 8
    model_ids = json.loads((pipeline / "c.truth.json").read_text())["disease_regions"]
    assert len(model_ids) == 2


def test_deviate_skips_training_subjects(pipeline):
    lines = (pipeline / "n.csv").read_text().splitlines()
    subjects = {line.split(",")[0] for line in lines[2:]}
    # 108 subjects minus 48 training controls
    assert len(subjects) == 108 - 48
    assert len(lines) == 2 + len(subjects) * 6 * 2


def test_config_file_sets_train_defaults(pipeline, tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"epochs": 2, "latent_dim": 2, "hidden_dim": 4,
                               "hidden_layers": 1, "mc_samples": 10}))
    assert run("train", pipeline / "c.csv", "--config", cfg, "-o", tmp_path / "m.ndev") == 0
    assert (tmp_path / "m.loss.csv").read_text().count("\n") == 2 + 2


def test_unknown_config_key(pipeline, tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"epoch": 2}))
    assert run("train", pipeline / "c.csv", "--config", cfg) == EXIT_INPUT


def test_missing_cohort(tmp_path):
    assert run("train", tmp_path / "absent.csv") == EXIT_INPUT


def test_divergence_exit_code(pipeline, tmp_path, capsys):
    code = run("train", pipeline / "c.csv", "-o", tmp_path / "m.ndev", *SMALL_NET, "--lr", "1e4")
    assert code == EXIT_NUMERICAL
    assert "diverged" in capsys.readouterr().err


def test_region_count_mismatch(pipeline, tmp_path):
    other = tmp_path / "o.csv"
    assert run("synth", "--seed", 1, "-o", other) == 0
    assert run("deviate", pipeline / "m.ndev", other, "-o", tmp_path / "n.csv") == EXIT_INPUT


def test_corrupt_model(pipeline, tmp_path):
    bad = tmp_path / "bad.ndev"
    bad.write_bytes((pipeline / "m.ndev").read_bytes()[:-5])
    assert run("deviate", bad, pipeline / "c.csv", "-o", tmp_path / "n.csv") == EXIT_INPUT


def test_bad_flag_value():
    with pytest.raises(SystemExit) as info:
        main(["deviate", "m", "c", "--method", "other"])
    assert info.value.code == 2


def test_null_cohort_flag(tmp_path):
    assert run("synth", "--stages-null", "-o", tmp_path / "z.csv") == 0
    truth = json.loads((tmp_path / "z.truth.json").read_text())
    assert truth["disease_regions"] == [] and not any(truth["atrophy"])
