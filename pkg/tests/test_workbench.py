import json
import re

import pytest

from zdecay import cli
from zdecay.config import DEFAULTS, ExperimentConfig, parse_value
from zdecay.errors import InvalidArgument, MissingArtifact
from zdecay.workbench import EXPECTED, MANIFEST, STAGES, StageError, collect, report, run

TOY_TOML = """
[grid]
kind = "toy"
toy_nodes = [1, 1, 1]

[caps]
nu = 1
nubar = 1
boson = 1

[kernel]
mode = "surrogate"
"""


def quiet(msg):
    pass


@pytest.fixture
def toy_cfg_file(tmp_path):
    p = tmp_path / "toy.toml"
    p.write_text(TOY_TOML)
    return p


@pytest.fixture(scope="module")
def toy_full(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_full")
    status, d = run(ExperimentConfig.toy(), out=out, determinism=True, log=quiet)
    return status, d


# configuration --------------------------------------------------------------

def test_defaults_embedded():
    cfg = ExperimentConfig()
    assert cfg.m_z == 91.18
    assert cfg.get("physics.m_w") == 80.41
    assert cfg.get("physics.g_fermi") == 1.16e-5
    assert cfg.gamma == 0.25
    assert cfg.sigma0 == cfg.m_z


def test_toml_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 7\n[physics]\ngamma = 0.5\n[cascade]\ng = [0.0, 0.2]\n")
    cfg = ExperimentConfig.load(p)
    assert cfg.get("seed") == 7
    assert cfg.gamma == 0.5
    assert cfg.get("cascade.g") == [0.0, 0.2]
    assert cfg.get("caps.nu") == DEFAULTS["caps"]["nu"]


@pytest.mark.parametrize("text", ["bogus = 1\n", "[physics]\nmass = 3\n", "physics = 2\n"])
def test_unknown_or_malformed_key(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(InvalidArgument):
        ExperimentConfig.load(p)


def test_invalid_values_rejected():
    with pytest.raises(InvalidArgument):
        ExperimentConfig.from_dict({"physics": {"gamma": 1.5}})
    with pytest.raises(InvalidArgument):
        ExperimentConfig.from_dict({"dynamics": {"mu": 2.0}})
    with pytest.raises(InvalidArgument):
        ExperimentConfig.load("/nonexistent/config.toml")


def test_hash_stable_and_sensitive():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash()
    b.set("seed", 1)
    assert a.hash() != b.hash()


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("0.5") == 0.5
    assert parse_value("[1, 2]") == [1, 2]
    assert parse_value("true") is True
    assert parse_value("toy") == "toy"


# CLI ------------------------------------------------------------------------

def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--all", "--no-such-flag", "1"])
    assert exc.value.code == 2


def test_unknown_set_key_is_usage_error(tmp_path):
    assert cli.main(["assemble", "--out", str(tmp_path), "--set", "nope.key=1"]) == 2


def test_report_on_empty_dir(tmp_path, capsys):
    with pytest.raises(MissingArtifact) as exc:
        report(tmp_path)
    for name in (MANIFEST, "assemble.json", "cascade.json", "lap.csv", "decay_trace.csv"):
        assert name in str(exc.value)
    assert cli.main(["report", str(tmp_path)]) == 2
    assert "expected files" in capsys.readouterr().err


def test_cascade_without_assemble(tmp_path, toy_cfg_file):
    assert cli.main(["cascade", "--config", str(toy_cfg_file), "--out", str(tmp_path)]) == 2


def test_tampered_operator_is_numeric_failure(tmp_path, toy_cfg_file):
    args = ["--config", str(toy_cfg_file), "--out", str(tmp_path), "--no-determinism"]
    assert cli.main(["assemble"] + args) == 0
    blob = bytearray((tmp_path / "H0.zdop").read_bytes())
    blob[-9] ^= 0xFF
    (tmp_path / "H0.zdop").write_bytes(bytes(blob))
    assert cli.main(["cascade"] + args) == 3


def test_toy_run_all_exit_code(tmp_path, toy_cfg_file, capsys):
    # vacuum overlap is exactly 1 on the toy at both couplings, so criterion 7 fails
    code = cli.main(["run", "--all", "--config", str(toy_cfg_file), "--out", str(tmp_path), "--no-determinism"])
    assert code == 1
    assert "FAIL  7" in capsys.readouterr().out


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    assert "acceptance table complete (14 rows)" in capsys.readouterr().out


def test_free_assemble_matches_h0(tmp_path, toy_cfg_file):
    code = cli.main(["run", "--stage", "assemble", "--g", "0", "--config", str(toy_cfg_file),
                     "--out", str(tmp_path), "--no-determinism"])
    assert code == 0
    assert _same_operator(tmp_path / "H.zdop", tmp_path / "H0.zdop")
    assert "free Hamiltonian" in (tmp_path / "summary.md").read_text()


def _same_operator(a, b):
    from zdecay.hamiltonian import load_operator
    A, B = load_operator(a), load_operator(b)
    return (abs(A.matrix - B.matrix)).max() == 0


def test_env_out_respected(tmp_path, monkeypatch, toy_cfg_file):
    target = tmp_path / "from_env"
    monkeypatch.setenv("ZDECAY_OUT", str(target))
    assert cli.main(["assemble", "--config", str(toy_cfg_file), "--no-determinism"]) == 0
    assert (target / "assemble.json").is_file()


def test_key_flags_mirror_config(toy_cfg_file):
    args = cli.build_parser().parse_args(["assemble", "--config", str(toy_cfg_file), "--caps-nu", "0",
                                          "--physics-gamma", "0.5", "--set", "seed=9", "--g", "0.2"])
    cfg = cli.make_config(args)
    assert cfg.get("caps.nu") == 0
    assert cfg.gamma == 0.5
    assert cfg.get("seed") == 9
    assert cfg.get("cascade.g_main") == 0.2
    assert cfg.get("grid.kind") == "toy"


# run / report ---------------------------------------------------------------

def test_cascade_only_report(tmp_path):
    cfg = ExperimentConfig.toy()
    run(cfg, ("assemble", "cascade"), out=tmp_path, determinism=False, log=quiet)
    text, _ = report(tmp_path)
    assert "E_n table" in text and "Slope fit" in text
    assert "Mourre" not in text and "Local decay" not in text


def test_full_report_matches_criteria(toy_full):
    _, out = toy_full
    text, checks = report(out)
    heads = [int(m) for m in re.findall(r"^### (\d+)\. ", text, flags=re.M)]
    assert heads == list(range(1, 15))
    assert [c.id for c in checks] == heads
    for s in STAGES:
        for name in EXPECTED[s]:
            assert (out / name).is_file()
    man = json.loads((out / MANIFEST).read_text())
    assert man["config_hash"] == ExperimentConfig.toy().hash()
    assert all("GeV" in json.loads((out / f"{s}.json").read_text())["units"] for s in STAGES)


def test_report_never_recomputes(toy_full, tmp_path):
    _, out = toy_full
    before = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".json"}
    report(out)
    after = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix == ".json"}
    assert before == after


def test_determinism_byte_identical(toy_full, tmp_path):
    _, out = toy_full
    man = json.loads((out / MANIFEST).read_text())
    assert man["determinism"]["identical"] is True
    run(ExperimentConfig.toy(), out=tmp_path, determinism=False, log=quiet)
    for s in STAGES:
        assert (tmp_path / f"{s}.json").read_bytes() == (out / f"{s}.json").read_bytes()


def test_stage_isolation(toy_full, tmp_path):
    _, out = toy_full
    for name in EXPECTED["assemble"] + EXPECTED["cascade"]:
        (tmp_path / name).write_bytes((out / name).read_bytes())
    run(ExperimentConfig.toy(), ("mourre",), out=tmp_path, determinism=False, log=quiet)
    assert (tmp_path / "mourre.json").read_bytes() == (out / "mourre.json").read_bytes()


def test_stage_error_preserves_partial_artifacts(tmp_path):
    cfg = ExperimentConfig.toy()
    run(cfg, ("assemble",), out=tmp_path, determinism=False, log=quiet)
    (tmp_path / "kernel_table.zdkt").unlink()
    with pytest.raises(StageError) as exc:
        run(cfg, ("cascade",), out=tmp_path, determinism=False, log=quiet)
    assert exc.value.stage == "cascade"
    assert (tmp_path / "H.zdop").is_file() and (tmp_path / "assemble.json").is_file()
    man = json.loads((tmp_path / MANIFEST).read_text())
    assert man["stages"]["assemble"]["status"] == "ok"
    assert man["stages"]["cascade"]["status"] == "failed"
    with pytest.raises(MissingArtifact):
        collect(tmp_path)


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(InvalidArgument):
        run(ExperimentConfig.toy(), ("bogus",), out=tmp_path, log=quiet)
