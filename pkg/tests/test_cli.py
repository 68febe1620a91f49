import json

import pytest

from sfdecomp import report as rpt
from sfdecomp.cli import build_parser, run

MODEL = ["--outcome", "rice", "--inputs", "land,labor,seed,fertilizer"]


@pytest.fixture(scope="module")
def farm(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "dgp.json"
    cfg.write_text(json.dumps({"n": 600, "n_clusters": 20, "dose_law": [8.0, 0.5], "attrition": [0.1, 0.1]}))
    path = d / "farm.csv"
    assert run(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(path)]) == 0
    return d, path, cfg


def _run(args, tmp_path, name="out.json"):
    out = tmp_path / name
    code = run([*args, "--out", str(out)])
    return code, out


def _subparsers(parser):
    return parser._subparsers._group_actions[0].choices


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    for name, sub in _subparsers(parser).items():
        text = sub.format_help()
        for action in sub._actions:
            assert action.help, f"{name}: {action.option_strings} has no help"
            for opt in action.option_strings:
                assert opt in text, f"{name}: {opt} missing from help"
        assert "64" in text and "exit codes" in text
    assert run(["--help"]) == 0
    assert "montecarlo" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert run(["ols", "--data", "x.csv", "--bogus"]) == 64
    assert run(["simulate"]) == 64
    assert run(["dose", "--data", "x.csv", "--dose", "credit"]) == 64
    assert run([]) == 64
    assert "error" in capsys.readouterr().err


def test_validate_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("unit,branch,Z,rice,land\n1,b1,0,3,2\n2,b1,1,4,abc\n3,b2,0,5,6\n")
    code, _ = _run(["validate", "--data", str(bad), "--outcome", "rice", "--inputs", "land"], tmp_path)
    assert code == 2
    err = capsys.readouterr().err
    assert "row 2" in err and "land" in err


def test_validate_ok(farm, tmp_path):
    _, path, _ = farm
    code, out = _run(["validate", "--data", str(path), *MODEL], tmp_path)
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["inputs"][str(path)].startswith("sha256:")
    used = rep["tables"]["sample"]["rows"][0]
    assert used[1] + used[2] == used[0]


def test_decompose_report_fields(farm, tmp_path):
    _, path, _ = farm
    code, out = _run(["decompose", "--data", str(path), *MODEL], tmp_path)
    assert code == 0
    rep = json.loads(out.read_text())
    effects = {r[0] for r in rep["tables"]["decomposition"]["rows"]}
    assert effects == {"frontier_shift", "efficiency_effect", "total", "ols_total"}
    assert "counts" in rep["exclusions"]


def test_estimation_failure_exit(farm, tmp_path):
    _, path, _ = farm
    text = path.read_text().splitlines()
    head = text[0].split(",")
    b = head.index("branch")
    rows = [",".join(c if i != b else "b000" for i, c in enumerate(line.split(","))) for line in text[1:]]
    one = tmp_path / "one.csv"
    one.write_text("\n".join([text[0], *rows]) + "\n")
    code, _ = _run(["ols", "--data", str(one), *MODEL], tmp_path)
    assert code == 3


@pytest.mark.parametrize("args", [
    ["montecarlo", "--estimator", "ols", "--reps", "3", "--seed", "42"],
    ["simulate", "--seed", "9"],
    ["dose", "--data", "{data}", *MODEL, "--dose", "credit", "--bins", "4", "--seed", "5", "--boot", "20"],
])
def test_byte_identical_reruns(farm, tmp_path, args):
    _, path, cfg = farm
    args = [a.replace("{data}", str(path)) for a in args]
    if args[0] != "dose":
        args += ["--config", str(cfg)]
    code1, a = _run(args, tmp_path, "a.out")
    code2, b = _run(args, tmp_path, "b.out")
    assert code1 == code2 == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_required(farm):
    _, path, cfg = farm
    assert run(["montecarlo", "--config", str(cfg), "--estimator", "ols", "--reps", "3"]) == 64


@pytest.mark.parametrize("command", [
    ["ols", *MODEL],
    ["sfa", *MODEL],
    ["balance", "--variables", "land,labor,seed"],
    ["attrition", "--covariates", "land"],
    ["density", "--column", "land", "--grid-size", "64"],
])
def test_csv_json_roundtrip(farm, tmp_path, command):
    _, path, _ = farm
    base = [command[0], "--data", str(path), *command[1:]]
    code_j, j = _run(base, tmp_path, "r.json")
    code_c, c = _run([*base, "--format", "csv"], tmp_path, "r.csv")
    assert code_j == code_c == 0
    from_json = json.loads(j.read_text())["tables"]
    from_csv = rpt.tables_from_csv(c.read_text())
    assert from_csv == from_json


def test_plot_data_files(farm, tmp_path):
    _, path, _ = farm
    prefix = tmp_path / "fig"
    code = run(["dose", "--data", str(path), *MODEL, "--dose", "credit", "--bins", "3", "--seed", "1",
                "--boot", "10", "--plot-data", str(prefix), "--out", str(tmp_path / "d.json")])
    assert code == 0
    lines = (tmp_path / "fig_yield.csv").read_text().splitlines()
    assert lines[0] == "x,estimate,lo,hi" and len(lines) == 4
    dens = tmp_path / "dens.txt"
    assert run(["density", "--data", str(path), *MODEL, "--jlms", "--plot-data", str(dens),
                "--out", str(tmp_path / "e.json")]) == 0
    assert dens.read_text().startswith("x,density\n")


def test_config_supplies_defaults(farm, tmp_path):
    _, path, _ = farm
    conf = tmp_path / "opts.json"
    conf.write_text(json.dumps({"outcome": "rice", "inputs": ["land", "labor"]}))
    code, out = _run(["ols", "--data", str(path), "--config", str(conf)], tmp_path)
    assert code == 0
    names = [r[0] for r in json.loads(out.read_text())["tables"]["coefficients"]["rows"]]
    assert names == ["const", "ln_land", "ln_labor", "Z"]
    conf.write_text(json.dumps({"nonsense": 1}))
    assert run(["ols", "--data", str(path), "--config", str(conf)]) == 2
