import json
import math
import subprocess
import sys
from fractions import Fraction

import numpy as np
import pytest

from kinlab import combinatorics as cb
from kinlab.cli.config import ConfigError, build_config, read_config_file
from kinlab.cli.main import main
from kinlab.cli.persistence import Table, dumps_csv, dumps_json, persist, read_csv


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


# ------------------------------------------------------------------ config


def test_missing_config_file(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    code = main(["geometry", "--config", str(missing), "--out", str(tmp_path / "out")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err
    m = manifest(tmp_path / "out")
    assert m["status"] == "config-error" and not m["verdict"]
    assert str(missing) in m["error"]


@pytest.mark.parametrize("override,needle", [
    ("nonsense=1", "geometry.nonsense"),
    ("samples=ten", "geometry.samples"),
    ("samples=1.5", "geometry.samples"),
    ("hierarchy.N=3", "[hierarchy]"),
    ("samples", "key=value"),
])
def test_bad_overrides_name_the_key(tmp_path, capsys, override, needle):
    code = main(["geometry", "--set", override, "--out", str(tmp_path)])
    assert code == 2
    assert needle in capsys.readouterr().err


def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_config_layers(tmp_path, monkeypatch):
    ini = tmp_path / "run.ini"
    ini.write_text("[hierarchy]\nN = 50\nv_star = [0.5, 0.0]\nmode = ansatz\n\n[output]\ndir = somewhere\n")
    assert read_config_file(ini)["hierarchy"]["N"] == 50
    cfg = build_config("hierarchy", str(ini), ["N=70"], {"mode": "run"})
    assert cfg.params["N"] == 70.0 and cfg.params["mode"] == "run"
    assert cfg.params["v_star"] == [0.5, 0.0]
    assert str(cfg.out_dir) == "somewhere"
    hc = cfg.hierarchy_config(threads=1)
    assert hc.N == 70.0 and hc.v_star == (0.5, 0.0)

    monkeypatch.setenv("KINLAB_OUTPUT_ROOT", str(tmp_path / "root"))
    assert build_config("landau").out_dir == tmp_path / "root" / "landau"


def test_hierarchy_values_are_validated():
    with pytest.raises(ConfigError, match="hierarchy"):
        build_config("hierarchy", overrides=["kappa=-1"])
    with pytest.raises(ConfigError, match="hierarchy.mode"):
        build_config("hierarchy", overrides=["mode=sprint"])


# ------------------------------------------------------------------ output


def test_enumerate_prints_closure(tmp_path, capsys):
    code = main(["diagrams", "--m0", "2", "--max-len", "3", "--enumerate", "--out", str(tmp_path)])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    expected = [a.to_dict() for a in cb.admissible_closure(2, 3)]
    assert printed == {"m0": 2, "max_len": 3, "abstracts": json.loads(dumps_json(expected))}
    m = manifest(tmp_path)
    assert m["status"] == "passed" and m["verdict"]
    assert sorted(m["files"]) == ["boundary.json", "catalog.json", "closure.json"]
    assert m["config"]["params"]["max_len"] == 3


def test_runs_are_byte_identical(tmp_path):
    args = ["diagrams", "--m0", "2", "--max-len", "3", "--samples", "50"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        if f == "timings.log":
            continue
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert (tmp_path / "a" / "timings.log").exists()


def test_csv_floats_round_trip_exactly(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.standard_normal(50) * 10.0 ** rng.integers(-300, 300, 50)
    extras = [0.1 + 0.2, 1e-320, -0.0, math.pi]
    table = Table.from_columns(x=np.concatenate([values, extras]), i=np.arange(54))
    persist({"series": table}, {"artifact": "test"}, tmp_path)
    back = read_csv(tmp_path / "series.csv")
    assert back.columns == ["x", "i"]
    got = [float(r[0]) for r in back.rows]
    assert [v.hex() for v in got] == [float(r[0]).hex() for r in table.rows]


def test_csv_special_values():
    t = Table(["a", "b", "c"], [[float("nan"), float("-inf"), True], [Fraction(1, 3), None, 7]])
    assert dumps_csv(t) == "a,b,c\nnan,-inf,true\n1/3,,7\n"
    with pytest.raises(ValueError):
        dumps_csv(Table(["a"], [[1, 2]]))


def test_json_conversion():
    text = dumps_json({"z": 1 + 2j, "a": np.float64(0.1), "n": float("nan"), "t": (1, 2), "f": Fraction(2, 4)})
    assert json.loads(text) == {"a": 0.1, "f": "1/2", "n": "nan", "t": [1, 2], "z": {"im": 2.0, "re": 1.0}}
    assert text.index('"a"') < text.index('"z"')
    with pytest.raises(TypeError):
        dumps_json({"x": object()})


def test_empty_results_write_manifest_only(tmp_path):
    files = persist({}, {"artifact": "test"}, tmp_path / "deep" / "dir")
    assert files == ["manifest.json"]
    assert manifest(tmp_path / "deep" / "dir")["files"] == []


def test_unwritable_output_is_reported(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["diagrams", "--m0", "1", "--max-len", "2", "--out", str(blocker / "sub")])
    assert code == 1
    assert "cannot create output directory" in capsys.readouterr().err


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("KINLAB_OUTPUT_ROOT", str(tmp_path))
    assert main(["diagrams", "--m0", "1", "--max-len", "2"]) == 0
    assert manifest(tmp_path / "diagrams")["subcommand"] == "diagrams"


# ------------------------------------------------------------------ audit


def test_audit_selection_errors(tmp_path, capsys):
    assert main(["audit", "--only", "99", "--out", str(tmp_path)]) == 1
    assert "unknown criteria" in capsys.readouterr().err
    assert manifest(tmp_path)["status"] == "error"


def test_audit_quick(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "kinlab.cli.main", "audit", "--quick", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith("[")]
    assert len(lines) == 7 and all(ln.startswith("[PASS]") for ln in lines)
    m = manifest(tmp_path)
    assert sorted(m["checks"]) == [f"criterion_{n:02d}" for n in (1, 2, 3, 4, 5, 8, 10)]
    assert m["verdict"]
