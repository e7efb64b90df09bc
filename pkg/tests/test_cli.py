import json

import pytest

from seqbalance import cli, exchange
from seqbalance.exceptions import IntegrityError


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_json(tmp_path, data, name="lens.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def test_plan_moves_half_of_long_sequence(tmp_path, capsys):
    code, out, _ = run(capsys, "plan", write_json(tmp_path, [[1000], [10]]), "--topology", "g2n1")
    assert code == 0
    data = json.loads(out)
    mine = [c for c in data["chunks"] if c["sample_id"] == 0]
    assert [(c["start"], c["end"], c["dst"]) for c in mine] == [(0, 500, 0), (500, 1000, 1)]
    assert data["report"]["wir"] < 1.01


def test_plan_balanced_input_moves_nothing(tmp_path, capsys):
    code, out, _ = run(capsys, "plan", write_json(tmp_path, [[100], [100]]), "--topology", "g1n2")
    assert code == 0 and json.loads(out)["moves"] == 0


def test_plan_two_replicas(tmp_path, capsys):
    code, out, _ = run(capsys, "plan", write_json(tmp_path, [[10], [8], [5], [1]]), "--topology", "g1n2")
    data = json.loads(out)
    assert code == 0 and data["replicas"] == 2
    for c in data["chunks"]:
        assert c["src"] // 2 == c["dst"] // 2


def test_plan_input_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[[1],")
    code, out, err = run(capsys, "plan", str(bad), "--topology", "g1n2")
    assert code == 1 and out == "" and "line" in err
    code, _, err = run(capsys, "plan", write_json(tmp_path, {"x": 1}), "--topology", "g1n2")
    assert code == 1
    code, _, err = run(capsys, "plan", write_json(tmp_path, [[1], [1]]), "--topology", "g1x2")
    assert code == 1 and "offset" in err
    code, _, _ = run(capsys, "plan", str(tmp_path / "missing.json"), "--topology", "g1n2")
    assert code == 1


def test_layout(capsys):
    code, out, _ = run(capsys, "layout", "--topology", "g1n2+g2n1", "--world", "8")
    data = json.loads(out)
    assert code == 0 and len(data["replicas"]) == 2
    assert data["replicas"][1]["bags"][2]["ranks"] == [6, 7]


def test_layout_indivisible_world(capsys):
    code, out, err = run(capsys, "layout", "--topology", "g8n3", "--world", "32")
    assert code == 1 and out == "" and err.startswith("error:")


def synthetic_csv(tmp_path, gamma, lengths=(256, 1024, 4096, 16384)):
    d, k = 3072, 1e-12
    rows = ["seq_len,latency_s"] + [f"{l},{k * (24 * l * d * d + gamma * 4 * l * l * d)!r}" for l in lengths]
    p = tmp_path / "lat.csv"
    p.write_text("\n".join(rows) + "\n")
    return str(p)


def test_fit_gamma(tmp_path, capsys):
    plot = tmp_path / "plot.csv"
    code, out, _ = run(capsys, "fit-gamma", synthetic_csv(tmp_path, 0.385), "--plot-csv", str(plot))
    data = json.loads(out)
    assert code == 0
    assert data["gamma"] == pytest.approx(0.385, abs=1e-6)
    assert data["k"] == pytest.approx(1e-12, rel=1e-9)
    lines = plot.read_text().splitlines()
    assert lines[0] == "seq_len,measured_s,eq1_prediction_s,eq2_prediction_s" and len(lines) == 5


def test_fit_gamma_degenerate(tmp_path, capsys):
    code, out, err = run(capsys, "fit-gamma", synthetic_csv(tmp_path, 0.5, lengths=(1024, 1024, 1024)))
    assert code != 0 and out == "" and "error" in err


def test_fit_gamma_bad_row(tmp_path, capsys):
    p = tmp_path / "lat.csv"
    p.write_text("seq_len,latency_s\n1024,0.1\n2048,abc\n")
    code, _, err = run(capsys, "fit-gamma", str(p))
    assert code == 1 and "line 3" in err


def test_oracle_compare(capsys):
    code, out, _ = run(capsys, "oracle-compare", "--trials", "200", "--n", "8", "--m", "2")
    data = json.loads(out)
    assert code == 0 and data["max_ratio"] <= 2.0 and data["mean_ratio"] >= 1.0


def test_oracle_compare_quality_failure_exit(capsys):
    # mixed bag sizes break the factor-2 bound (see test_balancer)
    code, out, _ = run(capsys, "oracle-compare", "--trials", "300", "--n", "3", "--m", "2", "--bag-sizes", "1,8")
    assert code == 3 and json.loads(out)["max_ratio"] > 2.0


SMALL = ["--data-codes", "g2b2i64f1s0,g2b1i128f1s0", "--topologies", "none,g1n4,g2n2", "--steps", "2", "--n-blocks", "2"]


@pytest.mark.parametrize("fmt", ["md", "json", "csv"])
def test_simulate_formats(capsys, fmt):
    code, out, _ = run(capsys, "simulate", *SMALL, "--format", fmt)
    assert code == 0
    if fmt == "md":
        assert "| Balancer g2n2 |" in out and "| w/o Balancer |" in out
    elif fmt == "json":
        data = json.loads(out)
        assert [r["label"] for r in data["rows"]] == ["w/o Balancer", "Balancer g1n4", "Balancer g2n2"]
        assert data["config"]["group_size"] == 4
    else:
        assert out.splitlines()[0].startswith("label,wir,fbl_s")


def test_simulate_json_is_byte_identical(capsys):
    a = run(capsys, "simulate", *SMALL, "--format", "json", "--seed", "5")[1]
    b = run(capsys, "simulate", *SMALL, "--format", "json", "--seed", "5")[1]
    c = run(capsys, "simulate", *SMALL, "--format", "json", "--seed", "6")[1]
    assert a == b != c


def test_simulate_scenario_file(tmp_path, capsys):
    p = tmp_path / "s.txt"
    p.write_text("group_size 4\ng2b2i64f1s0\ndummy2\n")
    code, out, _ = run(capsys, "simulate", "--scenario", str(p), "--topologies", "g2n2", "--steps", "1", "--format", "json")
    assert code == 0 and json.loads(out)["config"]["data_codes"] == ["g2b2i64f1s0", "dummy2"]


@pytest.mark.parametrize(
    "extra",
    [
        ["--topologies", "g8n3"],
        ["--topologies", "g5n1"],
        ["--world", "6"],
        ["--steps", "0"],
        ["--preset", "lowres_image"],
        ["--d-head", "100"],
    ],
)
def test_simulate_config_errors(capsys, extra):
    code, out, err = run(capsys, "simulate", *SMALL, *extra)
    assert code == 1 and out == "" and err.startswith("error:")


def test_simulate_invariant_exit(capsys, monkeypatch):
    def broken(world, plan):
        raise IntegrityError("sample 0 lost")

    monkeypatch.setattr(exchange, "route", broken)
    code, out, err = run(capsys, "simulate", *SMALL)
    assert code == 2 and out == "" and "invariant" in err


def test_gamma_preset_flag(capsys):
    code, out, _ = run(capsys, "simulate", *SMALL, "--gamma", "h100_fit", "--format", "json")
    assert code == 0 and json.loads(out)["config"]["gamma"] == 0.385
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--gamma", "fast"])
