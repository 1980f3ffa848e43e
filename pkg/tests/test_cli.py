import json

import numpy as np
import pandas as pd
import pytest

from herdlab import HerdingParams, OpinionDistribution, WeightRule, simulate
from herdlab.cli import main, parse_rule, parse_sequences
from herdlab.ingest import speed_up, write_csv

ALPHA = "0.01,0.02,0.07,0.4,0.5"


def simulate_args(out, seed=5, n=200):
    return [
        "simulate",
        "--alpha",
        ALPHA,
        "--gamma",
        "0.8*(1-1/i)",
        "--eta",
        "0.2",
        "--rule",
        "c=1",
        "--n",
        str(n),
        "--seed",
        str(seed),
        "--out",
        str(out),
        "-q",
    ]


def test_parse_rule():
    assert parse_rule("unweighted").is_unweighted
    assert parse_rule("c=0").is_unweighted
    assert not parse_rule("C=1.5").is_unweighted
    with pytest.raises(ValueError, match="Unknown rule"):
        parse_rule("exp")
    with pytest.raises(ValueError, match="exponent"):
        parse_rule("c=abc")


def test_parse_sequences():
    assert [str(s) for s in parse_sequences("0.2,0.8*(1-1/i)")] == [
        "0.2",
        "0.8*(1-1/i)",
    ]
    assert len(parse_sequences("0:0.5:0.1")) == 6


def test_simulate_is_reproducible(tmp_path):
    assert main(simulate_args(tmp_path / "a")) == 0
    assert main(simulate_args(tmp_path / "b")) == 0
    a = (tmp_path / "a" / "ratings.csv").read_text()
    assert a == (tmp_path / "b" / "ratings.csv").read_text()

    table = pd.read_csv(tmp_path / "a" / "ratings.csv")
    assert list(table.columns) == ["item_id", "order_key", "rating", "misbehaving"]
    assert len(table) == 200
    assert table["rating"].between(1, 5).all()

    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate"
    assert manifest["seed"] == 5
    assert manifest["parameters"]["gamma"] == "0.8*(1-1/i)"
    assert manifest["finished"] is not None


def test_simulate_with_misbehavior(tmp_path):
    args = [*simulate_args(tmp_path, n=10), "--misbehave", "2,5,4;5"]
    assert main(args) == 0
    table = pd.read_csv(tmp_path / "ratings.csv")
    assert list(table["rating"].iloc[3:5]) == [5, 5]
    assert list(table["misbehaving"]) == [0, 0, 0, 1, 1, 0, 0, 0, 0, 0]


def test_phi_without_herding(tmp_path, capsys):
    args = ["phi", "--c", "0", "--horizon", "50", "--out", str(tmp_path), "--stdout"]
    assert main(args) == 0
    table = pd.read_csv(tmp_path / "phi.csv")
    assert list(table.columns) == ["c", "gamma", "eta", "i", "phi"]
    assert np.allclose(table["phi"], 2 * np.arange(1, 51))
    assert capsys.readouterr().out.startswith("c,gamma,eta,i,phi")


def test_phi_grid(tmp_path):
    args = [
        "phi",
        "--c",
        "0:1:0.5",
        "--gamma",
        "0.2,0.6",
        "--horizon",
        "20",
        "--out",
        str(tmp_path),
    ]
    assert main(args) == 0
    table = pd.read_csv(tmp_path / "phi.csv")
    assert len(table) == 3 * 2 * 20
    assert sorted(table["c"].unique()) == [0.0, 0.5, 1.0]


@pytest.mark.parametrize(
    "argv",
    [
        ["phi", "--c", "0:4:0.1", "--horizon", "100000"],
        ["phi", "--misbehave", "1,5,3", "--horizon", "10"],
        ["simulate", "--alpha", "0.5,0.6,0,0,-0.1", "--n", "10"],
        ["simulate", "--alpha", ALPHA, "--n", "10", "--rule", "exp"],
        ["simulate", "--alpha", ALPHA, "--n", "10", "--seed", "-1"],
        ["infer", "--input", "does-not-exist.csv"],
    ],
)
def test_invalid_input_exits_2(tmp_path, argv, capsys):
    assert main([*argv, "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_required_flag():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--n", "10"])
    assert exc.value.code == 2


def test_infer_from_simulated_file(tmp_path):
    assert main(simulate_args(tmp_path / "sim", n=300)) == 0
    args = [
        "infer",
        "--input",
        str(tmp_path / "sim" / "ratings.csv"),
        "--rule",
        "c=1",
        "--restarts",
        "3",
        "--out",
        str(tmp_path / "inf"),
    ]
    assert main(args) == 0
    result = json.loads((tmp_path / "inf" / "result.json").read_text())
    assert len(result["alpha_hat"]) == 5
    assert np.isclose(sum(result["alpha_hat"]), 1.0)
    assert 0.0 <= result["gamma_tilde_hat"] <= 1.0
    assert result["restarts_run"] == 3


def test_infer_needs_item_for_many(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("item_id,order_key,rating\na,1,3\na,2,4\nb,1,5\nb,2,5\n")
    args = ["infer", "--input", str(path), "--out", str(tmp_path)]
    assert main(args) == 2
    assert main([*args, "--item", "c"]) == 2
    assert main([*args, "--item", "b", "--restarts", "2"]) == 0


def test_mc_writes_error_curve(tmp_path):
    args = [
        "mc",
        "--alpha",
        ALPHA,
        "--gamma",
        "0.6",
        "--n-grid",
        "40,20",
        "--rounds",
        "2",
        "--restarts",
        "2",
        "--out",
        str(tmp_path),
        "-q",
    ]
    assert main(args) == 0
    table = pd.read_csv(tmp_path / "errors.csv")
    assert list(table["N"]) == [20, 40]
    assert np.all(table["rounds"] == 2)


def test_bound_holds_without_herding(tmp_path):
    args = [
        "bound",
        "--alpha",
        ALPHA,
        "--i",
        "50",
        "--epsilon",
        "0.2",
        "--seeds",
        "200",
        "--out",
        str(tmp_path),
        "-q",
    ]
    assert main(args) == 0
    table = pd.read_csv(tmp_path / "bound.csv")
    assert set(table["i"]) == {50}
    assert np.all(table["frequency"] <= table["tail_bound"] + 3 * table["std_error"])


def test_analyze_without_enough_ratings(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("item_id,order_key,rating\na,1,3\na,2,4\n")
    args = ["analyze", "--input", str(path), "--min-ratings", "10"]
    assert main([*args, "--out", str(tmp_path)]) == 2


def test_mc_needs_constant_gamma(tmp_path, capsys):
    args = ["mc", "--alpha", ALPHA, "--gamma", "0.8*(1-1/i)", "--out", str(tmp_path)]
    assert main(args) == 2
    assert "must be a constant" in capsys.readouterr().err


def test_analyze_synthetic_corpus(tmp_path):
    alpha = OpinionDistribution(np.array([0.05, 0.05, 0.2, 0.3, 0.4]))
    sequences = {}
    for k, gamma in enumerate((0.3, 0.5, 0.7)):
        params = HerdingParams(alpha, gamma, 0.0, WeightRule.unweighted())
        sequences[f"item{k}"] = simulate(params, 300, seed=k)
    write_csv(sequences, tmp_path / "corpus.csv", include_flags=False)

    out = tmp_path / "out"
    args = [
        "analyze",
        "--input",
        str(tmp_path / "corpus.csv"),
        "--min-ratings",
        "100",
        "--c-grid",
        "0,0.5,1",
        "--eval-index",
        "500",
        "--restarts",
        "2",
        "--out",
        str(out),
        "-q",
    ]
    assert main(args) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "cdf.csv",
        "items.jsonl",
        "manifest.json",
        "summary.json",
        "sweep.csv",
    ]
    assert len(list(tmp_path.rglob("manifest.json"))) == 1
    assert len((out / "items.jsonl").read_text().splitlines()) == 3

    summary = json.loads((out / "summary.json").read_text())
    best_c, ratio = speed_up(pd.read_csv(out / "sweep.csv"))
    assert best_c == summary["best_c"]
    assert f"{100 * ratio:.4g}" == f"{summary['speed_up_percent']:.4g}"
