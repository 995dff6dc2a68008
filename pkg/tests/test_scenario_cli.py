from pathlib import Path

import numpy as np
import pytest

from mfsvie import __version__
from mfsvie.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main
from mfsvie.scenario import ScenarioError, parse_expr, parse_scenario, parse_scenario_text

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

MINIMAL = """\
[scenario]
kind = forward

[problem]
builtin = example-5.2
"""


def errors_of(text):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario_text(text, "test.scn")
    return exc.value.errors


def test_minimal_forward_scenario():
    spec = parse_scenario_text(MINIMAL)
    assert spec.kind == "forward"
    assert spec.builtin == "example-5.2"
    assert spec.T == 1.0 and spec.N > 0 and spec.M > 0


def test_misspelled_key_names_key_and_line():
    errs = errors_of(MINIMAL + "\n[ensemble]\nparticls = 100\n")
    assert len(errs) == 1
    line, msg = errs[0]
    assert line == 8
    assert "particls" in msg


def test_all_errors_reported_together():
    errs = errors_of("[scenario]\nkind = forward\nnam = x\n[grid]\nN = -3\n[problem]\nbuiltin = example-5.2\n")
    assert [ln for ln, _ in errs] == [3, 5]


def test_unknown_section_and_kind():
    assert "section" in errors_of(MINIMAL + "[solvr]\ntol = 1\n")[0][1]
    assert errors_of("[scenario]\nkind = sideways\n")


def test_builtin_must_exist_and_match_kind():
    assert "example-9.9" in errors_of(MINIMAL.replace("example-5.2", "example-9.9"))[0][1]
    assert errors_of(MINIMAL.replace("example-5.2", "example-3.3"))


def test_matrix_with_three_entries_is_dimension_mismatch():
    text = "[scenario]\nkind = forward\n[problem]\nn = 2\nphi = [1, 1]\nA0 = [[1, 0], [0]]\n"
    line, msg = errors_of(text)[0]
    assert line == 6
    assert msg.startswith("A0: dimension mismatch")


def test_vector_length_checked_against_n():
    text = "[scenario]\nkind = forward\n[problem]\nn = 2\nphi = [1, 1, 1]\n"
    assert "dimension mismatch" in errors_of(text)[0][1]


def test_inline_free_term_required():
    errs = errors_of("[scenario]\nkind = forward\n[problem]\nn = 1\nA0 = 1\n")
    assert any("phi" in msg for _, msg in errs)


def test_expressions_reject_unknown_names_and_calls():
    for bad in ("__import__('os')", "x + 1", "open('f')", "t.real"):
        with pytest.raises((ValueError, ScenarioError)):
            parse_expr(bad, {"t", "s"})


def test_expression_evaluation():
    e = parse_expr("[[1, t], [0, exp(s)]]", {"t", "s"})
    np.testing.assert_allclose(e.matrix(2, t=2.0, s=0.0), [[1, 2], [0, 1]])
    d = parse_expr("diag(1, 2 * t)", {"t", "s"})
    np.testing.assert_allclose(d.matrix(2, t=1.5, s=0.0), [[1, 0], [0, 3]])


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError):
        parse_scenario(tmp_path / "nope.scn")


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.scn")), ids=lambda p: p.stem)
def test_shipped_scenarios_parse(path):
    assert parse_scenario(path).name


def run(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["run", str(SCENARIOS / f"{name}.scn"), "--out", str(out), *extra])
    return code, out


def test_duality_scalar_exits_zero(tmp_path, capsys):
    code, out = run(tmp_path, "duality-scalar", "--particles", "200", "--grid", "25")
    assert code == EXIT_OK
    assert "lhs" in capsys.readouterr().out
    assert (out / "duality.csv").exists() and (out / "report.txt").exists()


def test_example_5_10_counterexample_exits_zero(tmp_path):
    assert run(tmp_path, "example-5.10-order", "--particles", "500", "--grid", "40")[0] == EXIT_OK


def test_sabotaged_counterexample_exits_one(tmp_path):
    assert run(tmp_path, "example-5.10-sabotaged", "--particles", "500", "--grid", "40")[0] == EXIT_FAIL


def test_rerun_gives_identical_csv(tmp_path):
    args = ("--particles", "500", "--grid", "20")
    _, a = run(tmp_path / "a", "inline-forward", *args)
    _, b = run(tmp_path / "b", "inline-forward", *args)
    files = sorted(p.name for p in a.iterdir())
    assert "state.csv" in files
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_output(tmp_path):
    _, a = run(tmp_path / "a", "inline-forward", "--particles", "300", "--grid", "10")
    _, b = run(tmp_path / "b", "inline-forward", "--particles", "300", "--grid", "10", "--seed", "99")
    assert (a / "state.csv").read_bytes() != (b / "state.csv").read_bytes()


def test_inline_backward_runs(tmp_path):
    code, out = run(tmp_path, "inline-backward", "--particles", "1000", "--grid", "20")
    assert code == EXIT_OK
    assert (out / "picard.csv").exists()


def test_bad_scenario_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text(MINIMAL + "\n[ensemble]\nparticls = 10\n")
    assert main(["run", str(bad)]) == EXIT_ERROR
    assert "particls" in capsys.readouterr().err


def test_negative_override_exits_two(tmp_path):
    assert run(tmp_path, "example-5.2", "--particles", "0")[0] == EXIT_ERROR


def test_version_and_builtins(capsys):
    assert main(["version"]) == EXIT_OK
    assert __version__ in capsys.readouterr().out
    assert main(["list-builtins"]) == EXIT_OK
    listing = capsys.readouterr().out
    for name in ("example-5.2", "example-3.3", "lq-toy", "scalar"):
        assert name in listing
