import contextlib
import io
from pathlib import Path

import pytest

from cbil.cli import main

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


def run_cli(*argv) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as exc:
            code = exc.code
    return code, out.getvalue(), err.getvalue()


def smoke_pipeline(root: Path, config: Path = SMOKE) -> dict:
    """Every CLI stage on the smoke preset; returns the artifact paths."""
    root = Path(root)
    p = {"ref": root / "ref", "mvae": root / "mvae.ckpt", "clusters": root / "clusters.ckpt",
         "policy": root / "policy.ckpt", "rollout": root / "rollout.jsonl", "report": root / "report.json",
         "log": root / "train.csv", "curve": root / "curve.csv", "cluster_json": root / "clusters.json"}
    steps = [
        ("gen-reference", "--config", config, "--out", p["ref"], "--records"),
        ("train-mvae", "--reference", p["ref"], "--out", p["mvae"], "--curve", p["curve"]),
        ("build-clusters", "--mvae", p["mvae"], "--reference", p["ref"], "--out", p["clusters"],
         "--json", p["cluster_json"]),
        ("train-policy", "--mvae", p["mvae"], "--clusters", p["clusters"], "--out", p["policy"], "--log", p["log"]),
        ("rollout", "--mvae", p["mvae"], "--clusters", p["clusters"], "--policy", p["policy"],
         "--out", p["rollout"]),
        ("eval", "--mvae", p["mvae"], "--clusters", p["clusters"], "--trajectory", p["rollout"],
         "--out", p["report"]),
    ]
    for argv in steps:
        code, out, err = run_cli(*argv)
        assert code == 0, f"{argv[0]} exited {code}: {err}"
    return p


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    return smoke_pipeline(tmp_path_factory.mktemp("smoke"))


# acceptance summary: one line per criterion, printed after the run
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
