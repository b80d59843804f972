import numpy as np
import pytest

from cflab.core import CFEvent


def make_event(spacing, v_fv, v_lv, a_fv=None, *, dt=0.1, driver_id="d0", event_id="e0", lv_id="lv0", **extra):
    """Build an event from scalars or arrays; scalars are broadcast to the longest column."""
    cols = [np.atleast_1d(np.asarray(c, dtype=float)) for c in (spacing, v_fv, v_lv)]
    if a_fv is None:
        a_fv = 0.0
    cols.append(np.atleast_1d(np.asarray(a_fv, dtype=float)))
    n = max(len(c) for c in cols)
    cols = [np.broadcast_to(c, (n,)).copy() for c in cols]
    return CFEvent(driver_id, event_id, lv_id, dt, *cols, **extra)


def steady_event(n=200, spacing=20.0, v=10.0, **kw):
    """Follower and leader at the same constant speed and gap."""
    return make_event(np.full(n, spacing), np.full(n, v), np.full(n, v), **kw)


# one PASS/FAIL line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_CONFIG = """\
# a few small drivers and tiny training budgets, for end-to-end runs in seconds
fleet.drivers = 4
fleet.events = 20
fleet.duration = 15.5, 17
split.n_train_drivers = 3
split.n_test_drivers = 1
ga.population = 6
ga.generations = 2
ga.events_per_driver = 1
model.hidden = 4
model.window = 4
model.window_stride = 20
pretrain.steps = 3
meta.k_inner = 1
meta.outer_steps = 2
meta.meta_batch = 2
meta.checkpoint_every = 1
"""


def run_pipeline(root, *extra):
    """Run every subcommand once under ``root``; return the artifact directory."""
    from cflab.cli import main

    root.mkdir(parents=True, exist_ok=True)
    conf = root / "small.conf"
    conf.write_text(SMALL_CONFIG)
    out = root / "out"
    common = ["--config", str(conf), "--seed", "3", *extra]

    def run(*argv):
        code = main([*argv, *common])
        assert code == 0, argv
        return code

    run("gen", "--out", f"{out}/gen")
    run("extract", "--input", f"{out}/gen/fleet.csv", "--out", f"{out}/ext")
    ev = f"{out}/ext/events.csv"
    run("split", "--input", ev, "--out", f"{out}/split.json")
    tasks = ["--input", ev, "--manifest", f"{out}/split.json"]
    run("calibrate", *tasks, "--model", "IDM", "--out", f"{out}/idm.json")
    run("train", *tasks, "--kind", "lstm", "--out", f"{out}/lstm")
    run("meta-train", *tasks, "--kind", "pidl", "--out", f"{out}/meta")
    run("finetune", *tasks, "--model", f"{out}/meta/model.mfw", "--out", f"{out}/ft")
    run("eval", *tasks, "--model", f"IDM={out}/idm.json", "--model", f"PIDL+meta={out}/meta/model.mfw",
        "--model", f"LSTM+pretrain={out}/lstm/model.mfw", "--out", f"{out}/eval")
    run("style", "--input", ev, "--out", f"{out}/style")
    run("report", f"{out}/eval/report.json", "--out", f"{out}/table2.csv")
    return out


def artifact_bytes(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
