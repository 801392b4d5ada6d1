from pathlib import Path

import pytest

from voxelforge.cli import main

SMALL = ["--set", "base_channels=2", "--set", "batch_size=2", "--set", "critic_steps_per_gen_step=1"]


def run_pipeline(root: Path, capsys=None) -> dict:
    """Every CLI command once, tiny settings; returns {command: stdout} when capsys is given."""
    root.mkdir(parents=True, exist_ok=True)
    data, ck = root / "d.vfd", root / "ck"
    steps = {
        "gen-data": ["gen-data", "--count", "24", "--seed", "3", "--out", str(data)],
        "train1": ["train", "--stage", "1", "--data", str(data), "--iterations", "2", "--ckpt-dir", str(ck), *SMALL],
        "train2v0": ["train", "--stage", "2", "--variant", "v0", "--data", str(data), "--iterations", "2",
                     "--ckpt-dir", str(ck), "--stage1-ckpt", str(ck / "stage1_gen.vfc"), *SMALL],
        "train2v1": ["train", "--stage", "2", "--variant", "v1", "--data", str(data), "--iterations", "2",
                     "--ckpt-dir", str(ck), "--stage1-ckpt", str(ck / "stage1_gen.vfc"), *SMALL],
        "generate": ["generate", "--text", "a tall thin red chair with a high back", "--stage1-ckpt",
                     str(ck / "stage1_gen.vfc"), "--stage2-ckpt", str(ck / "stage2_gen_v1.vfc"), "--variant", "v1",
                     "--out", str(root / "gen" / "chair")],
        "evaluate": ["evaluate", "--data", str(data), "--stage1-ckpt", str(ck / "stage1_gen.vfc"),
                     "--stage2-ckpt", str(ck / "stage2_gen_v0.vfc"), "--variant", "v0",
                     "--stage2-ckpt", str(ck / "stage2_gen_v1.vfc"), "--variant", "v1",
                     "--epochs", "2", "--out", str(root / "eval")],
        "export-mesh": ["export-mesh", "--voxel", str(root / "gen" / "chair.high.vft"), "--out",
                        str(root / "mesh" / "chair.obj")],
    }
    out = {}
    for name, argv in steps.items():
        code = main(argv)
        assert code == 0, f"{name} exited {code}"
        if capsys is not None:
            out[name] = capsys.readouterr().out
    return out


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two full CLI runs with identical arguments in separate directories."""
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    run_pipeline(a)
    run_pipeline(b)
    return a, b


_GATE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Acceptance tests report (criterion, passed, detail) here."""
    return lambda name, ok, detail: _GATE.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _GATE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
