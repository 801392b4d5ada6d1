import numpy as np
import pytest

from voxelforge import training as TR
from voxelforge.data import make_dataset
from voxelforge.losses import TrainingConfig
from voxelforge.networks import load_checkpoint, save_checkpoint, NetworkSpec


@pytest.fixture(scope="module")
def data():
    return make_dataset(12, seed=1)


def tiny(**kw):
    base = dict(iterations=3, batch_size=2, base_channels=2, critic_steps_per_gen_step=2, checkpoint_every=2)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def stage1_ckpt(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("s1")
    TR.train("1", data, tiny(iterations=2), d)
    return d / "stage1_gen.vfc"


def test_zero_iterations_writes_initial_checkpoint(tmp_path, data):
    report = TR.train("1", data, tiny(iterations=0), tmp_path)
    assert report.critic_loss == [] and report.gen_loss == []
    assert (tmp_path / "stage1_gen.vfc").exists() and (tmp_path / "stage1_critic.vfc").exists()
    lines = (tmp_path / "losses_1.csv").read_text().splitlines()
    assert lines[0] == TR.LOG_HEADER and "# iterations=0" in lines


def test_same_seed_same_history(tmp_path, data):
    a = TR.train("1", data, tiny(), tmp_path / "a")
    b = TR.train("1", data, tiny(), tmp_path / "b")
    assert a.critic_loss == b.critic_loss and a.gen_loss == b.gen_loss
    for name in ("stage1_gen.vfc", "losses_1.csv", "state_1.vfs"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = TR.train("1", data, tiny(seed=1), tmp_path / "c")
    assert c.critic_loss != a.critic_loss


def test_resume_replays_uninterrupted_run(tmp_path, data):
    full = TR.train("1", data, tiny(iterations=4), tmp_path / "full")
    TR.train("1", data, tiny(iterations=2), tmp_path / "part")
    rest = TR.train("1", data, tiny(iterations=2), tmp_path / "part", resume=True)
    assert rest.iterations == [2, 3]
    np.testing.assert_allclose(rest.critic_loss, full.critic_loss[2:], rtol=1e-6)
    assert (tmp_path / "part" / "losses_1.csv").read_text() == (tmp_path / "full" / "losses_1.csv").read_text()


def test_resume_without_state_fails(tmp_path, data):
    with pytest.raises(FileNotFoundError):
        TR.train("1", data, tiny(), tmp_path, resume=True)


@pytest.mark.parametrize("stage", ["2v0", "2v1"])
def test_stage2_leaves_stage1_untouched(tmp_path, data, stage1_ckpt, stage):
    before = stage1_ckpt.read_bytes()
    report = TR.train(stage, data, tiny(iterations=2), tmp_path, stage1_checkpoint=stage1_ckpt)
    assert stage1_ckpt.read_bytes() == before
    assert len(report.critic_loss) == 2 and np.all(np.isfinite(report.critic_loss))
    gen_name, critic_name, _, _ = TR.file_names(stage)
    g2 = load_checkpoint(tmp_path / gen_name)
    assert g2.high_res == 16 and g2.kind == f"stage2_gen_{stage[1:]}"


def test_stage2_needs_stage1(tmp_path, data):
    with pytest.raises(FileNotFoundError):
        TR.train("2v0", data, tiny(), tmp_path)
    with pytest.raises(FileNotFoundError):
        TR.train("2v1", data, tiny(), tmp_path, stage1_checkpoint=tmp_path / "missing.vfc")


def test_stage2_rejects_wrong_resolution(tmp_path, data):
    path = tmp_path / "g1.vfc"
    save_checkpoint(NetworkSpec("stage1_gen", base_channels=2, low_res=4), path)
    with pytest.raises(ValueError, match="8"):
        TR.train("2v0", data, tiny(), tmp_path, stage1_checkpoint=path)


def test_unknown_stage(tmp_path, data):
    with pytest.raises(ValueError):
        TR.train("3", data, tiny(), tmp_path)


def test_one_iteration_moves_both_networks(tmp_path, data):
    TR.train("1", data, tiny(iterations=1, critic_steps_per_gen_step=1), tmp_path)
    gen0, critic0 = TR.build_networks("1", tiny(), 8)
    gen1 = load_checkpoint(tmp_path / "stage1_gen.vfc")
    critic1 = load_checkpoint(tmp_path / "stage1_critic.vfc")
    assert list(gen1.params) == list(gen0.params)
    assert any(not np.array_equal(a, b) for a, b in zip(gen0.arrays(), gen1.arrays()))
    assert any(not np.array_equal(a, b) for a, b in zip(critic0.arrays(), critic1.arrays()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(tmp_path, data):
    with pytest.raises(TR.TrainingDivergedError):
        TR.train("1", data, tiny(learning_rate=1e300, iterations=3), tmp_path)


def test_log_rows_and_timing(tmp_path, data):
    report = TR.train("1", data, tiny(iterations=2), tmp_path)
    rows = report.rows()
    assert [r.split(",")[0] for r in rows] == ["0", "1"] and all(r.endswith(",0") for r in rows)
    assert all(float(r.split(",")[3]) > 0 for r in report.rows(timing=True))


def test_smoothed_and_shrinkage():
    np.testing.assert_allclose(TR.smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
    r = TR.TrainingReport("1", wasserstein=[1.0] * 5 + [4.0] * 30 + [1.0] * 30)
    assert TR.wasserstein_shrinkage(r) == pytest.approx(0.75)
    assert TR.wasserstein_shrinkage(TR.TrainingReport("1")) == 0.0
