"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line in the
terminal summary (see ``pytest_terminal_summary`` in conftest)."""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import tree_bytes
from voxelforge import evaluation as E
from voxelforge import losses as L
from voxelforge import networks as N
from voxelforge import tensor as T
from voxelforge import training as TR
from voxelforge.data import BatchTriple, embed_text, make_dataset, split_dataset
from voxelforge.divergences import (DiscreteDistribution, gan_value, jsd, kl_divergence, optimal_discriminator,
                                    wasserstein1_bruteforce, wasserstein1_empirical)
from voxelforge.losses import TrainingConfig
from voxelforge.mesh import marching_cubes
from voxelforge.networks import NetworkSpec
from voxelforge.tensor import Parameter, Tensor

EPS = 1e-3


def gate(record, name, ok, detail):
    record(name, bool(ok), detail)
    assert ok, f"{name}: {detail}"


# -- gradients -----------------------------------------------------------------------

def _layer_checks(rng):
    """(label, closure, input or parameter list) for every layer type."""
    x = rng.normal(size=(2, 3, 4, 4, 4))
    w = Parameter(rng.normal(size=(2, 3, 4, 4, 4)) * 0.3)
    wd = Parameter(rng.normal(size=(3, 2, 4, 4, 4)) * 0.3)
    b = Parameter(rng.normal(size=2))
    fw = Parameter(rng.normal(size=(6, 5)))
    fb = Parameter(rng.normal(size=5))
    v = rng.normal(size=(3, 6))
    yield "conv3d.x", lambda t: T.sum(T.square(T.conv3d(t, w, b, stride=2, pad=1))), x
    yield "conv3d.w", lambda: T.sum(T.square(T.conv3d(Tensor(x), w, b, stride=2, pad=1))), [w, b]
    yd = rng.normal(size=(1, 3, 2, 2, 2))
    yield "deconv3d.x", lambda t: T.sum(T.square(T.deconv3d(t, wd, b, stride=2, pad=1))), yd
    yield "deconv3d.w", lambda: T.sum(T.square(T.deconv3d(Tensor(yd), wd, b, stride=2, pad=1))), [wd, b]
    yield "fc.x", lambda t: T.sum(T.square(T.fully_connected(t, fw, fb))), v
    yield "fc.w", lambda: T.sum(T.square(T.fully_connected(Tensor(v), fw, fb))), [fw, fb]
    yield "sigmoid", lambda t: T.sum(T.square(T.sigmoid(t))), v
    yield "leaky_relu", lambda t: T.sum(T.mul(T.leaky_relu(t, 0.2), Tensor(v + 1.0))), v + 0.01 * np.sign(v)
    yield "tile", lambda t: T.sum(T.square(N.spatial_tile_embedding(t, 2))), rng.normal(size=(2, 128))
    g = NetworkSpec("stage2_gen_v0", base_channels=2, low_res=4, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    g.params["res1.conv2.w"].data[...] = rng.normal(size=g.params["res1.conv2.w"].shape) * 0.3
    r = rng.normal(size=(1, 4, 2, 2, 2))
    yield "residual.x", lambda t: T.sum(T.square(N.residual_block(t, g.params, "res1."))), r
    yield "residual.w", lambda: T.sum(T.square(N.residual_block(Tensor(r), g.params, "res1."))), \
        [g.params["res1.conv1.w"], g.params["res1.conv2.w"]]


def _critic_checks(rng, seed):
    """Full critic graphs, w.r.t. every input and (with the GP) every parameter."""
    low, high = rng.random((2, 4, 4, 4, 4)), rng.random((2, 4, 8, 8, 8))
    t = np.stack([embed_text(w) for w in ("red table", "blue chair")]).astype(np.float64)
    nets = {k: NetworkSpec(k, base_channels=2, low_res=4, seed=seed * 7 + i, dtype=np.float64)
            for i, k in enumerate(("stage1_critic", "critic_v0", "critic_v1"))}
    d1, d0, dv1 = nets["stage1_critic"], nets["critic_v0"], nets["critic_v1"]
    yield "stage1_critic.s", lambda x: T.sum(d1(x, t)), low
    yield "stage1_critic.t", lambda x: T.sum(d1(low, x)), t
    yield "critic_v0.high", lambda x: T.sum(d0(x, low)), high
    yield "critic_v0.low", lambda x: T.sum(d0(high, x)), low
    yield "critic_v1.s", lambda x: T.sum(dv1(t, x)), high
    yield "critic_v1.t", lambda x: T.sum(dv1(x, high)), t
    # the gradient penalty differentiates the critic twice
    critics = (("stage1_critic", d1, lambda a, b: d1(b, a), [t, low]),
               ("critic_v0", d0, lambda a, b: d0(a, b), [high, low]),
               ("critic_v1", dv1, lambda a, b: dv1(a, b), [t, high]))
    for name, d, crit, xs in critics:
        yield f"{name}.gp.params", (lambda c=crit, xs=xs: L.gradient_penalty(c, xs)), d.parameters


def test_gradient_correctness(record):
    start = time.perf_counter()
    worst, where, checks, stats = 0.0, "", 0, {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for label, f, arg in itertools.chain(_layer_checks(rng), _critic_checks(rng, seed)):
            if isinstance(arg, list):
                err = T.grad_check_parameters(f, arg, eps=EPS, coords=6, rng=rng, kink_safe=True, stats=stats)
            else:
                err = T.grad_check(f, arg, eps=EPS, coords=12, rng=rng, kink_safe=True, stats=stats)
            checks += 1
            if err > worst:
                worst, where = err, f"{label} seed {seed}"
    elapsed = time.perf_counter() - start
    gate(record, "gradient correctness", worst <= 1e-3 and elapsed < 120,
         f"{checks} checks over 20 seeds, {stats['checked']} coordinates (skipped {stats['skipped']} straddling "
         f"a leaky_relu kink), max rel err {worst:.2e} ({where}), eps {EPS}, {elapsed:.0f}s")


# -- divergences ---------------------------------------------------------------------

def test_divergence_oracle_suite(record):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, laws = 0.0, True
    for _ in range(100):
        n = int(rng.integers(2, 8))
        p = DiscreteDistribution.on_indices(rng.dirichlet(np.ones(n)))
        q = DiscreteDistribution.on_indices(rng.dirichlet(np.ones(n)))
        j = jsd(p, q)
        worst = max(worst, abs(gan_value(p, q, optimal_discriminator(p, q)) - (2 * j - 2 * math.log(2))))
        laws &= kl_divergence(p, q) >= 0 and kl_divergence(q, p) >= 0
        laws &= abs(j - jsd(q, p)) <= 1e-15 and -1e-15 <= j <= math.log(2) + 1e-15
    elapsed = time.perf_counter() - start
    gate(record, "divergence oracle suite", worst <= 1e-9 and laws and elapsed < 10,
         f"100 pairs, max |V(D*,G) - (2 JSD - 2 ln 2)| = {worst:.1e}, laws hold: {laws}, {elapsed:.2f}s")


def test_wasserstein_enumeration(record):
    start = time.perf_counter()
    grid = [-1.0, 0.0, 0.5, 2.0]
    worst, pairs = 0.0, 0
    for n in range(1, 5):
        supports = list(itertools.combinations_with_replacement(grid, n))
        for a, b in itertools.product(supports, repeat=2):
            worst = max(worst, abs(wasserstein1_empirical(a, b) - wasserstein1_bruteforce(a, b)))
            pairs += 1
    elapsed = time.perf_counter() - start
    gate(record, "W1 vs exhaustive transport", worst <= 1e-9 and elapsed < 30,
         f"{pairs} pairs, max diff {worst:.1e}, {elapsed:.2f}s")


# -- losses --------------------------------------------------------------------------

def test_gradient_penalty_calibration(record):
    rng = np.random.default_rng(0)
    t, s = rng.random((3, 128)), rng.random((3, 4, 2, 2, 2))
    unit = L.gradient_penalty(lambda a, b: T.add(T.div(T.sum(a, axis=1), math.sqrt(128)),
                                                  T.div(T.sum(T.reshape(b, (3, -1)), axis=1), math.sqrt(32))),
                              [t, s]).item()
    const = L.gradient_penalty(lambda a, b: Tensor(np.full(3, 2.5)), [t, s]).item()
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, bw = r.normal(size=128) * r.uniform(0.1, 2), r.normal(size=(4, 2, 2, 2)) * r.uniform(0.1, 2)
        crit = lambda x, y: T.add(T.sum(T.mul(x, Tensor(a)), axis=1),
                                  T.sum(T.reshape(T.mul(y, Tensor(bw)), (3, -1)), axis=1))
        expected = (np.linalg.norm(a) - 1) ** 2 + (np.linalg.norm(bw) - 1) ** 2
        worst = max(worst, abs(L.gradient_penalty(crit, [t, s]).item() - expected) / max(1.0, expected))
    gate(record, "gradient-penalty calibration", unit <= 1e-10 and const == 2 and worst <= 1e-6,
         f"unit-gradient {unit:.1e}, constant critic {const} (2 inputs), linear max rel err {worst:.1e}")


def test_loss_formula_structure(record):
    rng = np.random.default_rng(0)
    t = np.stack([embed_text(w) for w in ("red table", "blue chair")])

    def batch(mis_scale):
        return BatchTriple(t, rng.random((2, 4, 8, 8, 8)), rng.random((2, 4, 4, 4, 4)), t[::-1].copy(),
                           rng.random((2, 4, 8, 8, 8)) * mis_scale, t, ["a", "b"], [("a", "b"), ("b", "a")])

    no_gp = TrainingConfig(lambda_gp=0.0)
    g1 = NetworkSpec("stage1_gen", base_channels=2, low_res=4, seed=1).freeze()
    g0 = NetworkSpec("stage2_gen_v0", base_channels=2, low_res=4, seed=2)
    gv1 = NetworkSpec("stage2_gen_v1", base_channels=2, low_res=4, seed=3)
    cancel, _ = L.v1_critic_loss(g1, gv1, lambda a, b: Tensor(np.full(a.shape[0], 1.75)), batch(1.0), no_gp)
    b1 = batch(1.0)
    b2 = BatchTriple(b1.matched_t, b1.matched_s, b1.matched_low, b1.matched_t.copy(), rng.random(b1.mismatched_s.shape),
                     b1.embeddings, b1.matched_ids, b1.mismatched_ids)
    cfg = TrainingConfig()
    d0 = NetworkSpec("critic_v0", base_channels=2, low_res=4, seed=4)
    dv1 = NetworkSpec("critic_v1", base_channels=2, low_res=4, seed=5)
    v0a = L.v0_critic_loss(g1, g0, d0, b1, cfg, np.random.default_rng(9))[0].item()
    v0b = L.v0_critic_loss(g1, g0, d0, b2, cfg, np.random.default_rng(9))[0].item()
    v1a = L.v1_critic_loss(g1, gv1, dv1, b1, cfg, np.random.default_rng(9))[0].item()
    v1b = L.v1_critic_loss(g1, gv1, dv1, b2, cfg, np.random.default_rng(9))[0].item()
    ok = cancel.item() == 0.0 and v0a == v0b and v1a != v1b
    gate(record, "loss-formula structure", ok,
         f"v1 k+k-2k = {cancel.item()}, v0 {v0a:.6f} -> {v0b:.6f}, v1 {v1a:.6f} -> {v1b:.6f} under mismatch replacement")


# -- desk-scale training ---------------------------------------------------------------

@pytest.fixture(scope="session")
def stage1_run(tmp_path_factory):
    ds = make_dataset(64, seed=0)
    out = tmp_path_factory.mktemp("stage1")
    start = time.perf_counter()
    report = TR.train("1", ds, TrainingConfig(iterations=500), out)
    return ds, out, report, time.perf_counter() - start


@pytest.mark.slow
def test_stage1_training(record, stage1_run):
    ds, out, report, elapsed = stage1_run
    g = N.load_checkpoint(out / "stage1_gen.vfc")
    d = N.load_checkpoint(out / "stage1_critic.vfc")
    finite = all(np.all(np.isfinite(a)) for a in g.arrays() + d.arrays())
    finite &= bool(np.all(np.isfinite(report.critic_loss)) and np.all(np.isfinite(report.gen_loss)))
    mag = TR.smoothed(np.abs(report.wasserstein))
    shrink = TR.wasserstein_shrinkage(report)
    gate(record, "StageI desk-scale training", shrink >= 0.5 and finite and elapsed < 1800,
         f"|W| running max {mag.max():.3f} at iter {int(mag.argmax())}, final {mag[-1]:.3f}, "
         f"shrinkage {shrink:.1%} (need >= 50%), finite {finite}, {elapsed:.0f}s")


def occupancy_correlation(high, low):
    up = N.upsample2(Tensor(low)).data
    a, b = high[:, 3].reshape(len(high), -1), up[:, 3].reshape(len(up), -1)
    return float(np.mean([np.corrcoef(x, y)[0, 1] for x, y in zip(a, b)]))


@pytest.mark.slow
def test_stage2_training(record, stage1_run, tmp_path_factory):
    ds, s1_dir, _, _ = stage1_run
    g1_path = s1_dir / "stage1_gen.vfc"
    g1 = N.load_checkpoint(g1_path).freeze()
    t = np.stack([s.embedding for s in ds.samples])
    with T.no_grad():
        low = g1(t).data
    sp = split_dataset(ds.ids, 0)
    test = ds.subset(sp.test)
    evaluator = E.Evaluator.fit(ds.subset(sp.train))
    lines, ok = [], True
    reports = {}
    for variant in ("v0", "v1"):
        out = tmp_path_factory.mktemp(f"stage2{variant}")
        start = time.perf_counter()
        TR.train(f"2{variant}", ds, TrainingConfig(iterations=300), out, stage1_checkpoint=g1_path)
        elapsed = time.perf_counter() - start
        g2_path = out / TR.file_names(f"2{variant}")[0]
        high = E.generate_high(g1, N.load_checkpoint(g2_path), t)
        corr = occupancy_correlation(high, low)
        rep = E.evaluate_model(g1_path, g2_path, variant, test, evaluator)
        reports[variant] = rep
        emitted = np.isfinite(rep.class_acc) and np.isfinite(rep.mse)
        ok &= corr >= 0.5 and emitted
        lines.append(f"{variant}: corr {corr:.3f}, acc {rep.class_acc:.3f}, mse {rep.mse:.4f}, {elapsed:.0f}s")
    order = "v1 < v0" if reports["v1"].mse < reports["v0"].mse else "v0 <= v1"
    gate(record, "StageII desk-scale training (v0, v1)", ok, "; ".join(lines) + f"; mse ordering {order} (reported)")


# -- metrics -------------------------------------------------------------------------

def test_metrics_sanity(record):
    ds = make_dataset(200, seed=0)
    sp = split_dataset(ds.ids, 0)
    train, test = ds.subset(sp.train), ds.subset(sp.test)
    evaluator = E.Evaluator.fit(train)
    truth = E.evaluate_dataset(test, evaluator)
    noise = np.random.default_rng(0).random((len(test), 4, 16, 16, 16)).astype(np.float32)
    emb = np.stack([s.embedding for s in test.samples])
    noise_mse = E.embedding_mse(evaluator.encoder, noise, emb)
    gate(record, "metrics sanity", truth.class_acc >= 0.95 and truth.mse * 2 <= noise_mse,
         f"ground-truth acc {truth.class_acc:.3f} on {len(test)} test grids, mse {truth.mse:.5f} vs noise "
         f"{noise_mse:.5f} (ratio {noise_mse / truth.mse:.1f})")


# -- meshes --------------------------------------------------------------------------

def test_marching_cubes(record):
    def grid(occ):
        g = np.zeros((4,) + occ.shape)
        g[3] = occ
        return g

    one = np.zeros((3, 3, 3))
    one[1, 1, 1] = 1
    single = marching_cubes(grid(one))
    rng = np.random.default_rng(0)
    solids = [np.ones((4, 4, 4))] + [(rng.random((6, 6, 6)) > 0.5).astype(float) for _ in range(20)]
    watertight = all(marching_cubes(grid(s)).is_watertight() for s in solids)
    empty = marching_cubes(np.zeros((4, 5, 5, 5)))
    ok = single.is_watertight() and single.euler_characteristic() == 2 and watertight
    ok &= len(empty.triangles) == 0 and len(empty.vertices) == 0
    gate(record, "marching cubes", ok,
         f"single voxel chi={single.euler_characteristic()}, {len(solids)} padded solids watertight: {watertight}, "
         f"empty grid -> {len(empty.triangles)} triangles")


# -- CLI -----------------------------------------------------------------------------

def test_cli_determinism(record, pipeline_runs):
    a, b = pipeline_runs
    ta, tb = tree_bytes(a), tree_bytes(b)
    differ = sorted(k for k in ta.keys() | tb.keys() if ta.get(k) != tb.get(k))
    gate(record, "CLI determinism", not differ and len(ta) > 0,
         f"{len(ta)} output files from gen-data/train/generate/evaluate/export-mesh, differing: {differ or 'none'}")
