"""Alternating critic/generator training for StageI and StageII (v0, v1)."""
from __future__ import annotations

import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .data import Dataset, sample_batch
from .losses import Adam, TrainingConfig
from .networks import NetworkSpec, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("1", "2v0", "2v1")
STATE_MAGIC = b"VFS1"
LOG_HEADER = "iter,critic_loss,gen_loss,wall_ms"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingReport:
    stage: str
    iterations: list[int] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    gen_loss: list[float] = field(default_factory=list)
    wasserstein: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    checkpoint_dir: Path | None = None

    def rows(self, timing: bool = False) -> list[str]:
        out = []
        for i, c, g, w in zip(self.iterations, self.critic_loss, self.gen_loss, self.wall_ms):
            out.append(f"{i},{c:.9g},{g:.9g},{w:.3f}" if timing else f"{i},{c:.9g},{g:.9g},0")
        return out


def smoothed(values, window: int = 25) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def wasserstein_shrinkage(report: TrainingReport, window: int = 25) -> float:
    """1 - final / running max of the smoothed |Wasserstein estimate|."""
    mag = smoothed(np.abs(report.wasserstein), window)
    if mag.size == 0 or mag.max() == 0:
        return 0.0
    return float(1.0 - mag[-1] / mag.max())


def file_names(stage: str) -> tuple[str, str, str, str]:
    """(generator checkpoint, critic checkpoint, state file, loss log) names for ``stage``."""
    if stage == "1":
        gen, critic = "stage1_gen", "stage1_critic"
    else:
        v = stage[1:]
        gen, critic = f"stage2_gen_{v}", f"critic_{v}"
    return f"{gen}.vfc", f"{critic}.vfc", f"state_{stage}.vfs", f"losses_{stage}.csv"


def _write_state(path: Path, iteration: int, opts: list[Adam]) -> None:
    fh = io.BytesIO()
    fh.write(STATE_MAGIC)
    fh.write(struct.pack("<II", iteration, len(opts)))
    for opt in opts:
        fh.write(struct.pack("<II", opt.t, len(opt.m)))
        for arr in opt.m + opt.v:
            T.write_tensor(fh, arr)
    path.write_bytes(fh.getvalue())


def _read_state(path: Path, opts: list[Adam]) -> int:
    with open(path, "rb") as fh:
        if fh.read(4) != STATE_MAGIC:
            raise ValueError(f"{path}: not a training state file")
        iteration, n = struct.unpack("<II", fh.read(8))
        if n != len(opts):
            raise ValueError(f"{path}: optimizer count mismatch")
        for opt in opts:
            opt.t, count = struct.unpack("<II", fh.read(8))
            if count != len(opt.m):
                raise ValueError(f"{path}: moment count mismatch")
            arrays = [T.read_tensor(fh) for _ in range(2 * count)]
            for dst, src in zip(opt.m + opt.v, arrays):
                dst[...] = src
    return iteration


def _write_log(path: Path, rows: list[str]) -> None:
    lines = [LOG_HEADER, *rows]
    crit = [float(r.split(",")[1]) for r in rows]
    gen = [float(r.split(",")[2]) for r in rows]
    lines.append(f"# iterations={len(rows)}")
    if rows:
        lines.append(f"# final_critic_loss={crit[-1]:.9g} final_gen_loss={gen[-1]:.9g}")
        lines.append(f"# critic_loss_min={min(crit):.9g} critic_loss_max={max(crit):.9g}")
    path.write_text("\n".join(lines) + "\n")


def _read_log_rows(path: Path) -> list[str]:
    if not path.exists():
        return []
    return [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#") and ln != LOG_HEADER]


def _objective(stage: str):
    if stage == "1":
        return (lambda g1, g, d, b, cfg, rng: L.stage1_critic_loss(g, d, b, cfg, rng),
                lambda g1, g, d, b: L.stage1_generator_loss(g, d, b))
    if stage == "2v0":
        return L.v0_critic_loss, L.v0_generator_loss
    return L.v1_critic_loss, L.v1_generator_loss


def build_networks(stage: str, cfg: TrainingConfig, low_res: int) -> tuple[NetworkSpec, NetworkSpec]:
    gen_seed, critic_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    if stage == "1":
        kinds = ("stage1_gen", "stage1_critic")
    else:
        kinds = (f"stage2_gen_{stage[1:]}", f"critic_{stage[1:]}")
    return (NetworkSpec(kinds[0], cfg.base_channels, low_res, seed=gen_seed),
            NetworkSpec(kinds[1], cfg.base_channels, low_res, seed=critic_seed))


def train(stage: str, train_set: Dataset, cfg: TrainingConfig, checkpoint_dir, stage1_checkpoint=None,
          resume: bool = False, timing: bool = False) -> TrainingReport:
    """Run ``cfg.iterations`` generator iterations, each preceded by
    ``cfg.critic_steps_per_gen_step`` critic updates.

    Writes checkpoints every ``cfg.checkpoint_every`` iterations and at the end,
    plus a CSV loss log. With ``resume`` the run continues from the state saved in
    ``checkpoint_dir`` and keeps numbering iterations from there.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    cfg.validate()
    ckdir = Path(checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    gen_name, critic_name, state_name, log_name = file_names(stage)

    g1 = None
    if stage != "1":
        if stage1_checkpoint is None or not Path(stage1_checkpoint).exists():
            raise FileNotFoundError(f"StageII training needs a StageI checkpoint, got {stage1_checkpoint}")
        g1 = load_checkpoint(stage1_checkpoint, expect_kind="stage1_gen").freeze()
        if g1.low_res != train_set.low_res:
            raise ValueError(f"StageI checkpoint is {g1.low_res}^3 but data is {train_set.low_res}^3")

    gen, critic = build_networks(stage, cfg, train_set.low_res)
    opt_g = Adam.from_config(gen.parameters, cfg)
    opt_d = Adam.from_config(critic.parameters, cfg)
    start = 0
    rows: list[str] = []
    if resume:
        for name in (gen_name, critic_name, state_name):
            if not (ckdir / name).exists():
                raise FileNotFoundError(f"cannot resume: {ckdir / name} missing")
        gen = load_checkpoint(ckdir / gen_name, expect_kind=gen.kind)
        critic = load_checkpoint(ckdir / critic_name, expect_kind=critic.kind)
        opt_g = Adam.from_config(gen.parameters, cfg)
        opt_d = Adam.from_config(critic.parameters, cfg)
        start = _read_state(ckdir / state_name, [opt_g, opt_d])
        rows = _read_log_rows(ckdir / log_name)[:start]

    report = TrainingReport(stage, checkpoint_dir=ckdir)
    critic_loss_fn, gen_loss_fn = _objective(stage)
    resolution = "low" if stage == "1" else "high"
    k = cfg.critic_steps_per_gen_step

    def save(iteration):
        save_checkpoint(gen, ckdir / gen_name)
        save_checkpoint(critic, ckdir / critic_name)
        _write_state(ckdir / state_name, iteration, [opt_g, opt_d])
        _write_log(ckdir / log_name, rows + report.rows(timing))

    if cfg.iterations == 0:
        save(start)
        return report

    for it in range(start, start + cfg.iterations):
        t0 = time.perf_counter()
        for j in range(k):
            batch = sample_batch(train_set, cfg.batch_size, cfg.seed, it * (k + 1) + j, resolution)
            rng = np.random.default_rng([cfg.seed, it, j, 1])
            opt_d.zero_grad()
            try:
                loss, terms = critic_loss_fn(g1, gen, critic, batch, cfg, rng)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"stage {stage} iteration {it}: {exc}") from exc
            T.backward(loss, critic.parameters)
            _check_finite(stage, it, "critic", loss.item(), critic)
            opt_d.step()
            if cfg.clip_value is not None:
                L.clip_weights(critic.parameters, cfg.clip_value)
        batch = sample_batch(train_set, cfg.batch_size, cfg.seed, it * (k + 1) + k, resolution)
        opt_g.zero_grad()
        gloss = gen_loss_fn(g1, gen, critic, batch)
        T.backward(gloss, gen.parameters)
        _check_finite(stage, it, "generator", gloss.item(), gen)
        opt_g.step()

        report.iterations.append(it)
        report.critic_loss.append(loss.item())
        report.gen_loss.append(gloss.item())
        report.wasserstein.append(terms.wasserstein)
        report.wall_ms.append((time.perf_counter() - t0) * 1000.0)
        if (it + 1) % 25 == 0:
            log.info("stage %s iter %d critic %.4f gen %.4f W %.4f", stage, it, loss.item(),
                     gloss.item(), terms.wasserstein)
        if (it + 1 - start) % cfg.checkpoint_every == 0 or it + 1 == start + cfg.iterations:
            save(it + 1)
    return report


def _check_finite(stage, it, who, loss_value, net: NetworkSpec) -> None:
    if not np.isfinite(loss_value):
        raise TrainingDivergedError(f"stage {stage} iteration {it}: non-finite {who} loss {loss_value}")
    for p in net.parameters:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError(f"stage {stage} iteration {it}: non-finite gradient in {p.name}")
