"""Quantitative indices for generated shapes.

* class accuracy: a small voxel classifier (table vs chair) trained on ground-truth
  voxels labels each generated grid; the score is the fraction labelled with the
  category of the text it was generated from.
* embedding mse: a voxel encoder trained to regress the 128-d text embedding of
  ground-truth voxels; the score is the mean squared error between its output on
  generated grids and the embeddings of the source texts.

Both nets share one layout: conv k4 s2 p1 (4->c), conv k4 s2 p1 (c->2c), leaky
ReLU 0.2 after each, then one fully connected layer. All rows of a report are
scored with the same classifier and encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import CATEGORIES, EMBED_DIM, Dataset
from .losses import Adam
from .networks import NetworkSpec, load_checkpoint
from .tensor import Parameter, Tensor

METHODS = ("dataset", "v0", "v1")


@dataclass
class EvalConfig:
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 16
    channels: int = 8
    seed: int = 0


@dataclass
class MetricsReport:
    method: str
    class_acc: float
    mse: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.class_acc <= 1.0:
            raise ValueError(f"class_acc {self.class_acc} outside [0, 1]")
        if not self.mse >= 0.0:
            raise ValueError(f"mse must be nonnegative, got {self.mse}")


class VoxelNet:
    """conv-conv-FC over [B, 4, R, R, R] grids; ``outputs`` logits or regression values."""

    def __init__(self, resolution: int, outputs: int, channels: int = 8, seed: int = 0):
        if resolution % 4:
            raise ValueError(f"resolution must be a multiple of 4, got {resolution}")
        self.resolution = resolution
        self.outputs = outputs
        rng = np.random.default_rng(seed)
        c = channels
        flat = 2 * c * (resolution // 4) ** 3

        def glorot(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape).astype(np.float32)

        self.params = {
            "conv1.w": Parameter(glorot((c, 4, 4, 4, 4), 4 * 64, c * 64), "conv1.w"),
            "conv1.b": Parameter(np.zeros(c, np.float32), "conv1.b"),
            "conv2.w": Parameter(glorot((2 * c, c, 4, 4, 4), c * 64, 2 * c * 64), "conv2.w"),
            "conv2.b": Parameter(np.zeros(2 * c, np.float32), "conv2.b"),
            "fc.w": Parameter(glorot((flat, outputs), flat, outputs), "fc.w"),
            "fc.b": Parameter(np.zeros(outputs, np.float32), "fc.b"),
        }

    @property
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 5 or x.shape[2:] != (self.resolution,) * 3:
            raise ValueError(f"expected [B, 4, {self.resolution}^3] grids, got {x.shape}")
        p = self.params
        h = T.leaky_relu(T.conv3d(x, p["conv1.w"], p["conv1.b"], stride=2, pad=1), 0.2)
        h = T.leaky_relu(T.conv3d(h, p["conv2.w"], p["conv2.b"], stride=2, pad=1), 0.2)
        return T.fully_connected(T.reshape(h, (h.shape[0], -1)), p["fc.w"], p["fc.b"])

    def predict(self, voxels, batch_size: int = 64) -> np.ndarray:
        voxels = np.asarray(voxels, dtype=np.float32)
        with T.no_grad():
            return np.concatenate([self(voxels[i:i + batch_size]).data
                                   for i in range(0, len(voxels), batch_size)])


def _fit(net: VoxelNet, inputs: np.ndarray, loss_fn, cfg: EvalConfig) -> list[float]:
    """Minibatch Adam; returns the full-set loss after every epoch."""
    opt = Adam(net.parameters, lr=cfg.learning_rate, beta1=0.9, beta2=0.999)
    rng = np.random.default_rng([cfg.seed, 0xE7A1])
    history = []
    n = len(inputs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            T.backward(loss_fn(net(inputs[idx]), idx), net.parameters)
            opt.step()
        with T.no_grad():
            history.append(loss_fn(Tensor(net.predict(inputs)), np.arange(n)).item())
    return history


def train_classifier(train: Dataset, cfg: EvalConfig | None = None) -> VoxelNet:
    """Table/chair classifier on high-res ground truth; ``.history`` holds per-epoch loss."""
    cfg = cfg or EvalConfig()
    labels = np.array([CATEGORIES.index(s.category) for s in train.samples])
    missing = [c for i, c in enumerate(CATEGORIES) if not np.any(labels == i)]
    if missing:
        raise ValueError(f"classifier training set has no samples of {missing}")
    voxels = np.stack([s.high for s in train.samples])
    net = VoxelNet(voxels.shape[-1], len(CATEGORIES), cfg.channels, cfg.seed)
    net.history = _fit(net, voxels, lambda out, idx: T.cross_entropy(out, labels[idx]), cfg)
    return net


def train_voxel_encoder(train: Dataset, cfg: EvalConfig | None = None) -> VoxelNet:
    """Regress text embeddings from high-res ground-truth voxels by MSE."""
    cfg = cfg or EvalConfig()
    if len(train) == 0:
        raise ValueError("encoder training set is empty")
    voxels = np.stack([s.high for s in train.samples])
    targets = np.stack([s.embedding for s in train.samples]).astype(np.float32)
    net = VoxelNet(voxels.shape[-1], EMBED_DIM, cfg.channels, cfg.seed + 1)

    def loss(out, idx):
        return T.mean(T.square(T.sub(out, Tensor(targets[idx]))))

    net.history = _fit(net, voxels, loss, cfg)
    return net


def classification_accuracy(classifier: VoxelNet, voxels, categories) -> float:
    """Fraction of grids whose argmax class (lowest index on ties) matches ``categories``."""
    categories = list(categories)
    if not categories:
        raise ValueError("need at least one grid")
    pred = np.argmax(classifier.predict(voxels), axis=1)
    truth = np.array([CATEGORIES.index(c) for c in categories])
    return float(np.mean(pred == truth))


def embedding_mse(encoder, voxels, embeddings) -> float:
    """Mean over pairs of the per-component squared error between encoder(voxels) and embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) == 0:
        raise ValueError("need at least one pair")
    out = encoder.predict(voxels) if hasattr(encoder, "predict") else np.asarray(encoder(voxels))
    return float(np.mean((np.asarray(out, dtype=np.float64) - embeddings) ** 2))


@dataclass
class Evaluator:
    """A classifier and encoder trained once and shared by every report row."""
    classifier: VoxelNet
    encoder: VoxelNet
    config: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def fit(cls, train: Dataset, cfg: EvalConfig | None = None) -> "Evaluator":
        cfg = cfg or EvalConfig()
        return cls(train_classifier(train, cfg), train_voxel_encoder(train, cfg), cfg)

    def score(self, method: str, voxels, test: Dataset) -> MetricsReport:
        cats = [s.category for s in test.samples]
        emb = np.stack([s.embedding for s in test.samples])
        return MetricsReport(method, classification_accuracy(self.classifier, voxels, cats),
                             embedding_mse(self.encoder, voxels, emb))


def generate_high(stage1: NetworkSpec, stage2: NetworkSpec, embeddings, batch_size: int = 16) -> np.ndarray:
    """Text embeddings -> StageI low-res -> StageII high-res grids."""
    if stage1.kind != "stage1_gen":
        raise ValueError(f"expected a stage1_gen checkpoint, got {stage1.kind}")
    if stage2.kind not in ("stage2_gen_v0", "stage2_gen_v1"):
        raise ValueError(f"expected a StageII generator checkpoint, got {stage2.kind}")
    if stage1.low_res != stage2.low_res:
        raise ValueError(f"resolution mismatch: StageI {stage1.low_res}^3, StageII expects {stage2.low_res}^3")
    emb = np.asarray(embeddings, dtype=np.float32)
    out = []
    with T.no_grad():
        for i in range(0, len(emb), batch_size):
            t = Tensor(emb[i:i + batch_size])
            low = stage1(t)
            out.append((stage2(low) if stage2.kind == "stage2_gen_v0" else stage2(low, t)).data)
    return np.concatenate(out)


def evaluate_dataset(test: Dataset, evaluator: Evaluator) -> MetricsReport:
    """The reference row: ground-truth high-res voxels of the test split."""
    return evaluator.score("dataset", np.stack([s.high for s in test.samples]), test)


def evaluate_model(stage1_ckpt, stage2_ckpt, variant: str, test: Dataset, evaluator: Evaluator) -> MetricsReport:
    """Generate a high-res grid for every test text and score it."""
    if variant not in ("v0", "v1"):
        raise ValueError(f"variant must be v0 or v1, got {variant!r}")
    g1 = stage1_ckpt if isinstance(stage1_ckpt, NetworkSpec) else load_checkpoint(stage1_ckpt, "stage1_gen")
    g2 = (stage2_ckpt if isinstance(stage2_ckpt, NetworkSpec)
          else load_checkpoint(stage2_ckpt, f"stage2_gen_{variant}"))
    if g2.kind != f"stage2_gen_{variant}":
        raise ValueError(f"variant {variant} does not match checkpoint kind {g2.kind}")
    if g2.high_res != test.high_res:
        raise ValueError(f"StageII produces {g2.high_res}^3 but the test split is {test.high_res}^3")
    voxels = generate_high(g1, g2, np.stack([s.embedding for s in test.samples]))
    return evaluator.score(variant, voxels, test)


def format_table(reports) -> str:
    """Aligned text table with Method / Class acc. / mse columns."""
    rows = [("Method", "Class acc.", "mse")]
    names = {"dataset": "DataSet", "v0": "v0", "v1": "v1"}
    rows += [(names[r.method], f"{r.class_acc:.4f}", f"{r.mse:.6f}") for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def format_kv(reports) -> str:
    return "".join(f"{r.method}.class_acc={r.class_acc:.9g}\n{r.method}.mse={r.mse:.9g}\n" for r in reports)


def parse_kv(text: str) -> list[MetricsReport]:
    values: dict[str, dict[str, float]] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        method, _, name = key.strip().partition(".")
        values.setdefault(method, {})[name] = float(val)
    return [MetricsReport(m, v["class_acc"], v["mse"]) for m, v in values.items()]
