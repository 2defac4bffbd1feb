"""Attention-MIL grading network written directly in numpy.

Layer stack for one bag ``X`` of ``T`` tiles with ``d`` features each::

    H  = dropout(tanh(X W_red + b_red))                  T x 128   reduction
    G  = tanh(H W_att + b_att)                           T x 128   tile scoring
    a  = softmax_over_tiles(G w_score)                   T
    z  = dropout(a^T H)                                  128       attention pooling
    h1 = dropout(relu(z W_c1 + b_c1))                    200
    h2 = dropout(relu(h1 W_c2 + b_c2))                   100
    r  = h2 W_out + b_out                                n_classes  risk vector

The scalar tile score has no bias because a constant shift cancels in the
softmax. Dropout is inverted (kept units scaled by ``1 / (1 - rate)``), so
deterministic inference needs no rescaling. The output is a per-class risk;
no softmax is applied and the predicted class is the argmin.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .losses import LossConfig
from .numerics import STREAM_DROPOUT, STREAM_INIT, STREAM_SHUFFLE, ContractError, RandomStream

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gradeconf-attention-mil"
CHECKPOINT_VERSION = 1

PARAM_ORDER = (
    "W_red", "b_red",
    "W_att", "b_att", "w_score",
    "W_c1", "b_c1",
    "W_c2", "b_c2",
    "W_out", "b_out",
)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class Bag:
    """One slide: ``T x d`` tile features and an ordinal grade."""

    tiles: np.ndarray
    label: int
    bag_id: str

    def __post_init__(self) -> None:
        self.tiles = np.asarray(self.tiles, dtype=np.float64)
        if self.tiles.ndim != 2 or self.tiles.shape[0] < 1:
            raise ContractError(f"bag {self.bag_id}: tiles must be a non-empty T x d matrix")
        if not np.all(np.isfinite(self.tiles)):
            raise ContractError(f"bag {self.bag_id}: non-finite tile features")
        if self.label < 0:
            raise ContractError(f"bag {self.bag_id}: negative label")
        self.label = int(self.label)


@dataclass
class ArchitectureConfig:
    input_dim: int = 64
    reduction_width: int = 128
    attention_width: int = 128
    classifier_widths: tuple[int, int] = (200, 100)
    n_classes: int = 4
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        self.classifier_widths = tuple(int(w) for w in self.classifier_widths)
        widths = (self.input_dim, self.reduction_width, self.attention_width, *self.classifier_widths)
        if len(self.classifier_widths) != 2 or min(widths) < 1:
            raise ContractError("all layer widths must be >= 1 and there are exactly two hidden classifier layers")
        if self.n_classes < 2:
            raise ContractError("need at least two classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        r, a = self.reduction_width, self.attention_width
        c1, c2 = self.classifier_widths
        return {
            "W_red": (self.input_dim, r), "b_red": (r,),
            "W_att": (r, a), "b_att": (a,), "w_score": (a,),
            "W_c1": (r, c1), "b_c1": (c1,),
            "W_c2": (c1, c2), "b_c2": (c2,),
            "W_out": (c2, self.n_classes), "b_out": (self.n_classes,),
        }


class AttentionMilParameters:
    """All trainable weights, stored in one flat float64 buffer.

    ``arrays`` maps layer names to reshaped views into ``flat`` so the
    optimiser can update everything with a few vector operations.
    """

    def __init__(self, arrays: dict[str, np.ndarray], arch: ArchitectureConfig, seed: int = 0, meta: Optional[dict] = None):
        shapes = arch.shapes()
        if set(arrays) != set(shapes):
            raise ContractError(f"parameter names {sorted(arrays)} do not match the architecture")
        for name, shape in shapes.items():
            if np.shape(arrays[name]) != shape:
                raise ContractError(f"{name}: shape {np.shape(arrays[name])}, expected {shape}")
        self.arch = arch
        self.seed = int(seed)
        self.meta = dict(meta or {})
        self.flat = np.concatenate([np.asarray(arrays[k], dtype=np.float64).ravel() for k in PARAM_ORDER])
        self.arrays = _views(self.flat, shapes)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "AttentionMilParameters":
        return AttentionMilParameters(self.arrays, self.arch, self.seed, self.meta)

    def equals(self, other: "AttentionMilParameters") -> bool:
        return self.arch == other.arch and np.array_equal(self.flat, other.flat)


def _views(flat: np.ndarray, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name in PARAM_ORDER:
        size = math.prod(shapes[name])
        out[name] = flat[offset:offset + size].reshape(shapes[name])
        offset += size
    return out


def flatten_gradients(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k]).ravel() for k in PARAM_ORDER])


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    rmsprop_momentum: float = 0.5
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-7
    early_stopping_patience: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.learning_rate < 0 or self.early_stopping_patience < 1:
            raise ContractError("epochs >= 1, learning_rate >= 0 and patience >= 1 are required")


class InferenceCounter:
    """Counts forward passes; used to account for the cost of each confidence method."""

    def __init__(self) -> None:
        self.forward_passes = 0

    def add(self, n: int = 1) -> None:
        self.forward_passes += n


def init_parameters(arch: ArchitectureConfig, seed: int) -> AttentionMilParameters:
    """Fan-in scaled uniform weights (``U(+-sqrt(3 / fan_in))``), zero biases."""
    stream = RandomStream(seed, STREAM_INIT)
    arrays = {}
    for name in PARAM_ORDER:
        shape = arch.shapes()[name]
        if name.startswith("b_"):
            arrays[name] = np.zeros(shape)
        else:
            limit = math.sqrt(3.0 / shape[0])
            arrays[name] = stream.uniform(-limit, limit, size=shape)
    return AttentionMilParameters(arrays, arch, seed)


# ---------------------------------------------------------------------------
# forward / backward


def _mask(stream: Optional[RandomStream], rate: float, shape) -> Optional[np.ndarray]:
    if stream is None or rate == 0.0:
        return None
    keep = stream.generator.random(shape) >= rate
    return keep / (1.0 - rate)


def _forward(p: AttentionMilParameters, X: np.ndarray, stream: Optional[RandomStream]):
    arch = p.arch
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ContractError(f"bag has {X.shape[-1]} features per tile, model expects {arch.input_dim}")
    rate = arch.dropout_rate
    a = p.arrays
    H = np.tanh(X @ a["W_red"] + a["b_red"])
    m_red = _mask(stream, rate, H.shape)
    Hd = H if m_red is None else H * m_red
    G = np.tanh(Hd @ a["W_att"] + a["b_att"])
    s = G @ a["w_score"]
    e = np.exp(s - s.max())
    att = e / e.sum()
    z = att @ Hd
    m_pool = _mask(stream, rate, z.shape)
    zd = z if m_pool is None else z * m_pool
    pre1 = zd @ a["W_c1"] + a["b_c1"]
    h1 = np.maximum(pre1, 0.0)
    m1 = _mask(stream, rate, h1.shape)
    h1d = h1 if m1 is None else h1 * m1
    pre2 = h1d @ a["W_c2"] + a["b_c2"]
    h2 = np.maximum(pre2, 0.0)
    m2 = _mask(stream, rate, h2.shape)
    h2d = h2 if m2 is None else h2 * m2
    risk = h2d @ a["W_out"] + a["b_out"]
    cache = (X, H, m_red, Hd, G, att, m_pool, zd, pre1, m1, h1d, pre2, m2, h2d)
    return risk, att, cache


def _backward(p: AttentionMilParameters, cache, d_risk: np.ndarray, out: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Gradients of every parameter; written into the flat buffer ``out`` when given."""
    X, H, m_red, Hd, G, att, m_pool, zd, pre1, m1, h1d, pre2, m2, h2d = cache
    a = p.arrays
    if out is None:
        out = np.empty_like(p.flat)
    g = _views(out, p.arch.shapes())
    np.multiply(h2d[:, None], d_risk[None, :], out=g["W_out"])
    g["b_out"][:] = d_risk
    d_h2 = a["W_out"] @ d_risk
    if m2 is not None:
        d_h2 *= m2
    d_pre2 = d_h2 * (pre2 > 0)
    np.multiply(h1d[:, None], d_pre2[None, :], out=g["W_c2"])
    g["b_c2"][:] = d_pre2
    d_h1 = a["W_c2"] @ d_pre2
    if m1 is not None:
        d_h1 *= m1
    d_pre1 = d_h1 * (pre1 > 0)
    np.multiply(zd[:, None], d_pre1[None, :], out=g["W_c1"])
    g["b_c1"][:] = d_pre1
    d_z = a["W_c1"] @ d_pre1
    if m_pool is not None:
        d_z *= m_pool
    # z = att @ Hd
    d_Hd = np.outer(att, d_z)
    d_att = Hd @ d_z
    d_s = att * (d_att - att @ d_att)
    np.matmul(G.T, d_s, out=g["w_score"])
    d_preG = np.outer(d_s, a["w_score"])
    d_preG *= 1.0 - G * G
    np.matmul(Hd.T, d_preG, out=g["W_att"])
    np.sum(d_preG, axis=0, out=g["b_att"])
    d_Hd += d_preG @ a["W_att"].T
    d_H = d_Hd if m_red is None else d_Hd * m_red
    d_preH = d_H * (1.0 - H * H)
    np.matmul(X.T, d_preH, out=g["W_red"])
    np.sum(d_preH, axis=0, out=g["b_red"])
    return g


def forward(
    p: AttentionMilParameters,
    bag: Bag | np.ndarray,
    dropout: Optional[RandomStream] = None,
    counter: Optional[InferenceCounter] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Risk vector and attention weights for one bag.

    ``dropout=None`` is the deterministic path; passing a stream samples fresh
    dropout masks from it.
    """
    X = bag.tiles if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    risk, att, _ = _forward(p, X, dropout)
    if counter is not None:
        counter.add()
    return risk, att


def loss_and_gradients(
    p: AttentionMilParameters,
    bag: Bag,
    loss: LossConfig,
    dropout: Optional[RandomStream] = None,
    out: Optional[np.ndarray] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    risk, _, cache = _forward(p, bag.tiles, dropout)
    value, d_risk = loss.value_and_grad(risk, bag.label)
    return value, _backward(p, cache, d_risk, out)


# ---------------------------------------------------------------------------
# optimisation


class RMSProp:
    """RMSProp with heavy-ball momentum, in the TensorFlow formulation::

        ms  <- decay * ms + (1 - decay) * g^2
        mom <- momentum * mom + lr * g / sqrt(ms + eps)
        w   <- w - mom

    Operates on flat parameter and gradient vectors. Every ``FLUSH_EVERY``
    steps, state entries below ``TINY`` are set to zero: parameters with a
    long run of zero gradient otherwise decay into subnormal floats, which
    are very slow to compute with and have no effect on the update.
    """

    FLUSH_EVERY = 64
    TINY = 1e-150

    def __init__(self, lr: float, decay: float = 0.9, momentum: float = 0.5, eps: float = 1e-7):
        self.lr, self.decay, self.momentum, self.eps = lr, decay, momentum, eps
        self.ms: Optional[np.ndarray] = None
        self.mom: Optional[np.ndarray] = None
        self._tmp: Optional[np.ndarray] = None
        self.grad: Optional[np.ndarray] = None
        self.steps = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "RMSProp":
        return cls(cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_momentum, cfg.rmsprop_epsilon)

    def step(self, w: np.ndarray, g: np.ndarray) -> None:
        if self.ms is None:
            self.ms, self.mom, self._tmp = np.zeros_like(g), np.zeros_like(g), np.empty_like(g)
        ms, mom, tmp = self.ms, self.mom, self._tmp
        ms *= self.decay
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.decay
        ms += tmp
        np.add(ms, self.eps, out=tmp)
        np.sqrt(tmp, out=tmp)
        np.divide(g, tmp, out=tmp)
        tmp *= self.lr
        mom *= self.momentum
        mom += tmp
        w -= mom
        self.steps += 1
        if self.steps % self.FLUSH_EVERY == 0:
            for state in (ms, mom):
                np.abs(state, out=tmp)
                state[tmp < self.TINY] = 0.0


def train_step(
    p: AttentionMilParameters,
    bag: Bag,
    cfg: TrainConfig,
    opt: RMSProp,
    dropout: Optional[RandomStream],
) -> float:
    """One optimisation step on a single bag; updates ``p`` and ``opt`` in place."""
    if opt.grad is None or opt.grad.shape != p.flat.shape:
        opt.grad = np.empty_like(p.flat)
    value, _ = loss_and_gradients(p, bag, cfg.loss, dropout, opt.grad)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value!r} on bag {bag.bag_id}")
    opt.step(p.flat, opt.grad)
    return value


def mean_loss(p: AttentionMilParameters, bags: Sequence[Bag], loss: LossConfig) -> float:
    return float(np.mean([loss.value(forward(p, b)[0], b.label) for b in bags]))


def accuracy(p: AttentionMilParameters, bags: Sequence[Bag]) -> float:
    return float(np.mean([int(np.argmin(forward(p, b)[0])) == b.label for b in bags]))


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train(
    train_bags: Sequence[Bag],
    val_bags: Sequence[Bag],
    arch: ArchitectureConfig,
    cfg: TrainConfig,
    validation_loss: Optional[Callable[[AttentionMilParameters, Sequence[Bag]], float]] = None,
) -> tuple[AttentionMilParameters, History]:
    """Train with one bag per step and early stopping on mean validation loss.

    Returns the parameters from the epoch with the lowest validation loss.
    ``validation_loss`` overrides how that loss is computed (dropout off,
    training loss by default).
    """
    if not train_bags or not val_bags:
        raise ContractError("training and validation splits must both be non-empty")
    cfg.loss.check(arch.n_classes)
    for b in (*train_bags, *val_bags):
        if b.label >= arch.n_classes:
            raise ContractError(f"bag {b.bag_id}: label {b.label} >= n_classes {arch.n_classes}")
    if validation_loss is None:
        def validation_loss(p, bags):
            return mean_loss(p, bags, cfg.loss)

    p = init_parameters(arch, cfg.seed)
    opt = RMSProp.from_config(cfg)
    shuffle = RandomStream(cfg.seed, STREAM_SHUFFLE)
    drop = RandomStream(cfg.seed, STREAM_DROPOUT)
    hist = History()
    best, best_loss, stale = p.copy(), math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        losses = [train_step(p, train_bags[i], cfg, opt, drop) for i in shuffle.permutation(len(train_bags))]
        hist.train_loss.append(float(np.mean(losses)))
        val = float(validation_loss(p, val_bags))
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        hist.val_loss.append(val)
        hist.stopped_epoch = epoch
        if val < best_loss:
            best, best_loss, stale = p.copy(), val, 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stopping_patience:
                break
        log.debug("epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], val)
    best.meta.update(best_epoch=hist.best_epoch, best_val_loss=best_loss)
    return best, hist


# ---------------------------------------------------------------------------
# inference


def predict(
    p: AttentionMilParameters, bags: Iterable[Bag], counter: Optional[InferenceCounter] = None
) -> np.ndarray:
    """Deterministic risk vectors, one row per bag."""
    return np.array([forward(p, b, counter=counter)[0] for b in bags])


def mc_inference(
    p: AttentionMilParameters,
    bag: Bag,
    M: int = 50,
    stream: Optional[RandomStream] = None,
    counter: Optional[InferenceCounter] = None,
) -> np.ndarray:
    """``M`` forward passes with dropout active, shape ``(M, n_classes)``."""
    if M < 2:
        raise ContractError("MC dropout needs at least two samples")
    if stream is None:
        stream = RandomStream(p.seed, STREAM_DROPOUT, (1,))
    return np.array([forward(p, bag, dropout=stream, counter=counter)[0] for _ in range(M)])


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(p: AttentionMilParameters, path) -> None:
    """Write an ``.npz`` container: a JSON header plus one array per layer."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(p.arch),
        "seed": p.seed,
        "meta": p.meta,
        "shapes": {k: list(v.shape) for k, v in p.arrays.items()},
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **p.arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expected_classes: Optional[int] = None) -> AttentionMilParameters:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            arrays = {k: np.array(data[k]) for k in PARAM_ORDER}
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    arch = ArchitectureConfig(**header["architecture"])
    for name, shape in header["shapes"].items():
        if list(arrays[name].shape) != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, header says {shape}")
    if expected_classes is not None and arch.n_classes != expected_classes:
        raise CheckpointError(f"{path}: checkpoint has {arch.n_classes} classes, expected {expected_classes}")
    try:
        return AttentionMilParameters(arrays, arch, int(header["seed"]), header.get("meta", {}))
    except ContractError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def write_bag(bag: Bag, path) -> None:
    """Header line ``bag_id,label,T,d`` then ``T`` rows of ``d`` comma-separated reals."""
    T, d = bag.tiles.shape
    lines = [f"{bag.bag_id},{bag.label},{T},{d}"]
    lines.extend(",".join(repr(float(x)) for x in row) for row in bag.tiles)
    Path(path).write_text("\n".join(lines) + "\n")


def read_bag(path) -> Bag:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ContractError(f"{path}: empty bag file")
    try:
        bag_id, label, T, d = lines[0].split(",")
        T, d, label = int(T), int(d), int(label)
        rows = [[float(x) for x in line.split(",")] for line in lines[1:] if line.strip()]
    except ValueError as exc:
        raise ContractError(f"{path}: malformed bag file ({exc})") from exc
    if len(rows) != T or any(len(r) != d for r in rows):
        raise ContractError(f"{path}: header declares {T}x{d} tiles but body does not match")
    return Bag(np.array(rows), label, bag_id)


def read_bag_dir(directory) -> list[Bag]:
    """All ``*.bag`` files in a directory, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"bag directory not found: {directory}")
    return [read_bag(f) for f in sorted(directory.glob("*.bag"))]
