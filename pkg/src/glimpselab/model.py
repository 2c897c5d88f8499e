"""Next-token predictor: linear input projection, stacked GRU, ReLU head, readout.

Row-vector convention throughout: a batch is a (B, features) matrix and a
layer computes ``x @ W + b``.  GRU gate matrices act on the concatenation
``[input | hidden]`` and the state update is

    h <- (1 - z) * h + z * candidate

with ``z`` the update gate, so states stay in [-1, 1] from a zero start.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor2
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .stats import wald_ci
from .worldgen import (INPUT_DIM, N_LABELS, Episode, Scene, TrainConstraint,
                       encode_batch, generate_scene, sample_episode)

log = logging.getLogger(__name__)

LAYERS = ("embed", "gru1", "gru2", "gru3", "head")
TRAIN_LOG_HEADER = ("batch", "loss", "acc_last20")
CURVE_HEADER = ("timestep", "accuracy", "ci_low", "ci_high")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    hidden_size: int = 128
    num_gru_layers: int = 3
    input_dim: int = INPUT_DIM
    output_dim: int = N_LABELS
    seq_len: int = 60
    batch_scenes: int = 64
    total_batches: int = 4000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.input_dim != INPUT_DIM or self.output_dim != N_LABELS:
            raise ValueError(f"input_dim/output_dim are fixed at {INPUT_DIM}/{N_LABELS}")
        for k in ("hidden_size", "num_gru_layers", "seq_len", "batch_scenes", "total_batches"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(hidden_size=512, seq_len=100, batch_scenes=200, total_batches=40960)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {"desk": ModelConfig.desk, "paper": ModelConfig.paper}


@dataclass
class ModelParams:
    tensors: dict[str, Tensor2]
    hidden_size: int
    num_gru_layers: int

    def __getitem__(self, k: str) -> Tensor2:
        return self.tensors[k]

    @property
    def dtype(self):
        return self.tensors["embed.W"].dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dtype=None) -> "ModelParams":
        hidden = arrays["embed.W"].shape[1]
        layers = sum(1 for k in arrays if k.startswith("gru") and k.endswith(".Wz"))
        tensors = {k: Tensor2(np.array(v, dtype=dtype or v.dtype), requires_grad=True, name=k)
                   for k, v in arrays.items()}
        p = cls(tensors, hidden, layers)
        _check_shapes(p)
        return p

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays(), dtype)


def param_shapes(hidden: int, layers: int) -> dict[str, tuple[int, int]]:
    H = hidden
    shapes = {"embed.W": (INPUT_DIM, H), "embed.b": (1, H)}
    for l in range(1, layers + 1):
        for g in ("z", "r", "h"):
            shapes[f"gru{l}.W{g}"] = (2 * H, H)
            shapes[f"gru{l}.b{g}"] = (1, H)
    shapes.update({"head.W": (H, H), "head.b": (1, H),
                   "out.W": (H, N_LABELS), "out.b": (1, N_LABELS)})
    return shapes


def _check_shapes(p: ModelParams) -> None:
    want = param_shapes(p.hidden_size, p.num_gru_layers)
    got = {k: t.shape for k, t in p.tensors.items()}
    if want != got:
        bad = sorted(set(want.items()) ^ set(got.items()))
        raise nx.ShapeError(f"parameter shapes inconsistent with config: {bad}")


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    arrays = {}
    for name, shape in param_shapes(config.hidden_size, config.num_gru_layers).items():
        if name.rsplit(".", 1)[1].startswith("b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    return ModelParams.from_arrays(arrays)


# -- forward -----------------------------------------------------------------

@dataclass
class ActivationTrace:
    """Per-layer activations, each (T, B, hidden), plus logits (T, B, 26)."""

    layers: dict[str, np.ndarray]
    logits: np.ndarray

    def __len__(self) -> int:
        return self.logits.shape[0]

    def episode(self, b: int) -> "ActivationTrace":
        return ActivationTrace({k: v[:, b] for k, v in self.layers.items()}, self.logits[:, b])


def gru_cell(x: Tensor2, h: Tensor2, Wz: Tensor2, bz: Tensor2, Wr: Tensor2, br: Tensor2,
             Wh: Tensor2, bh: Tensor2) -> Tensor2:
    xh = nx.concat_cols(x, h)
    z = nx.sigmoid(nx.add(nx.matmul(xh, Wz), bz))
    r = nx.sigmoid(nx.add(nx.matmul(xh, Wr), br))
    xrh = nx.concat_cols(x, nx.mul(r, h))
    cand = nx.tanh(nx.add(nx.matmul(xrh, Wh), bh))
    return nx.add(h, nx.mul(z, nx.sub(cand, h)))


def forward_batch(params: ModelParams, inputs: np.ndarray,
                  capture: bool = False) -> tuple[Tensor2, Optional[ActivationTrace]]:
    """Run time-major inputs (T, B, 28); logits come back as a (T*B, 26) tensor.

    Row ``t * B + b`` of the logits belongs to timestep t of sequence b.
    """
    P = params.tensors
    T, B, D = inputs.shape
    if D != INPUT_DIM:
        raise nx.ShapeError(f"inputs have {D} features, expected {INPUT_DIM}")
    dt = params.dtype
    H, L = params.hidden_size, params.num_gru_layers
    hs = [Tensor2(np.zeros((B, H), dtype=dt)) for _ in range(L)]
    grus = [(P[f"gru{l}.Wz"], P[f"gru{l}.bz"], P[f"gru{l}.Wr"], P[f"gru{l}.br"],
             P[f"gru{l}.Wh"], P[f"gru{l}.bh"]) for l in range(1, L + 1)]
    cap = {k: np.empty((T, B, H), dtype=dt) for k in ("embed",) + tuple(f"gru{l}" for l in range(1, L + 1))} if capture else None
    tops = []
    for t in range(T):
        x = Tensor2(np.asarray(inputs[t], dtype=dt))
        e = nx.add(nx.matmul(x, P["embed.W"]), P["embed.b"])
        if capture:
            cap["embed"][t] = e.data
        inp = e
        for l in range(L):
            hs[l] = gru_cell(inp, hs[l], *grus[l])
            inp = hs[l]
            if capture:
                cap[f"gru{l + 1}"][t] = inp.data
        tops.append(inp)
    top = nx.concat_rows(tops)
    head = nx.relu(nx.add(nx.matmul(top, P["head.W"]), P["head.b"]))
    logits = nx.add(nx.matmul(head, P["out.W"]), P["out.b"])
    trace = None
    if capture:
        cap["head"] = head.data.reshape(T, B, H)
        trace = ActivationTrace(cap, logits.data.reshape(T, B, N_LABELS))
    return logits, trace


def forward_episode(params: ModelParams, inputs: np.ndarray,
                    capture: bool = False) -> tuple[np.ndarray, Optional[ActivationTrace]]:
    """Single sequence: inputs (T, 28) -> logits (T, 26) and optional trace."""
    logits, trace = forward_batch(params, np.asarray(inputs)[:, None, :], capture)
    return logits.data, (trace.episode(0) if trace is not None else None)


def predict(params: ModelParams, episodes: Sequence[Episode], chunk: int = 500) -> np.ndarray:
    """Argmax predictions (T, N) for equal-length episodes."""
    out = []
    for i in range(0, len(episodes), chunk):
        x, _ = encode_batch(episodes[i:i + chunk], dtype=params.dtype)
        logits, _ = forward_batch(params, x)
        T, B = x.shape[:2]
        out.append(logits.data.reshape(T, B, N_LABELS).argmax(axis=2))
    return np.concatenate(out, axis=1)


def run_with_trace(params: ModelParams, episodes: Sequence[Episode],
                   chunk: int = 250) -> ActivationTrace:
    parts = []
    for i in range(0, len(episodes), chunk):
        x, _ = encode_batch(episodes[i:i + chunk], dtype=params.dtype)
        parts.append(forward_batch(params, x, capture=True)[1])
    return ActivationTrace({k: np.concatenate([p.layers[k] for p in parts], axis=1) for k in LAYERS},
                           np.concatenate([p.logits for p in parts], axis=1))


def loss_and_grads(params: ModelParams, inputs: np.ndarray,
                   targets: np.ndarray) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy over every (timestep, sequence) and its parameter gradients."""
    with nx.GradTape() as tape:
        logits, _ = forward_batch(params, inputs)
    loss, g = nx.softmax_cross_entropy(logits, np.asarray(targets).reshape(-1))
    grads = nx.backward(tape, (logits, g)).for_params(params.tensors)
    return loss, grads, logits.data


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    log: list[tuple[int, float, float]] = field(default_factory=list)
    seconds: float = 0.0


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def make_batch(rng: np.random.Generator, n: int, seq_len: int,
               constraint: Optional[TrainConstraint] = None,
               dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    eps = [sample_episode(generate_scene(rng, constraint), seq_len, rng) for _ in range(n)]
    return encode_batch(eps, dtype=dtype)


def train(config: ModelConfig, constraint: Optional[TrainConstraint] = None,
          rng: Optional[np.random.Generator] = None, *,
          log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
          log_every: int = 10, checkpoint_every: int = 500,
          progress: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Train from scratch on freshly generated scenes, one episode per scene.

    ``rng`` overrides the data stream only; parameter init always comes from
    ``config.seed``.
    """
    init_rng, data_rng = _streams(config.seed)
    if rng is not None:
        data_rng = rng
    params = init_params(config, init_rng, np.float32)
    state = nx.AdamState.for_params(params.tensors)
    result = TrainResult(params)
    t0 = time.perf_counter()
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
    try:
        for b in range(1, config.total_batches + 1):
            x, y = make_batch(data_rng, config.batch_scenes, config.seq_len, constraint)
            loss, grads, logits = loss_and_grads(params, x, y)
            if not math.isfinite(loss):
                if checkpoint_path is not None:
                    diag = Path(checkpoint_path).with_suffix(".nan.glck")
                    save_checkpoint(diag, params.arrays(), state)
                    raise TrainingDiverged(f"loss {loss} at batch {b}; diagnostic checkpoint {diag}")
                raise TrainingDiverged(f"loss {loss} at batch {b}")
            nx.clip_global_norm(grads, config.clip_norm)
            nx.adam_step(params.tensors, grads, state, config.lr, config.beta1, config.beta2, config.eps)
            if b % log_every == 0 or b == 1 or b == config.total_batches:
                T, B = y.shape
                pred = logits.reshape(T, B, N_LABELS).argmax(axis=2)
                acc = float(np.mean(pred[-20:] == y[-20:]))
                row = (b, loss, acc)
                result.log.append(row)
                if writer is not None:
                    writer.writerow((b, repr(loss), repr(acc)))
                    fh.flush()
                if progress is not None:
                    progress(b, loss, acc)
                log.debug("batch %d loss %.4f acc_last20 %.3f", b, loss, acc)
            if checkpoint_path is not None and (b % checkpoint_every == 0 or b == config.total_batches):
                save_checkpoint(checkpoint_path, params.arrays(), state)
    finally:
        if fh is not None:
            fh.close()
    result.seconds = time.perf_counter() - t0
    return result


# -- evaluation --------------------------------------------------------------

@dataclass
class Curve:
    accuracy: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: int

    def rows(self) -> Iterable[tuple]:
        for t, (a, lo, hi) in enumerate(zip(self.accuracy, self.ci_low, self.ci_high)):
            yield t, float(a), float(lo), float(hi)


def curve_from_hits(hits: np.ndarray) -> Curve:
    """hits: (T, N) boolean; one column per scene."""
    hits = np.asarray(hits, dtype=np.float64)
    acc = hits.mean(axis=1)
    lo, hi = wald_ci(acc, hits.shape[1])
    return Curve(acc, lo, hi, hits.shape[1])


def fresh_episodes(n: int, seq_len: int, rng: np.random.Generator,
                   constraint: Optional[TrainConstraint] = None,
                   n_tokens: Optional[int] = None) -> list[Episode]:
    return [sample_episode(generate_scene(rng, constraint, n_tokens), seq_len, rng) for _ in range(n)]


def evaluate_curve(params: ModelParams, episodes: Sequence[Episode]) -> Curve:
    """Per-timestep accuracy over episodes on unseen scenes, with 95% CIs."""
    pred = predict(params, episodes)
    y = np.stack([e.targets for e in episodes], axis=1)
    return curve_from_hits(pred == y)


def write_curve(path, curve: Curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for row in curve.rows():
            w.writerow(row)


def load_params(path, dtype=np.float32) -> ModelParams:
    arrays, _ = load_checkpoint(path)
    return ModelParams.from_arrays(arrays, dtype)


def save_params(path, params: ModelParams, state: Optional[nx.AdamState] = None) -> None:
    save_checkpoint(path, params.arrays(), state)
