"""Attention-only transformer over fixed sparse embeddings.

Input is the command tokens followed by the 36 grid slots in cell order. Each
layer adds the output of multi-head self-attention back onto the residual
stream; the logit of grid cell ``c`` is the sum of the final residual vector at
that slot. Only the Q/K/V/O matrices (plus command-slot positional embeddings
for three-attr-rel) are learnable.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .domain import (
    COLORS, COMMAND_LENGTH, N_CELLS, PAD, RELATIONS, SAME, SHAPES, SIZE_WORDS,
    SIZES, VARIANTS, Example, command_tokens,
)

log = logging.getLogger(__name__)

MAX_LAYERS = 2


@dataclass(frozen=True)
class EmbeddingTable:
    variant: str
    dims: tuple  # row labels
    vocab: tuple  # column labels
    E: np.ndarray  # (d_model, |vocab|)

    @property
    def d_model(self) -> int:
        return len(self.dims)

    @property
    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.vocab)}

    def column(self, token: str) -> np.ndarray:
        return self.E[:, self.index[token]]

    def is_grid_token(self, token: str) -> bool:
        return token == "empty" or "_" in token

    @property
    def command_vocab(self) -> list:
        return [t for t in self.vocab if not self.is_grid_token(t)]

    @property
    def grid_vocab(self) -> list:
        return [t for t in self.vocab if self.is_grid_token(t)]


def object_token(obj) -> str:
    if obj is None:
        return "empty"
    parts = ([str(obj.size)] if obj.size is not None else []) + [obj.color, obj.shape]
    return "_".join(parts)


def _build_table(variant: str) -> EmbeddingTable:
    sized = variant != "two-attr"
    cmd_dims = (list(SIZE_WORDS) if sized else []) + list(COLORS) + list(SHAPES)
    if variant == "three-attr-rel":
        cmd_dims += [SAME] + [f"kind_{k}" for k in RELATIONS] + [PAD]
    world_dims = ([f"world_size_{s}" for s in SIZES] if sized else []) + \
        [f"world_{c}" for c in COLORS] + [f"world_{s}" for s in SHAPES]
    dims = cmd_dims + world_dims + ["empty"]
    row = {d: i for i, d in enumerate(dims)}

    vocab, cols = [], []
    for d in cmd_dims:
        vocab.append(d[len("kind_"):] if d.startswith("kind_") else d)
        col = np.zeros(len(dims))
        col[row[d]] = 1.0
        cols.append(col)
    objects = [(s, c, h) for s in (SIZES if sized else (None,)) for c in COLORS for h in SHAPES]
    for s, c, h in objects:
        col = np.zeros(len(dims))
        col[row[f"world_{c}"]] = 1.0
        col[row[f"world_{h}"]] = 1.0
        if s is not None:
            col[row[f"world_size_{s}"]] = 1.0
        vocab.append("_".join(([str(s)] if s is not None else []) + [c, h]))
        cols.append(col)
    col = np.zeros(len(dims))
    # same mass as an object token so every grid slot starts from the same baseline
    col[row["empty"]] = 3.0 if sized else 2.0
    vocab.append("empty")
    cols.append(col)
    return EmbeddingTable(variant, tuple(dims), tuple(vocab), np.stack(cols, axis=1))


_TABLES: dict = {}


def embedding_table(variant: str) -> EmbeddingTable:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant not in _TABLES:
        _TABLES[variant] = _build_table(variant)
    return _TABLES[variant]


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    layers: int = 1
    heads: int = 1
    d_qk: int | None = None
    scale_scores: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 1 <= self.layers <= MAX_LAYERS:
            raise ValueError(
                f"layers={self.layers}: the model has at most {MAX_LAYERS} attention layers")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.d_qk is None:
            object.__setattr__(self, "d_qk", self.d_model)

    @property
    def d_model(self) -> int:
        return embedding_table(self.variant).d_model

    @property
    def use_positional(self) -> bool:
        return self.variant == "three-attr-rel"

    @property
    def n_command(self) -> int:
        return COMMAND_LENGTH[self.variant]

    @property
    def seq_len(self) -> int:
        return self.n_command + N_CELLS

    def param_shapes(self) -> dict:
        d, k = self.d_model, self.d_qk
        shapes = {}
        for l in range(self.layers):
            for h in range(self.heads):
                for m in ("W_Q", "W_K", "W_V"):
                    shapes[f"L{l}.H{h}.{m}"] = (k, d)
            shapes[f"L{l}.W_o"] = (d, self.heads * k)
        if self.use_positional:
            shapes["P"] = (d, self.n_command)
        return shapes

    def meta(self) -> dict:
        return {"variant": self.variant, "layers": self.layers, "heads": self.heads,
                "d_model": self.d_model, "d_qk": self.d_qk,
                "scale_scores": self.scale_scores}

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(meta["variant"], meta["layers"], meta["heads"],
                   meta.get("d_qk"), meta.get("scale_scores", False))


def init_weights(config: ModelConfig, seed: int = 0, std: float | None = None,
                 dtype=np.float32, zero_output: bool = False) -> dict:
    """Gaussian init with std 1/sqrt(d_model); P starts at zero.

    ``zero_output`` also zeroes every W_o, so each token's logit contribution s
    starts at 0 and is learned from the attention pattern rather than inherited
    from random output weights.
    """
    rng = np.random.default_rng(seed)
    std = std if std is not None else 1.0 / math.sqrt(config.d_model)
    out = {}
    for name, shape in config.param_shapes().items():
        s = 0.0 if name == "P" else std
        out[name] = (rng.standard_normal(shape) * s).astype(dtype)
        if zero_output and name.endswith("W_o"):
            out[name][:] = 0.0
    return out


def zero_weights(config: ModelConfig, dtype=np.float64) -> dict:
    return {n: np.zeros(s, dtype=dtype) for n, s in config.param_shapes().items()}


def encode_input(example: Example, variant: str | None = None) -> np.ndarray:
    """Vocabulary indices: command tokens, then the 36 grid slots in cell order."""
    variant = variant or example.variant
    if example.variant != variant:
        raise ValueError(f"{example.variant} example fed to a {variant} model")
    idx = embedding_table(variant).index
    toks = command_tokens(example.command) + [
        object_token(example.world.cells.get(c)) for c in range(N_CELLS)]
    try:
        return np.array([idx[t] for t in toks], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"token {e.args[0]!r} not in the {variant} vocabulary") from None


def encode_batch(examples, variant: str) -> tuple[np.ndarray, np.ndarray]:
    if not examples:
        n = COMMAND_LENGTH[variant] + N_CELLS
        return np.zeros((0, n), dtype=np.int64), np.zeros(0, dtype=np.int64)
    toks = np.stack([encode_input(ex, variant) for ex in examples])
    targets = np.array([ex.target for ex in examples], dtype=np.int64)
    return toks, targets


@dataclass
class ForwardTrace:
    x: np.ndarray  # (B, n, d) input embeddings incl. positions
    attention: list  # per layer: (B, heads, n, n)
    residuals: list  # per layer output: (B, n, d)
    logits: np.ndarray  # (B, 36)

    @property
    def predictions(self) -> np.ndarray:
        # np.argmax already breaks ties toward the lowest index
        return self.logits.argmax(axis=-1)


def _graph(params: dict, config: ModelConfig, tokens: np.ndarray, tape, trace=None):
    """Forward pass over Vars; returns the logits Var."""
    dtype = next(iter(params.values())).data.dtype
    table = embedding_table(config.variant)
    tokens = np.atleast_2d(tokens)
    x = T.Var(table.E.T[tokens].astype(dtype))
    c = config.n_command
    if config.use_positional:
        sel = np.zeros((config.seq_len, c), dtype=dtype)
        sel[np.arange(c), np.arange(c)] = 1.0
        pos = T.matmul(tape, T.Var(sel), T.transpose(tape, params["P"]))
        x = T.add_rows(tape, x, pos)
    if trace is not None:
        trace.x = x.data
    k = config.d_qk
    for l in range(config.layers):
        heads_out = None
        maps = []
        W_o = params[f"L{l}.W_o"]
        for h in range(config.heads):
            q = T.matmul(tape, x, T.transpose(tape, params[f"L{l}.H{h}.W_Q"]))
            kk = T.matmul(tape, x, T.transpose(tape, params[f"L{l}.H{h}.W_K"]))
            v = T.matmul(tape, x, T.transpose(tape, params[f"L{l}.H{h}.W_V"]))
            s = T.matmul(tape, q, T.transpose(tape, kk))
            if config.scale_scores:
                s = T.scale(tape, s, 1.0 / math.sqrt(k))
            a = T.softmax_rows(tape, s)
            if not np.all(np.isfinite(a.data)):
                raise FloatingPointError(f"non-finite attention at layer {l} head {h}")
            maps.append(a.data)
            z = T.matmul(tape, a, v)
            o = T.matmul(tape, z, T.transpose(tape, T.slice_cols(tape, W_o, h * k, (h + 1) * k)))
            heads_out = o if heads_out is None else T.add(tape, heads_out, o)
        x = T.add(tape, x, heads_out)
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite residual stream after layer {l}")
        if trace is not None:
            trace.attention.append(np.stack(maps, axis=1))
            trace.residuals.append(x.data)
    grid = T.take_rows(tape, x, c, c + N_CELLS)
    return T.row_sum(tape, grid)


def _vars(weights: dict) -> dict:
    return {n: T.Var(w, n) for n, w in weights.items()}


def forward(weights: dict, config: ModelConfig, tokens: np.ndarray) -> ForwardTrace:
    """Full forward pass on a (B, n) or (n,) index array, keeping intermediates."""
    trace = ForwardTrace(None, [], [], None)
    logits = _graph(_vars(weights), config, tokens, None, trace)
    trace.logits = logits.data
    return trace


def logits_only(weights: dict, config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    return _graph(_vars(weights), config, tokens, None).data


def loss_and_grads(weights: dict, config: ModelConfig, tokens, targets) -> tuple[float, dict]:
    """Mean cross-entropy over the batch and its gradient for every learnable tensor."""
    params = _vars(weights)
    tape = T.Tape()
    logits = _graph(params, config, tokens, tape)
    loss = T.cross_entropy(tape, logits, targets)
    tape.backward(loss)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for n, p in params.items()}
    return float(loss.data), grads


def loss_only(weights: dict, config: ModelConfig, tokens, targets) -> float:
    logits = _graph(_vars(weights), config, tokens, None)
    return float(T.cross_entropy(None, logits, targets).data)


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    count: int
    per_split: dict
    errors: list  # (example id, predicted cell, true cell)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "count": self.count,
                "per_split": self.per_split,
                "errors": [{"id": i, "predicted": p, "target": t} for i, p, t in self.errors]}


def score_predictions(predictions, examples) -> EvalReport:
    predictions = np.asarray(predictions)
    targets = np.array([ex.target for ex in examples], dtype=np.int64)
    correct = predictions == targets
    per_split = {}
    for tag in ("random", "A1", "A2", "A3", "A4"):
        # "random" scores the examples that carry no split tag at all
        if tag == "random":
            mask = np.array([ex.tags == {"random"} for ex in examples], dtype=bool)
        else:
            mask = np.array([tag in ex.tags for ex in examples], dtype=bool)
        if mask.any():
            per_split[tag] = float(correct[mask].mean())
    errors = [(int(i), int(predictions[i]), int(targets[i])) for i in np.flatnonzero(~correct)]
    acc = float(correct.mean()) if len(examples) else float("nan")
    return EvalReport(acc, len(examples), per_split, errors)


def predict(weights: dict, config: ModelConfig, tokens: np.ndarray, batch_size: int = 1024):
    out = []
    for i in range(0, len(tokens), batch_size):
        out.append(logits_only(weights, config, tokens[i:i + batch_size]).argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(weights: dict, config: ModelConfig, examples, tokens=None) -> EvalReport:
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    if tokens is None:
        tokens, _ = encode_batch(examples, config.variant)
    return score_predictions(predict(weights, config, tokens), examples)


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 60
    patience: int = 10
    seed: int = 0
    init_std: float | None = None
    zero_init_output: bool = True
    weight_decay: float = 0.0


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # dicts: epoch, loss, val_random, val_A1..A4
    best_epoch: int = -1
    best_score: tuple = ()  # (mean split-val accuracy, val accuracy) at best_epoch
    seed: int = 0

    COLUMNS = ("epoch", "loss", "val_random", "val_A1", "val_A2", "val_A3", "val_A4")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            cells = []
            for c in self.COLUMNS:
                v = r.get(c)
                cells.append("" if v is None else (str(v) if c == "epoch" else f"{v:.6f}"))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


class TrainingDiverged(FloatingPointError):
    pass


def _val_score(report: EvalReport, splits) -> tuple:
    comp = [report.per_split[s] for s in splits if s in report.per_split]
    comp_acc = float(np.mean(comp)) if comp else report.accuracy
    return comp_acc, report.accuracy


def train(config: ModelConfig, train_examples, val_examples, hp: TrainConfig = TrainConfig(),
          progress=None) -> tuple[dict, TrainingLog]:
    """Mini-batch Adam; keeps the weights with the best compositional validation score."""
    from .domain import SPLITS_FOR_VARIANT

    splits = SPLITS_FOR_VARIANT[config.variant]
    tokens, targets = encode_batch(train_examples, config.variant)
    val_tokens, _ = encode_batch(val_examples, config.variant)
    weights = init_weights(config, hp.seed, hp.init_std, zero_output=hp.zero_init_output)
    opt = T.AdamState(lr=hp.lr, weight_decay=hp.weight_decay)
    rng = np.random.default_rng([hp.seed, 1])
    log_ = TrainingLog(seed=hp.seed)
    best, best_weights, stale = None, {n: w.copy() for n, w in weights.items()}, 0
    n = len(tokens)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for step, i in enumerate(range(0, n, hp.batch_size)):
            b = order[i:i + hp.batch_size]
            loss, grads = loss_and_grads(weights, config, tokens[b], targets[b])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch} step {step}")
            opt.step(weights, grads)
            total += loss
            batches += 1
        row = {"epoch": epoch, "loss": total / batches}
        rep = evaluate(weights, config, val_examples, val_tokens)
        row["val_random"] = rep.per_split.get("random", rep.accuracy)
        for s in splits:
            row[f"val_{s}"] = rep.per_split.get(s)
        log_.rows.append(row)
        score = _val_score(rep, splits)
        if progress:
            progress(row)
        log.info("epoch %d loss %.4f val %s", epoch, row["loss"], rep.per_split)
        if best is None or score > best:
            best, stale, log_.best_epoch, log_.best_score = score, 0, epoch, score
            best_weights = {k: w.copy() for k, w in weights.items()}
        else:
            stale += 1
            if stale >= hp.patience:
                break
        if best == (1.0, 1.0) and row["loss"] < 1e-3:
            break
    return best_weights, log_


def train_restarts(config: ModelConfig, train_examples, val_examples,
                   hp: TrainConfig = TrainConfig(), restarts: int = 1,
                   progress=None) -> tuple[dict, TrainingLog, list]:
    """Independent runs with seeds ``hp.seed, hp.seed + 1, ...``.

    The run with the best compositional validation score wins (earlier seed on
    ties), so a perfect score ends the search early. Returns its weights and log
    plus one ``(seed, best_score)`` per run.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    runs = []
    for r in range(restarts):
        w, lg = train(config, train_examples, val_examples, replace(hp, seed=hp.seed + r), progress)
        runs.append((hp.seed + r, lg.best_score))
        if best is None or lg.best_score > best[1].best_score:
            best = (w, lg)
        if lg.best_score == (1.0, 1.0):
            break
    return best[0], best[1], runs
