"""Vocabulary-level readouts of a trained model and a hand-built counterpart.

``M[a, b] = <W_Q e_a, W_K e_b>`` is the query/key score between vocabulary
tokens ``a`` (query) and ``b`` (key); ``s[t] = <1, W_o W_V e_t>`` is how much
attending to token ``t`` adds to a grid slot's logit. In a one-layer model the
logit of grid slot ``i`` is exactly ``<1, x_i> + sum_j alpha_ij s_j``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .domain import COLORS, N_CELLS, SHAPES, SIZES, Example, command_tokens
from .model import (
    ModelConfig, embedding_table, encode_batch, encode_input, forward, object_token,
    predict,
)

LARGE_FRACTION = 0.5


@dataclass
class VocabMatrix:
    M: np.ndarray
    labels: list
    layer: int = 0
    head: int = 0
    slot: int | None = None

    def entry(self, query: str, key: str) -> float:
        return float(self.M[self.labels.index(query), self.labels.index(key)])


def _check_layer_head(config: ModelConfig, layer: int, head: int):
    if not 0 <= layer < config.layers:
        raise IndexError(f"layer {layer} out of range (model has {config.layers})")
    if not 0 <= head < config.heads:
        raise IndexError(f"head {head} out of range (model has {config.heads})")


def _token_columns(weights, config, slot):
    table = embedding_table(config.variant)
    E = table.E.astype(np.float64)
    if slot is not None and config.use_positional:
        P = np.asarray(weights["P"], dtype=np.float64)
        E = E.copy()
        cmd = [i for i, t in enumerate(table.vocab) if not table.is_grid_token(t)]
        E[:, cmd] += P[:, [slot]]
    return table, E


def extract_M(weights: dict, config: ModelConfig, layer: int = 0, head: int = 0,
              slot: int | None = None) -> VocabMatrix:
    """Query/key score table over the vocabulary, read off raw embeddings.

    For three-attr-rel, ``slot`` adds that command slot's positional vector to
    every command-token column; by default no positional offset is applied.
    """
    _check_layer_head(config, layer, head)
    table, E = _token_columns(weights, config, slot)
    Wq = np.asarray(weights[f"L{layer}.H{head}.W_Q"], dtype=np.float64)
    Wk = np.asarray(weights[f"L{layer}.H{head}.W_K"], dtype=np.float64)
    M = (Wq @ E).T @ (Wk @ E)
    if config.scale_scores:
        M = M / np.sqrt(config.d_qk)
    return VocabMatrix(M, list(table.vocab), layer, head, slot)


def _head_s_weights(weights, config, layer, head):
    k = config.d_qk
    Wo = np.asarray(weights[f"L{layer}.W_o"], dtype=np.float64)[:, head * k:(head + 1) * k]
    Wv = np.asarray(weights[f"L{layer}.H{head}.W_V"], dtype=np.float64)
    return Wo.sum(axis=0) @ Wv  # 1^T W_o W_V


def extract_s(weights: dict, config: ModelConfig, layer: int = 0, head: int = 0,
              slot: int | None = None) -> tuple[np.ndarray, list]:
    """Per-token logit contribution ``<1, W_o W_V e_t>``.

    Only in a one-layer model is this the full story; for deeper models it is the
    contribution of that layer read off the raw embeddings.
    """
    _check_layer_head(config, layer, head)
    table, E = _token_columns(weights, config, slot)
    return _head_s_weights(weights, config, layer, head) @ E, list(table.vocab)


# --- logit decomposition --------------------------------------------------------

@dataclass
class SlotDecomposition:
    cell: int
    token: str
    baseline: float
    rows: list  # (head, j, token_j, alpha, s, alpha*s)
    total: float
    logit: float
    large_command: int = 0
    classification: str = "no match"

    def to_dict(self) -> dict:
        return {
            "cell": self.cell, "token": self.token, "baseline": self.baseline,
            "total": self.total, "logit": self.logit,
            "large_command_summands": self.large_command,
            "classification": self.classification,
            "rows": [{"head": h, "j": j, "token": t, "alpha": a, "s": s, "summand": v}
                     for h, j, t, a, s, v in self.rows],
        }


@dataclass
class DecompositionReport:
    variant: str
    command: list
    target: int
    prediction: int
    s_sign: float
    slots: list = field(default_factory=list)

    def slot(self, cell: int) -> SlotDecomposition:
        return self.slots[cell]

    @property
    def max_error(self) -> float:
        return max(abs(s.total - s.logit) for s in self.slots)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "command": self.command, "target": self.target,
                "prediction": self.prediction, "s_sign": self.s_sign,
                "max_identity_error": self.max_error,
                "slots": [s.to_dict() for s in self.slots]}


def _classify(n_large: int, n_command: int) -> str:
    if n_large == 0:
        return "no match"
    return "full match" if n_large >= n_command else "partial match"


def decompose_logits(weights: dict, config: ModelConfig, example: Example,
                     command_only_rows: bool = False) -> DecompositionReport:
    """Split every grid logit into baseline plus one summand per attended token.

    The identity is exact (all n summands retained); command-token summands are
    the ones counted for the full/partial/no-match label.
    """
    if config.layers != 1:
        raise ValueError("logit decomposition is defined for one-layer models")
    if example.variant != config.variant:
        raise ValueError(f"{example.variant} example on a {config.variant} model")
    w64 = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    tokens = encode_input(example, config.variant)
    trace = forward(w64, config, tokens[None])
    x = trace.x[0]  # (n, d)
    alpha = trace.attention[0][0]  # (heads, n, n)
    table = embedding_table(config.variant)
    labels = [table.vocab[t] for t in tokens]
    c = config.n_command
    s_heads = np.stack([x @ _head_s_weights(w64, config, 0, h) for h in range(config.heads)])
    cmd_s = s_heads[:, :c].sum()
    sign = -1.0 if cmd_s < 0 else 1.0
    report = DecompositionReport(config.variant, command_tokens(example.command),
                                 example.target, int(trace.predictions[0]), sign)
    all_cmd = []
    for cell in range(N_CELLS):
        i = c + cell
        rows = []
        for h in range(config.heads):
            for j in range(config.seq_len):
                if command_only_rows and j >= c:
                    continue
                v = alpha[h, i, j] * s_heads[h, j]
                rows.append((h, j, labels[j], float(alpha[h, i, j]), float(s_heads[h, j]), float(v)))
        baseline = float(x[i].sum())
        total = baseline + float((alpha[:, i, :] * s_heads).sum())
        slot = SlotDecomposition(cell, labels[i], baseline, rows, total,
                                 float(trace.logits[0, cell]))
        report.slots.append(slot)
        all_cmd.append(sign * (alpha[:, i, :c] * s_heads[:, :c]).sum(axis=0))
    all_cmd = np.array(all_cmd)  # (36, c): per command token, summed over heads
    peak = all_cmd.max()
    for cell, slot in enumerate(report.slots):
        n_large = int((all_cmd[cell] >= LARGE_FRACTION * peak).sum()) if peak > 0 else 0
        slot.large_command = n_large
        slot.classification = _classify(n_large, c)
    return report


def identity_error(weights: dict, config: ModelConfig, examples) -> float:
    """Largest |L_i - (<1,x_i> + sum_j alpha_ij s_j)| over examples and grid slots (float64)."""
    if config.layers != 1:
        raise ValueError("the logit identity is stated for one-layer models")
    w64 = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    tokens, _ = encode_batch(examples, config.variant)
    trace = forward(w64, config, tokens)
    x = trace.x  # (B, n, d)
    alpha = trace.attention[0]  # (B, H, n, n)
    c = config.n_command
    recon = x[:, c:, :].sum(axis=-1)
    for h in range(config.heads):
        s = x @ _head_s_weights(w64, config, 0, h)  # (B, n)
        recon = recon + np.einsum("bij,bj->bi", alpha[:, h, c:, :], s)
    return float(np.abs(recon - trace.logits).max())


# --- construction ---------------------------------------------------------------

@dataclass(frozen=True)
class ConstructionParams:
    variant: str
    gamma_attr: float = 8.0
    gamma_size: float = 4.0
    sigma: float = 8.0


def construction_tables(params: ConstructionParams) -> tuple[np.ndarray, np.ndarray, list]:
    """Bilinear table B (query dim x key dim) and value readout w."""
    if params.variant not in ("two-attr", "three-attr"):
        raise ValueError(f"no construction for variant {params.variant!r}")
    dims = list(embedding_table(params.variant).dims)
    row = {d: i for i, d in enumerate(dims)}
    d = len(dims)
    B = np.zeros((d, d))
    w = np.zeros(d)
    for attr in COLORS + SHAPES:
        B[row[f"world_{attr}"], row[attr]] = params.gamma_attr
        w[row[attr]] = params.sigma
    if params.variant == "three-attr":
        for k in SIZES:
            B[row[f"world_size_{k}"], row["big"]] = params.gamma_size * (k - 1) / 3
            B[row[f"world_size_{k}"], row["small"]] = params.gamma_size * (4 - k) / 3
        w[row["big"]] = w[row["small"]] = params.sigma
    return B, w, dims


def build_construction(params: ConstructionParams) -> tuple[dict, ModelConfig]:
    """Weights of a 1-layer 1-head model realising ``x_i^T B x_j`` scores and ``<w, x_j>`` values."""
    B, w, dims = construction_tables(params)
    d = len(dims)
    config = ModelConfig(params.variant, layers=1, heads=1, d_qk=d)
    weights = {
        "L0.H0.W_Q": B.T.copy(),
        "L0.H0.W_K": np.eye(d),
        "L0.H0.W_V": np.eye(d),
        "L0.W_o": np.outer(np.ones(d), w) / d,
    }
    return weights, config


def analytic_M(params: ConstructionParams) -> np.ndarray:
    B, _, _ = construction_tables(params)
    E = embedding_table(params.variant).E
    return E.T @ B @ E


def search_construction(variant: str, examples, gammas=(1.0, 2.0, 4.0, 8.0),
                        size_ratios=(0.5, 0.75), sigmas=(1.0, 2.0, 4.0, 8.0)):
    """Coarse grid over (gamma_attr, gamma_size, sigma); returns (params, accuracy) rows."""
    tokens, _ = encode_batch(examples, variant)
    targets = np.array([ex.target for ex in examples])
    out = []
    ratios = size_ratios if variant == "three-attr" else (0.0,)
    for g in gammas:
        for r in ratios:
            for s in sigmas:
                p = ConstructionParams(variant, g, g * r, s)
                w, cfg = build_construction(p)
                acc = float((predict(w, cfg, tokens) == targets).mean())
                out.append((p, acc))
    return out


# --- learned vs constructed -------------------------------------------------------

@dataclass
class AgreementReport:
    column_spearman: dict  # command token -> rank correlation over grid queries
    prediction_agreement: float
    s_sign: float

    @property
    def mean_spearman(self) -> float:
        vals = [v for v in self.column_spearman.values() if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {"column_spearman": self.column_spearman,
                "mean_spearman": self.mean_spearman,
                "prediction_agreement": self.prediction_agreement,
                "s_sign": self.s_sign}


def command_s_sign(weights, config) -> float:
    s, labels = extract_s(weights, config)
    table = embedding_table(config.variant)
    cmd = [i for i, t in enumerate(labels) if not table.is_grid_token(t)]
    return -1.0 if s[cmd].sum() < 0 else 1.0


def compare_learned_vs_construct(weights_l, config_l, weights_c, config_c, examples) -> AgreementReport:
    if config_l.variant != config_c.variant:
        raise ValueError("models are for different variants")
    for cfg in (config_l, config_c):
        if cfg.layers != 1 or cfg.heads != 1:
            raise ValueError("comparison needs one-layer one-head models")
    ML = extract_M(weights_l, config_l).M
    MC = extract_M(weights_c, config_c).M
    if ML.shape != MC.shape:
        raise ValueError(f"M shapes differ: {ML.shape} vs {MC.shape}")
    sign = command_s_sign(weights_l, config_l)
    ML = ML * sign
    table = embedding_table(config_l.variant)
    grid = [i for i, t in enumerate(table.vocab) if table.is_grid_token(t)]
    cols = {}
    for j, t in enumerate(table.vocab):
        if table.is_grid_token(t):
            continue
        a, b = ML[grid, j], MC[grid, j]
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            cols[t] = float("nan")
        else:
            cols[t] = float(spearmanr(a, b).statistic)
    tokens, _ = encode_batch(examples, config_l.variant)
    agree = float((predict(weights_l, config_l, tokens) == predict(weights_c, config_c, tokens)).mean())
    return AgreementReport(cols, agree, sign)


def column_ordering(weights, config, layer: int = 0, head: int = 0) -> dict:
    """Per command column of M: min over attribute-matching grid queries minus max over the rest.

    Positive margins mean every matching object outranks every non-matching one.
    Only object tokens compete: the empty token carries no attributes. Size words
    are skipped (their columns are ramps, not matches). The sign of s on command
    tokens is folded in.
    """
    M = extract_M(weights, config, layer, head).M * command_s_sign(weights, config)
    table = embedding_table(config.variant)
    out = {}
    for j, t in enumerate(table.vocab):
        if t not in COLORS + SHAPES:
            continue
        match, other = [], []
        for i, g in enumerate(table.vocab):
            if not table.is_grid_token(g) or g == "empty":
                continue
            (match if t in g.split("_") else other).append(M[i, j])
        out[t] = float(min(match) - max(other))
    return out


# --- heatmaps ---------------------------------------------------------------------

def gray_levels(matrix) -> np.ndarray:
    """Darker is higher: min -> 255 (white), max -> 0 (black); constant -> 128."""
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("heatmap matrix must be finite")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (hi - m) / (hi - lo)).astype(np.uint8)


def heatmap_csv(matrix, row_labels, col_labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(col_labels))
    for lab, r in zip(row_labels, np.atleast_2d(matrix)):
        w.writerow([lab] + [f"{v:.9g}" for v in r])
    return buf.getvalue()


def read_heatmap_csv(path) -> tuple[np.ndarray, list, list]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), labels, cols


def _svg(matrix, row_labels, col_labels, cell=14) -> str:
    g = gray_levels(matrix)
    rows, cols = g.shape
    left = 8 + 7 * max((len(str(l)) for l in row_labels), default=0)
    top = 8 + 7 * max((len(str(l)) for l in col_labels), default=0)
    width, height = left + cols * cell + 4, top + rows * cell + 4
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="monospace" font-size="10">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for j, lab in enumerate(col_labels):
        x = left + j * cell + cell * 0.7
        parts.append(f'<text x="{x:.1f}" y="{top - 4}" transform="rotate(-90 {x:.1f} {top - 4})">'
                     f'{_esc(lab)}</text>')
    for i, lab in enumerate(row_labels):
        y = top + i * cell
        parts.append(f'<text x="{left - 4}" y="{y + cell * 0.75:.1f}" text-anchor="end">{_esc(lab)}</text>')
        for j in range(cols):
            v = int(g[i, j])
            parts.append(f'<rect x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({v},{v},{v})" stroke="#ccc" stroke-width="0.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def export_heatmap(matrix, path, fmt: str | None = None, row_labels=None, col_labels=None) -> Path:
    """Write ``matrix`` as csv (labelled grid), pgm (binary P5) or svg."""
    path = Path(path)
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    fmt = fmt or path.suffix.lstrip(".")
    row_labels = list(row_labels) if row_labels is not None else [str(i) for i in range(m.shape[0])]
    col_labels = list(col_labels) if col_labels is not None else [str(j) for j in range(m.shape[1])]
    if fmt == "csv":
        if not np.all(np.isfinite(m)):
            raise ValueError("heatmap matrix must be finite")
        path.write_text(heatmap_csv(m, row_labels, col_labels))
    elif fmt == "pgm":
        g = gray_levels(m)
        header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + g.tobytes())
    elif fmt == "svg":
        path.write_text(_svg(m, row_labels, col_labels))
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
