"""Command-line entry point: ``refex {gen,train,eval,inspect,reproduce}``.

Settings resolve as built-in defaults < ``--config`` TOML < command-line flags,
and the effective values are written next to the outputs as
``config.resolved.toml``. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import __version__
from . import tensor as T
from .datagen import (
    GenSpec, GenerationError, dataset_stats, generate_split, read_jsonl, write_jsonl,
)
from .domain import SPLITS_FOR_VARIANT, VARIANTS
from .interpret import (
    ConstructionParams, build_construction, column_ordering, decompose_logits, export_heatmap,
    extract_M, extract_s, heatmap_csv,
)
from .model import MAX_LAYERS, ModelConfig, TrainConfig, evaluate, train_restarts

log = logging.getLogger("refex")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --- settings -----------------------------------------------------------------

GEN_KEYS = {
    "variant": "two-attr", "seed": 0, "train_count": 90_000, "val_count": 2_500,
    "test_count": 2_500, "min_objects": 3, "max_objects": 10,
    "green_square_distractor_scale": 1.0, "partial_match_fraction": 0.0, "holdout": None,
}
MODEL_KEYS = {"layers": 1, "heads": 1, "d_qk": None, "scale_scores": False}
TRAIN_KEYS = {"lr": 1e-3, "batch_size": 128, "epochs": 60, "patience": 10, "seed": 0,
              "init_std": None, "weight_decay": 0.0, "restarts": 1}
CONSTRUCT_KEYS = {"construct": None, "gamma_attr": 8.0, "gamma_size": 4.0, "sigma": 8.0}

DEFAULTS = {
    "gen": {**GEN_KEYS, "out": None},
    "train": {"data": None, "out": None, **MODEL_KEYS, **TRAIN_KEYS},
    "eval": {"checkpoint": None, "data": None, "out": None, **CONSTRUCT_KEYS},
    "inspect": {"checkpoint": None, "data": None, "out": None, "example_id": None,
                "layer": None, "head": None, **CONSTRUCT_KEYS},
    "reproduce": {"preset": None, "out": None, "train_count": None, "test_count": None,
                  "epochs": None, "restarts": None},
}


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_settings(command: str, cli: dict, config_path: str | None) -> dict:
    """defaults < config file < explicit flags; unknown config keys are errors."""
    settings = dict(DEFAULTS[command])
    if config_path:
        try:
            with open(config_path, "rb") as f:
                cfg = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{config_path}: {e}") from e
        cfg.pop("subcommand", None)
        unknown = set(cfg) - set(settings)
        if unknown:
            raise ConfigError(f"{config_path}: unknown keys for '{command}': {sorted(unknown)}")
        settings.update(cfg)
    settings.update(cli)
    return settings


def write_resolved(settings: dict, command: str, out: Path) -> Path:
    doc = {"subcommand": command}
    doc.update({k: v for k, v in settings.items() if v is not None})
    path = out / "config.resolved.toml"
    path.write_text(tomli_w.dumps(doc))
    return path


def write_manifest(out: Path, command: str, settings: dict, inputs=(), outputs=()) -> Path:
    manifest = {
        "tool": "refex", "version": __version__, "subcommand": command,
        "config": {k: v for k, v in settings.items() if v is not None},
        "inputs": {str(p): _hash_file(Path(p)) for p in inputs},
        "outputs": {Path(p).name: _hash_file(Path(p)) for p in outputs},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(settings) -> Path:
    if not settings.get("out"):
        raise ConfigError("--out is required")
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def gen_spec(s: dict) -> GenSpec:
    holdout = s.get("holdout")
    if isinstance(holdout, str):
        holdout = [h for h in holdout.split(",") if h]
    try:
        return GenSpec(
            s["variant"], seed=int(s["seed"]), train_count=int(s["train_count"]),
            val_count=int(s["val_count"]), test_count=int(s["test_count"]),
            min_objects=int(s["min_objects"]), max_objects=int(s["max_objects"]),
            green_square_distractor_scale=float(s["green_square_distractor_scale"]),
            partial_match_fraction=float(s["partial_match_fraction"]),
            holdout=None if holdout is None else frozenset(holdout))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def model_config(s: dict, variant: str) -> ModelConfig:
    try:
        return ModelConfig(variant, int(s["layers"]), int(s["heads"]),
                           None if s.get("d_qk") is None else int(s["d_qk"]),
                           bool(s["scale_scores"]))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def train_config(s: dict) -> TrainConfig:
    hp = TrainConfig(lr=float(s["lr"]), batch_size=int(s["batch_size"]), epochs=int(s["epochs"]),
                     patience=int(s["patience"]), seed=int(s["seed"]),
                     init_std=None if s.get("init_std") is None else float(s["init_std"]),
                     weight_decay=float(s["weight_decay"]))
    if hp.lr <= 0 or hp.batch_size < 1 or hp.epochs < 1 or int(s["restarts"]) < 1:
        raise ConfigError("lr, batch_size, epochs and restarts must be positive")
    return hp


# --- data files ---------------------------------------------------------------

def split_files(variant: str) -> dict:
    files = {"train": "train.jsonl", "val": "val.jsonl", "R": "test_random.jsonl"}
    files.update({s: f"test_{s}.jsonl" for s in SPLITS_FOR_VARIANT[variant]})
    return files


def _read(path: Path) -> list:
    if not path.exists():
        raise DataError(f"missing data file {path}")
    try:
        exs = read_jsonl(path)
    except ValueError as e:
        raise DataError(str(e)) from e
    if not exs:
        raise DataError(f"{path}: empty dataset")
    return exs


def _data_variant(data: Path) -> str:
    probe = data / "val.jsonl" if data.is_dir() else data
    if not probe.exists():
        raise DataError(f"missing data file {probe}")
    with open(probe, encoding="utf-8") as f:
        first = f.readline()
    if not first.strip():
        raise DataError(f"{probe}: empty dataset")
    try:
        variant = json.loads(first)["variant"]
    except (ValueError, KeyError) as e:
        raise DataError(f"{probe}:1: {e}") from e
    if variant not in VARIANTS:
        raise DataError(f"{probe}:1: unknown variant {variant!r}")
    return variant


def test_sets(data: Path, variant: str) -> dict:
    """Split label -> (path, examples) for every test file present."""
    if data.is_file():
        return {data.stem: (data, _read(data))}
    out = {}
    for label, name in split_files(variant).items():
        if label in ("train", "val"):
            continue
        if (data / name).exists():
            out[label] = (data / name, _read(data / name))
    if not out:
        raise DataError(f"no test_*.jsonl files in {data}")
    return out


# --- model loading --------------------------------------------------------------

def save_model(weights: dict, config: ModelConfig, path: Path, extra: dict | None = None):
    meta = config.meta()
    if extra:
        meta["training"] = extra
    T.save_checkpoint(weights, path, meta)


def load_model(path) -> tuple[dict, ModelConfig]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    try:
        header, tensors = T.load_checkpoint(path)
        config = ModelConfig.from_meta(header)
    except (T.CheckpointError, KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from e
    missing = set(config.param_shapes()) - set(tensors)
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)}")
    return tensors, config


def construction_params(s: dict) -> ConstructionParams:
    return ConstructionParams(s["construct"], float(s["gamma_attr"]), float(s["gamma_size"]),
                              float(s["sigma"]))


def _model_from_settings(s: dict) -> tuple[dict, ModelConfig, str]:
    if s.get("construct"):
        if s.get("checkpoint"):
            raise ConfigError("use either --checkpoint or --construct, not both")
        if s["construct"] not in ("two-attr", "three-attr"):
            raise ConfigError(f"no construction for variant {s['construct']!r}")
        w, cfg = build_construction(construction_params(s))
        return w, cfg, "construct"
    if not s.get("checkpoint"):
        raise ConfigError("--checkpoint (or --construct VARIANT) is required")
    w, cfg = load_model(s["checkpoint"])
    return w, cfg, "learned"


# --- subcommands ----------------------------------------------------------------

def cmd_gen(s: dict) -> int:
    spec = gen_spec(s)
    out = _out_dir(s)
    write_resolved(s, "gen", out)
    files, stats = [], {}
    for label, name in split_files(spec.variant).items():
        t0 = time.time()
        if label == "train":
            exs = generate_split(spec, "train", spec.train_count)
        elif label == "val":
            exs = generate_split(spec, "val", spec.val_count)
        elif label == "R":
            exs = generate_split(spec, "random", spec.test_count)
        else:
            exs = generate_split(spec, label, spec.test_count)
        write_jsonl(exs, out / name)
        stats[name] = dataset_stats(exs)
        files.append(out / name)
        log.info("wrote %s (%d examples, %.1fs)", name, len(exs), time.time() - t0)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    files.append(out / "stats.json")
    write_manifest(out, "gen", s, outputs=files)
    print(f"generated {spec.variant} data in {out}")
    return EXIT_OK


def _report_rows(reports: dict) -> list:
    return [{"split": k, "accuracy": r.accuracy, "count": r.count} for k, r in reports.items()]


def _write_report(out: Path, reports: dict, extra: dict | None = None) -> list:
    doc = {"accuracy": {k: r.accuracy for k, r in reports.items()},
           "splits": {k: r.to_dict() for k, r in reports.items()}}
    if extra:
        doc.update(extra)
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["split", "accuracy", "count"], lineterminator="\n")
    w.writeheader()
    w.writerows(_report_rows(reports))
    (out / "report.csv").write_text(buf.getvalue())
    return [out / "report.json", out / "report.csv"]


def _print_table(reports: dict, title: str):
    print(title)
    for k, r in reports.items():
        print(f"  {k:<8} {100 * r.accuracy:6.2f}%  (n={r.count})")


def run_training(s: dict, data: Path, out: Path, quiet: bool = False):
    """Shared by ``train`` and ``reproduce``: returns (weights, config, log, reports)."""
    from .plotting import training_curves_png

    variant = _data_variant(data)
    config = model_config(s, variant)
    hp = train_config(s)
    tr = _read(data / "train.jsonl")
    va = _read(data / "val.jsonl")
    tests = test_sets(data, variant)

    def progress(row):
        if not quiet:
            vals = " ".join(f"{k[4:]}={v:.3f}" for k, v in row.items()
                            if k.startswith("val_") and v is not None)
            print(f"  epoch {row['epoch']:3d} loss {row['loss']:.5f} {vals}", flush=True)

    weights, tlog, runs = train_restarts(config, tr, va, hp, int(s["restarts"]), progress)
    extra = {"seed": tlog.seed, "best_epoch": tlog.best_epoch,
             "restarts": [{"seed": sd, "val_score": list(sc)} for sd, sc in runs]}
    save_model(weights, config, out / "best.ckpt", extra)
    (out / "log.csv").write_text(tlog.to_csv())
    training_curves_png(tlog, out / "training_curve.png",
                        f"{variant}, {config.layers} layer(s), seed {tlog.seed}")
    reports = {k: evaluate(weights, config, exs) for k, (_, exs) in tests.items()}
    outputs = [out / "best.ckpt", out / "log.csv", out / "training_curve.png"]
    outputs += _write_report(out, reports, {"variant": variant, "model": config.meta(), **extra})
    inputs = [data / "train.jsonl", data / "val.jsonl"] + [p for p, _ in tests.values()]
    return weights, config, tlog, reports, inputs, outputs


def cmd_train(s: dict) -> int:
    if not s.get("data"):
        raise ConfigError("--data is required")
    data = Path(s["data"])
    out = _out_dir(s)
    model_config(s, "two-attr")  # validate model flags before touching data
    write_resolved(s, "train", out)
    _, config, tlog, reports, inputs, outputs = run_training(s, data, out)
    write_manifest(out, "train", s, inputs, outputs)
    _print_table(reports, f"test accuracy (best epoch {tlog.best_epoch}, seed {tlog.seed}):")
    return EXIT_OK


def cmd_eval(s: dict) -> int:
    if not s.get("data"):
        raise ConfigError("--data is required")
    weights, config, kind = _model_from_settings(s)
    out = _out_dir(s)
    write_resolved(s, "eval", out)
    data = Path(s["data"])
    variant = _data_variant(data)
    if variant != config.variant:
        raise DataError(f"checkpoint is for {config.variant} but the data is {variant}")
    tests = test_sets(data, variant)
    reports = {k: evaluate(weights, config, exs) for k, (_, exs) in tests.items()}
    outputs = _write_report(out, reports, {"variant": variant, "model": kind})
    inputs = [p for p, _ in tests.values()]
    if s.get("checkpoint"):
        inputs.append(Path(s["checkpoint"]))
    write_manifest(out, "eval", s, inputs, outputs)
    _print_table(reports, f"{kind} {variant} accuracy:")
    return EXIT_OK


def _export_vocab_matrix(vm, out: Path, stem: str) -> list:
    from .plotting import heatmap_png

    files = []
    for fmt in ("csv", "pgm", "svg"):
        files.append(export_heatmap(vm.M, out / f"{stem}.{fmt}", fmt, vm.labels, vm.labels))
    files.append(heatmap_png(vm.M, vm.labels, vm.labels, out / f"{stem}.png",
                             f"M (layer {vm.layer}, head {vm.head})"))
    return files


def cmd_inspect(s: dict) -> int:
    weights, config, kind = _model_from_settings(s)
    out = _out_dir(s)
    write_resolved(s, "inspect", out)
    tag = "learned" if kind == "learned" else "construct"
    outputs = []
    layers = [int(s["layer"])] if s.get("layer") is not None else range(config.layers)
    heads = [int(s["head"])] if s.get("head") is not None else range(config.heads)
    for l in layers:
        for h in heads:
            try:
                vm = extract_M(weights, config, l, h)
            except IndexError as e:
                raise ConfigError(str(e)) from e
            single = config.layers == 1 and config.heads == 1
            stem = f"M_{tag}" if single else f"M_{tag}_L{l}H{h}"
            outputs += _export_vocab_matrix(vm, out, stem)
            sv, labels = extract_s(weights, config, l, h)
            s_stem = f"s_{tag}" if single else f"s_{tag}_L{l}H{h}"
            (out / f"{s_stem}.csv").write_text(heatmap_csv(sv[None, :], ["s"], labels))
            outputs.append(out / f"{s_stem}.csv")
    notice = None
    if config.layers > 1:
        notice = ("multi-layer model: M is reported per layer from raw embeddings; s and the "
                  "logit decomposition only have their one-layer meaning for layer 0 inputs")
        print("notice:", notice)
    else:
        orders = column_ordering(weights, config)
        (out / "column_ordering.json").write_text(json.dumps(orders, indent=2) + "\n")
        outputs.append(out / "column_ordering.json")
    inputs = [Path(s["checkpoint"])] if s.get("checkpoint") else []
    if s.get("example_id") is not None:
        if not s.get("data"):
            raise ConfigError("--example-id needs --data (a JSONL file or a data directory)")
        data = Path(s["data"])
        path = data if data.is_file() else data / "test_random.jsonl"
        exs = _read(path)
        idx = int(s["example_id"])
        if not 0 <= idx < len(exs):
            raise DataError(f"--example-id {idx} out of range for {path} ({len(exs)} examples)")
        inputs.append(path)
        if notice:
            (out / "decomposition.json").write_text(json.dumps({"notice": notice}) + "\n")
        else:
            try:
                rep = decompose_logits(weights, config, exs[idx])
            except ValueError as e:
                raise DataError(str(e)) from e
            doc = {"example_id": idx, **rep.to_dict()}
            (out / "decomposition.json").write_text(json.dumps(doc, indent=2) + "\n")
            t = rep.slot(exs[idx].target)
            print(f"example {idx}: target cell {t.cell} ({t.token}) is a {t.classification}")
        outputs.append(out / "decomposition.json")
    write_manifest(out, "inspect", s, inputs, outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


# --- presets ------------------------------------------------------------------------

# Fixed seeds so "reproduce" needs no flags. The reference table has one A1 column,
# measured on the reduced-green-square training distribution, so every row uses scale 0.25.
PRESET_GEN_SEED = {"two-attr": 101, "three-attr": 102, "three-attr-rel": 103}
PRESET_TRAIN_SEED = 7
PRESET_RESTARTS = 20
CONSTRUCTION_SEED = 104
# The relational rows share one recipe so layer count is the only difference; a second
# head and lr 3e-3 let the 2-layer model converge within the epoch budget. Restarts only
# pay off where a perfect validation score can end the search early.
REL_RECIPE = {"heads": 2, "lr": 3e-3, "restarts": 1}
TABLE6 = [
    # label, variant, layers, reference row (percent), training overrides
    ("two-attr 1L", "two-attr", 1, {"R": 100.0, "A1": 100.0, "A2": 100.0}, {}),
    ("three-attr 1L", "three-attr", 1,
     {"R": 100.0, "A1": 100.0, "A2": 100.0, "A3": 100.0, "A4": 100.0}, {}),
    ("three-attr-rel 1L", "three-attr-rel", 1, {"R": 78.8, "A1": 31.9, "A2": 33.5}, REL_RECIPE),
    ("three-attr-rel 2L", "three-attr-rel", 2, {"R": 99.7, "A1": 99.4, "A2": 98.8}, REL_RECIPE),
]


def table6_bands(label: str) -> dict:
    """Pass bands (fractions) per split for each table6 row."""
    if label == "three-attr-rel 1L":
        return {"R": (0.65, 0.90), "A1": (0.15, 0.50), "A2": (0.15, 0.50)}
    if label == "three-attr-rel 2L":
        return {k: (0.97, 1.0) for k in ("R", "A1", "A2")}
    splits = ["R"] + list(SPLITS_FOR_VARIANT[label.split()[0]])
    return {k: (0.99, 1.0) for k in splits}


def _preset_gen(s: dict, variant: str, seed: int, scale: float) -> dict:
    g = {**GEN_KEYS, "variant": variant, "seed": seed, "green_square_distractor_scale": scale}
    for k in ("train_count", "test_count"):
        if s.get(k) is not None:
            g[k] = int(s[k])
    if s.get("test_count") is not None:
        g["val_count"] = int(s["test_count"])
    return g


def _preset_train(s: dict, layers: int, recipe: dict | None = None) -> dict:
    t = {**MODEL_KEYS, **TRAIN_KEYS, "layers": layers, "seed": PRESET_TRAIN_SEED,
         "restarts": PRESET_RESTARTS, **(recipe or {})}
    if s.get("epochs") is not None:
        t["epochs"] = int(s["epochs"])
    if s.get("restarts") is not None:
        t["restarts"] = int(s["restarts"])
    return t


def _gen_into(g: dict, data: Path):
    if not (data / "manifest.json").exists():
        cmd_gen({**g, "out": str(data)})


def _train_run(s, g, layers, data, run, recipe=None):
    t = _preset_train(s, layers, recipe)
    run.mkdir(parents=True, exist_ok=True)
    write_resolved({**t, "data": str(data), "out": str(run)}, "train", run)
    _, _, tlog, reports, inputs, outputs = run_training(t, data, run, quiet=True)
    write_manifest(run, "train", {**t, "data": str(data)}, inputs, outputs)
    return {k: r.accuracy for k, r in reports.items()}, tlog


def _write_summary(out: Path, rows: list, title: str, extra: dict | None = None) -> list:
    from .plotting import accuracy_bars_png

    splits = ["R", "A1", "A2", "A3", "A4"]
    md = [f"# {title}", "", "| run | " + " | ".join(splits) + " | pass |",
          "|---|" + "---|" * (len(splits) + 1)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "split", "ours", "reference", "band_low", "band_high", "pass"])
    for r in rows:
        cells = []
        for sp in splits:
            if sp not in r["ours"]:
                cells.append("-")
                continue
            ours = 100 * r["ours"][sp]
            ref = r.get("reference", {}).get(sp)
            cells.append(f"{ours:.1f}" + (f" ({ref:g})" if ref is not None else ""))
            lo, hi = r.get("bands", {}).get(sp, (None, None))
            ok = "" if lo is None else str(lo <= r["ours"][sp] <= hi)
            w.writerow([r["label"], sp, f"{r['ours'][sp]:.6f}",
                        "" if ref is None else ref, lo if lo is not None else "",
                        hi if hi is not None else "", ok])
        md.append(f"| {r['label']} | " + " | ".join(cells) + f" | {'yes' if r['pass'] else 'NO'} |")
    md += ["", "Cells: our accuracy in percent, reference value in parentheses."]
    if extra and extra.get("notes"):
        md += [""] + [f"- {n}" for n in extra["notes"]]
    (out / "summary.md").write_text("\n".join(md) + "\n")
    (out / "summary.csv").write_text(buf.getvalue())
    doc = {"title": title, "rows": rows}
    if extra:
        doc.update(extra)
    (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    accuracy_bars_png(rows, out / "summary.png", title)
    return [out / f"summary.{x}" for x in ("md", "csv", "json", "png")]


def preset_table6(s: dict, out: Path) -> int:
    rows = []
    for label, variant, layers, ref, recipe in TABLE6:
        print(f"[table6] {label}", flush=True)
        g = _preset_gen(s, variant, PRESET_GEN_SEED[variant], 0.25)
        data = out / "data" / variant
        _gen_into(g, data)
        acc, tlog = _train_run(s, g, layers, data, out / "runs" / label.replace(" ", "_"),
                               recipe)
        bands = table6_bands(label)
        ok = all(lo <= acc[k] <= hi for k, (lo, hi) in bands.items())
        rows.append({"label": label, "variant": variant, "layers": layers, "ours": acc,
                     "reference": ref, "bands": bands, "pass": ok, "seed": tlog.seed})
        print(f"  {acc} -> {'pass' if ok else 'FAIL'}", flush=True)
    _write_summary(out, rows, "table6 preset")
    return EXIT_OK


def preset_a1(s: dict, out: Path) -> int:
    rows = []
    for scale in (1.0, 0.25):
        print(f"[a1-distractor] scale {scale}", flush=True)
        g = _preset_gen(s, "two-attr", PRESET_GEN_SEED["two-attr"], scale)
        data = out / "data" / f"scale_{scale}"
        _gen_into(g, data)
        acc, tlog = _train_run(s, g, 1, data, out / "runs" / f"scale_{scale}")
        stats = json.loads((data / "stats.json").read_text())["train.jsonl"]
        rows.append({"label": f"scale {scale}", "scale": scale, "ours": acc, "seed": tlog.seed,
                     "mean_green_square_distractors": stats["mean_green_square_distractors"]})
    low, high = rows[0]["ours"]["A1"], rows[1]["ours"]["A1"]
    ok = high >= 0.995 and high > low
    for r in rows:
        r["pass"] = ok
    reduction = 1 - rows[1]["mean_green_square_distractors"] / rows[0]["mean_green_square_distractors"]
    notes = [f"green-square distractors per example reduced by {100 * reduction:.1f}%",
             f"A1 accuracy {100 * low:.1f}% at scale 1.0 vs {100 * high:.1f}% at scale 0.25"]
    _write_summary(out, rows, "Green-square distractor intervention",
                   {"notes": notes, "a1_jump": high - low, "pass": ok})
    print("\n".join(notes))
    return EXIT_OK


def preset_construction(s: dict, out: Path) -> int:
    rows = []
    for variant in ("two-attr", "three-attr"):
        g = _preset_gen(s, variant, CONSTRUCTION_SEED, 1.0)
        spec = gen_spec(g)
        params = ConstructionParams(variant, CONSTRUCT_KEYS["gamma_attr"],
                                    CONSTRUCT_KEYS["gamma_size"], CONSTRUCT_KEYS["sigma"])
        w, cfg = build_construction(params)
        acc = {"R": evaluate(w, cfg, generate_split(spec, "random", spec.test_count)).accuracy}
        for sp in SPLITS_FOR_VARIANT[variant]:
            acc[sp] = evaluate(w, cfg, generate_split(spec, sp, spec.test_count)).accuracy
        d = out / variant
        d.mkdir(parents=True, exist_ok=True)
        _export_vocab_matrix(extract_M(w, cfg), d, "M_construct")
        sv, labels = extract_s(w, cfg)
        (d / "s_construct.csv").write_text(heatmap_csv(sv[None, :], ["s"], labels))
        ok = all(v == 1.0 for v in acc.values())
        rows.append({"label": f"{variant} construction", "variant": variant, "ours": acc,
                     "reference": {k: 100.0 for k in acc}, "pass": ok,
                     "bands": {k: (1.0, 1.0) for k in acc},
                     "params": {"gamma_attr": params.gamma_attr, "gamma_size": params.gamma_size,
                                "sigma": params.sigma}})
        print(f"[construction] {variant}: {acc}")
    _write_summary(out, rows, "Hand-built attention weights")
    return EXIT_OK


PRESETS = {"table6": preset_table6, "a1-distractor": preset_a1, "construction": preset_construction}


def cmd_reproduce(s: dict) -> int:
    if s.get("preset") not in PRESETS:
        raise ConfigError(f"--preset must be one of {sorted(PRESETS)}")
    out = _out_dir(s)
    write_resolved(s, "reproduce", out)
    code = PRESETS[s["preset"]](s, out)
    outputs = sorted(p for p in out.glob("summary.*"))
    write_manifest(out, "reproduce", s, outputs=outputs)
    return code


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect,
            "reproduce": cmd_reproduce}


# --- argument parsing ------------------------------------------------------------------

def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"refex {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML file with the same keys as the flags")
        _flag(p, "out", help="output directory")

    g = sub.add_parser("gen", help="generate a dataset bundle as JSONL")
    common(g)
    _flag(g, "variant", choices=VARIANTS)
    _flag(g, "seed", type=int)
    for k in ("train_count", "val_count", "test_count", "min_objects", "max_objects"):
        _flag(g, k, type=int)
    _flag(g, "green_square_distractor_scale", type=float,
          help="keep each green-square distractor with this probability")
    _flag(g, "partial_match_fraction", type=float,
          help="probability that a distractor shares exactly one attribute with the target")
    _flag(g, "holdout", help="comma-separated held-out splits (default: all for the variant)")

    t = sub.add_parser("train", help="train a model on a generated bundle")
    common(t)
    _flag(t, "data", help="directory written by 'gen'")
    _flag(t, "layers", type=int, help=f"attention layers (1..{MAX_LAYERS})")
    _flag(t, "heads", type=int)
    _flag(t, "d_qk", type=int)
    _flag(t, "scale_scores", type=_bool, help="divide scores by sqrt(d_qk)")
    _flag(t, "lr", type=float)
    _flag(t, "batch_size", type=int)
    _flag(t, "epochs", type=int)
    _flag(t, "patience", type=int)
    _flag(t, "seed", type=int)
    _flag(t, "init_std", type=float)
    _flag(t, "weight_decay", type=float)
    _flag(t, "restarts", type=int, help="independent seeds; best compositional validation wins")

    def model_source(p):
        _flag(p, "checkpoint", help="checkpoint written by 'train'")
        _flag(p, "construct", choices=("two-attr", "three-attr"),
              help="use hand-built weights instead of a checkpoint")
        _flag(p, "gamma_attr", type=float)
        _flag(p, "gamma_size", type=float)
        _flag(p, "sigma", type=float)

    e = sub.add_parser("eval", help="evaluate a checkpoint or construction")
    common(e)
    model_source(e)
    _flag(e, "data", help="data directory or a single JSONL file")

    i = sub.add_parser("inspect", help="export M / s tables and logit decompositions")
    common(i)
    model_source(i)
    _flag(i, "data", help="JSONL file (or data directory) for --example-id")
    _flag(i, "example_id", type=int)
    _flag(i, "layer", type=int)
    _flag(i, "head", type=int)

    r = sub.add_parser("reproduce", help="run a fixed-seed experiment preset")
    common(r)
    _flag(r, "preset", choices=sorted(PRESETS))
    _flag(r, "train_count", type=int, help="override the preset training-set size")
    _flag(r, "test_count", type=int, help="override validation/test set sizes")
    _flag(r, "epochs", type=int)
    _flag(r, "restarts", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = resolve_settings(args.command, cli, args.config)
        return COMMANDS[args.command](settings)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GenerationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
