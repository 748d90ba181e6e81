"""Train-and-evaluate cells, ablation grids, sweeps and embedding export.

A cell is one (value, seed) pair. Each cell builds its data, model and
optimizer from the resolved config alone and writes only inside its own
directory, so any row of a table can be reproduced by running that cell
in isolation.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..data import Dataset
from ..errors import ContractError
from ..evaluation import METRIC_COLUMNS, exact_mean, run_protocol
from ..losses import DistanceMetric, PhiMode
from ..model import Modality, seq_len
from ..numerics.serialize import tensor_from_bytes, tensor_to_bytes
from ..training import load_state, train
from .config import DataConfig, ResolvedConfig

RESULT_COLUMNS = ("value", "seed") + METRIC_COLUMNS + ("status",)
AXES = ("none", "stride", "lambda", "loss_set", "phi_mode", "distance_metric")

# the five ablation rows: baseline, then modality embeddings, then each MAE part
ABLATION_ROWS = (
    ("BASE", {"use_me": False, "extra": "none", "use_mac": False, "use_maid": False}),
    ("BASE+ME", {"use_me": True, "extra": "none", "use_mac": False, "use_maid": False}),
    ("BASE+ME+MAC", {"use_me": True, "extra": "mae", "use_mac": True, "use_maid": False}),
    ("BASE+ME+MAID", {"use_me": True, "extra": "mae", "use_mac": False, "use_maid": True}),
    ("BASE+ME+MAC+MAID", {"use_me": True, "extra": "mae", "use_mac": True, "use_maid": True}),
)


def default_values(axis: str, patch: int = 8) -> list:
    if axis == "stride":
        return list(range(patch, patch // 2 - 1, -2)) if patch >= 2 else [patch]
    if axis == "lambda":
        return [0, 1, 2, 3, 4, 5, 6]
    if axis == "loss_set":
        return ["none", "center", "hc", "mae"]
    if axis == "phi_mode":
        return [m.value for m in PhiMode]
    if axis == "distance_metric":
        return ["l1", "l2", "smooth_l1", "cosine"]
    if axis == "none":
        return ["default"]
    raise ContractError(f"unknown sweep axis {axis!r}")


def split_axis(axis: str) -> tuple:
    """``"phi_mode,distance_metric"`` sweeps the Cartesian product of both axes."""
    parts = tuple(a.strip() for a in axis.split(",") if a.strip())
    for a in parts:
        if a not in AXES:
            raise ContractError(f"unknown sweep axis {a!r}; choose from {AXES}")
    if len(parts) > 1 and "none" in parts:
        raise ContractError("axis 'none' cannot be combined")
    return parts or ("none",)


def axis_overrides(axis: str, value, patch: int = 8) -> dict:
    """TrainConfig overrides that realize ``value`` on one axis."""
    if axis == "none":
        return {}
    if axis == "stride":
        s = int(value)
        if not 1 <= s <= patch:
            raise ContractError(f"stride {s} violates 1 <= S <= P={patch}")
        return {"stride": s}
    if axis == "lambda":
        lam = float(value)
        if lam < 0:
            raise ContractError("lambda values must be non-negative")
        return {"lam": lam, "use_me": True, "extra": "mae", "use_mac": True, "use_maid": True}
    if axis == "loss_set":
        if value not in ("none", "center", "hc", "mae"):
            raise ContractError(f"unknown loss set {value!r}")
        return {"extra": value, "use_me": True}
    if axis == "phi_mode":
        return {"phi_mode": PhiMode(value).value}
    if axis == "distance_metric":
        return {"metric": DistanceMetric(value).value}
    raise ContractError(f"unknown sweep axis {axis!r}")


def value_overrides(axes: tuple, value, patch: int = 8) -> dict:
    parts = str(value).split(":") if len(axes) > 1 else [value]
    if len(parts) != len(axes):
        raise ContractError(f"value {value!r} does not name one entry per axis {axes}")
    out = {}
    for a, v in zip(axes, parts):
        out.update(axis_overrides(a, v, patch))
    return out


@dataclass
class ExperimentSpec:
    name: str
    config: ResolvedConfig
    axis: str = "none"
    values: Optional[list] = None
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    rows: Optional[tuple] = None  # named override sets; replaces axis values when given

    def __post_init__(self):
        if not self.seeds:
            raise ContractError("seed list must be nonempty")
        self.axes = split_axis(self.axis)
        patch = self.patch
        if self.rows is None:
            if self.values is None:
                lists = [default_values(a, patch) for a in self.axes]
                self.values = [":".join(str(x) for x in combo) if len(lists) > 1 else combo[0]
                               for combo in itertools.product(*lists)]
            for v in self.values:
                self.overrides_for(v)  # validate up front

    @property
    def patch(self) -> int:
        return int(self.config.train.get("patch", 8))

    def cell_values(self) -> list:
        return [name for name, _ in self.rows] if self.rows is not None else list(self.values)

    def overrides_for(self, value) -> dict:
        if self.rows is not None:
            return dict(dict(self.rows)[value])
        return value_overrides(self.axes, value, self.patch)


@dataclass
class ResultTable:
    rows: list  # dicts keyed by RESULT_COLUMNS, one per (value, seed)
    axis: str = "none"
    notes: list = field(default_factory=list)

    def values(self) -> list:
        seen = []
        for r in self.rows:
            if r["value"] not in seen:
                seen.append(r["value"])
        return seen

    def mean_rows(self) -> list:
        """Seed means per value, recomputed from the cell rows (failed cells excluded)."""
        out = []
        for v in self.values():
            ok = [r for r in self.rows if r["value"] == v and r["status"] == "ok"]
            row = {"value": v, "seed": "MEAN", "status": "ok" if ok else "failed"}
            for c in METRIC_COLUMNS:
                vals = np.array([r[c] for r in ok], dtype=np.float64)
                row[c] = exact_mean(vals) if ok else float("nan")
            out.append(row)
        return out

    def median(self, value, metric: str = "R1") -> float:
        vals = [r[metric] for r in self.rows if r["value"] == value and r["status"] == "ok"]
        return float(np.median(vals)) if vals else float("nan")

    @property
    def ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in self.rows + self.mean_rows():
            w.writerow([r["value"], r["seed"]] + [repr(float(r[c])) for c in METRIC_COLUMNS] + [r["status"]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, axis: str = "none") -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != RESULT_COLUMNS:
            raise ContractError(f"unexpected results header {header}")
        rows = []
        for rec in reader:
            if rec[1] == "MEAN":
                continue
            row = dict(zip(RESULT_COLUMNS, rec))
            row["seed"] = int(row["seed"])
            for c in METRIC_COLUMNS:
                row[c] = float(row[c])
            rows.append(row)
        return cls(rows, axis)

    def summary(self) -> str:
        lines = [f"axis: {self.axis}", f"{'value':<22}{'seeds':>6}" + "".join(f"{c:>8}" for c in METRIC_COLUMNS)
                 + f"{'R1 med':>8}"]
        for m in self.mean_rows():
            n = sum(1 for r in self.rows if r["value"] == m["value"] and r["status"] == "ok")
            lines.append(f"{str(m['value']):<22}{n:>6}" + "".join(f"{100 * m[c]:8.2f}" for c in METRIC_COLUMNS)
                         + f"{100 * self.median(m['value']):8.2f}")
        failed = [r for r in self.rows if r["status"] != "ok"]
        for r in failed:
            lines.append(f"FAILED value={r['value']} seed={r['seed']}: {r['status']}")
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def check_table(table: ResultTable) -> list:
    """Post-run invariants; returns a list of violations (empty when all hold)."""
    problems = []
    for r in table.rows + table.mean_rows():
        if r["status"] != "ok":
            continue
        vals = [r[c] for c in METRIC_COLUMNS]
        if not all(0.0 <= x <= 1.0 for x in vals):
            problems.append(f"metric outside [0,1] in row {r['value']}/{r['seed']}")
        if not r["R1"] <= r["R10"] <= r["R20"]:
            problems.append(f"Rank-k not monotone in row {r['value']}/{r['seed']}")
    pairs = [(r["value"], r["seed"]) for r in table.rows]
    if len(pairs) != len(set(pairs)):
        problems.append("duplicate (value, seed) rows")
    return problems


# -- cells -------------------------------------------------------------------
_DATA_CACHE: dict = {}


def _datasets(data: DataConfig):
    if data not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[data] = data.build()
    return _DATA_CACHE[data]


def cell_dir(out_dir, value, seed) -> Path:
    safe = str(value).replace("/", "_").replace(":", "_").replace("+", "_")
    return Path(out_dir) / "cells" / f"{safe}__seed{seed}"


def run_cell(config: ResolvedConfig, overrides: dict, seed: int, out_dir=None, value="-") -> dict:
    """Train and evaluate one configuration; never raises for run failures."""
    row = {"value": value, "seed": int(seed), "status": "ok"}
    try:
        tc = config.train_config(seed, **overrides)
        train_set, test_set = _datasets(config.data)
        result = train(tc, train_set, out_dir)
        report = run_protocol(result.model, test_set, config.eval,
                              checkpoint=f"ckpt_epoch{result.state.epoch}")
        row.update({c: report.mean[c] for c in METRIC_COLUMNS})
        if out_dir is not None:
            report.write(out_dir)
            with open(Path(out_dir) / "report.txt", "a") as fh:
                fh.write(f"seq_len: {seq_len(tc.img_h, tc.img_w, tc.patch, tc.stride)}\n")
                fh.write(f"final_loss: {result.final_loss!r}\n")
            (Path(out_dir) / "train_config.json").write_text(json.dumps(tc.to_dict(), indent=2, sort_keys=True))
    except Exception as err:  # noqa: BLE001 - reported as a failure marker
        row.update({c: float("nan") for c in METRIC_COLUMNS})
        row["status"] = f"failed: {type(err).__name__}: {err}".replace("\n", " ")
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.txt").write_text(traceback.format_exc())
    return row


def _cell_job(args):
    config_dict, overrides, seed, out, value = args
    from .config import from_dict

    return run_cell(from_dict(config_dict), overrides, seed, out, value)


def run_experiment(spec: ExperimentSpec, out_dir=None, jobs: int = 1) -> ResultTable:
    jobs_list = []
    for value in spec.cell_values():
        for seed in spec.seeds:
            out = cell_dir(out_dir, value, seed) if out_dir is not None else None
            jobs_list.append((spec.config.to_dict(), spec.overrides_for(value), int(seed), out, value))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_job, jobs_list))
    else:
        rows = [_cell_job(j) for j in jobs_list]
    table = ResultTable(rows, spec.axis if spec.rows is None else "ablation")
    if "stride" in spec.axes and spec.rows is None:
        c = spec.config
        for v in spec.cell_values():
            s = value_overrides(spec.axes, v, spec.patch)["stride"]
            table.notes.append(f"stride {s}: N = {seq_len(c.data.img_h, c.data.img_w, spec.patch, s)}")
    if out_dir is not None:
        write_outputs(table, spec, out_dir)
    return table


def write_outputs(table: ResultTable, spec: ExperimentSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.config.echo(out)
    (out / "results.csv").write_text(table.to_csv())
    problems = check_table(table)
    text = f"experiment: {spec.name}\nprotocol: {spec.config.eval.describe()}\n" + table.summary()
    text += "invariants: " + ("ok" if not problems else "; ".join(problems)) + "\n"
    (out / "report.txt").write_text(text)
    # step logs of every cell, concatenated with a cell column
    lines = []
    for value in spec.cell_values():
        for seed in spec.seeds:
            path = cell_dir(out, value, seed) / "steps.csv"
            if not path.exists():
                continue
            body = path.read_text().splitlines()
            if not lines:
                lines.append("value,seed," + body[0])
            lines.extend(f"{value},{seed},{ln}" for ln in body[1:])
    if lines:
        (out / "steps.csv").write_text("\n".join(lines) + "\n")


def run_ablation_grid(config: ResolvedConfig, seeds=None, out_dir=None, jobs: int = 1) -> ResultTable:
    """The five-row ablation (BASE, +ME, +ME+MAC, +ME+MAID, +ME+MAC+MAID) over ``seeds``."""
    spec = ExperimentSpec("ablation", config, seeds=list(seeds or config.experiment["seeds"]),
                          rows=ABLATION_ROWS)
    return run_experiment(spec, out_dir, jobs)


def run_sweep(config: ResolvedConfig, axis: str, values=None, seeds=None, out_dir=None, jobs: int = 1) -> ResultTable:
    """One train+eval per (value, seed) along ``axis`` (comma-joined axes form a product)."""
    if split_axis(axis) == ("none",):
        raise ContractError("a sweep needs an axis")
    spec = ExperimentSpec(f"sweep-{axis}", config, axis, values, list(seeds or config.experiment["seeds"]))
    return run_experiment(spec, out_dir, jobs)


# -- embeddings --------------------------------------------------------------
def export_embeddings(checkpoint, dataset: Dataset, split: str, out_dir) -> Path:
    """Write matching features of ``dataset`` as ``embeddings.bin`` plus ``embeddings.jsonl``.

    The binary file is one (n, D) tensor blob; each JSON line gives row,
    identity and modality for the same row.
    """
    state = load_state(checkpoint)
    cfg = state.config
    if dataset.images.shape[1:] != (3, cfg.img_h, cfg.img_w):
        raise ContractError(f"checkpoint expects 3x{cfg.img_h}x{cfg.img_w} images, "
                            f"dataset has {dataset.images.shape[1:]}")
    feats = state.model.extract_features(dataset.images, dataset.modalities)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embeddings.bin").write_bytes(tensor_to_bytes(feats))
    with open(out / "embeddings.jsonl", "w") as fh:
        for i in range(len(dataset)):
            fh.write(json.dumps({"row": i, "identity": int(dataset.labels[i]),
                                 "modality": Modality(int(dataset.modalities[i])).short, "split": split}) + "\n")
    return out


def read_embeddings(out_dir):
    """(features, records) as written by :func:`export_embeddings`."""
    out = Path(out_dir)
    feats, _ = tensor_from_bytes((out / "embeddings.bin").read_bytes())
    records = [json.loads(ln) for ln in (out / "embeddings.jsonl").read_text().splitlines() if ln]
    if len(records) != len(feats):
        raise ContractError("embedding index and tensor disagree in length")
    return feats, records
