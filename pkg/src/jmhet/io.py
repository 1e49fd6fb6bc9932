"""Run configuration, CSV ingestion and the fit artifact.

Longitudinal CSV: ``id, time, y`` plus covariates, one row per measurement.
Survival CSV: ``id, obs_time, status`` plus covariates, status in 0..K.
Design blocks are given as explicit column lists; the name ``"1"`` is an
intercept column and ``"time"`` the measurement time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:             # Python < 3.11
    import tomli as tomllib

from .errors import InputError, MissingColumn
from .model import (HETEROGENEOUS, HOMOGENEOUS, BaselineHazard, Dataset, FitResult,
                    ModelSpec, Params, build_dataset)

FORMAT = "jmhet-fit"
VERSION = 1

DEFAULT_COLUMNS = {
    "id": "id", "time": "time", "y": "y", "obs_time": "obs_time", "status": "status",
    "x1": ["1", "time"], "z": ["1"], "w": ["1", "time"], "v": ["1"], "x2": [],
}
BLOCKS = ("x1", "z", "w", "v", "x2")
SPEC_KEYS = ("quad_points", "max_iter", "tol_param", "tol_loglik", "variance_mode")


def load_config(path) -> dict:
    """Parse a TOML run configuration."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: cannot read config ({exc.strerror})") from None
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


@dataclass
class ColumnMap:
    id: str = "id"
    time: str = "time"
    y: str = "y"
    obs_time: str = "obs_time"
    status: str = "status"
    blocks: dict = field(default_factory=lambda: {b: list(DEFAULT_COLUMNS[b]) for b in BLOCKS})

    @classmethod
    def from_config(cls, table: dict | None) -> "ColumnMap":
        table = dict(table or {})
        unknown = set(table) - set(DEFAULT_COLUMNS)
        if unknown:
            raise InputError(f"unknown column keys: {', '.join(sorted(unknown))}")
        cm = cls(**{k: table.get(k, DEFAULT_COLUMNS[k])
                    for k in ("id", "time", "y", "obs_time", "status")})
        for b in BLOCKS:
            cols = table.get(b, DEFAULT_COLUMNS[b])
            if isinstance(cols, str):
                cols = [cols]
            if len(set(cols)) != len(cols):
                raise InputError(f"a column is mapped twice in block {b!r}")
            cm.blocks[b] = list(cols)
        return cm

    def homogeneous(self) -> "ColumnMap":
        blocks = dict(self.blocks, w=["1"], v=[])
        return ColumnMap(self.id, self.time, self.y, self.obs_time, self.status, blocks)

    def to_dict(self) -> dict:
        return {"id": self.id, "time": self.time, "y": self.y, "obs_time": self.obs_time,
                "status": self.status, **self.blocks}


def read_table(path, required, keys=()) -> pd.DataFrame:
    """Read a CSV and check that ``required`` columns exist and are numeric.

    ``keys`` columns (subject ids) must exist but keep their parsed type.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, skipinitialspace=True)
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None
    for col in keys:
        if col not in df.columns:
            raise MissingColumn(f"{path}: missing column {col!r}")
    for col in required:
        if col not in df.columns:
            raise MissingColumn(f"{path}: missing column {col!r}")
        num = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(num.isna().to_numpy())
        if len(bad):
            line = int(bad[0]) + 2          # 1-based, after the header
            raw = df[col].iloc[bad[0]]
            raise InputError(f"{path}:{line}: column {col!r}: non-numeric value {raw!r}")
        df[col] = num.astype(float)
    return df


def design_matrix(df: pd.DataFrame, cols: list[str], time_col: str) -> np.ndarray:
    out = np.empty((len(df), len(cols)))
    for j, c in enumerate(cols):
        if c == "1":
            out[:, j] = 1.0
        elif c == "time":
            out[:, j] = df[time_col].to_numpy(float)
        else:
            out[:, j] = df[c].to_numpy(float)
    return out


def _covariates(cols) -> list[str]:
    return [c for c in cols if c not in ("1", "time")]


def spec_from_columns(cm: ColumnMap, K: int, **controls) -> ModelSpec:
    b = cm.blocks
    return ModelSpec(p1=len(b["x1"]), q_b=len(b["z"]), p_w=len(b["w"]),
                     q_omega=len(b["v"]), p2=len(b["x2"]), K=K, **controls)


def dataset_from_frames(long: pd.DataFrame, surv: pd.DataFrame, cm: ColumnMap,
                        K: int | None = None, names=("longitudinal", "survival"),
                        **controls) -> Dataset:
    if K is None:
        K = max(int(surv[cm.status].max()) if len(surv) else 1, 1)
    if controls.get("variance_mode") == HOMOGENEOUS:
        cm = cm.homogeneous()
    spec = spec_from_columns(cm, K, **controls)
    b = cm.blocks
    try:
        return build_dataset(
            spec, surv[cm.id].to_numpy(), surv[cm.obs_time].to_numpy(float),
            surv[cm.status].to_numpy(float), design_matrix(surv, b["x2"], cm.obs_time),
            long[cm.id].to_numpy(), long[cm.time].to_numpy(float), long[cm.y].to_numpy(float),
            design_matrix(long, b["x1"], cm.time), design_matrix(long, b["z"], cm.time),
            design_matrix(long, b["w"], cm.time), design_matrix(long, b["v"], cm.time))
    except InputError as exc:
        raise type(exc)(f"{names[0]} / {names[1]}: {exc}") from None


def load_dataset(long_path, surv_path, cm: ColumnMap, K: int | None = None,
                 **controls) -> Dataset:
    long_cols = {cm.id, cm.time, cm.y} | {c for blk in ("x1", "z", "w", "v")
                                           for c in _covariates(cm.blocks[blk])}
    surv_cols = {cm.id, cm.obs_time, cm.status} | set(_covariates(cm.blocks["x2"]))
    long = read_table(long_path, sorted(long_cols - {cm.id}), [cm.id])
    surv = read_table(surv_path, sorted(surv_cols - {cm.id}), [cm.id])
    return dataset_from_frames(long, surv, cm, K, names=(str(long_path), str(surv_path)),
                               **controls)


# -- fit artifact ------------------------------------------------------------

def fit_to_dict(fit: FitResult, columns: ColumnMap | None = None) -> dict:
    return {
        "format": FORMAT, "version": VERSION,
        "spec": fit.spec.to_dict(),
        "params": fit.params.to_dict(),
        "baselines": [bl.to_dict() for bl in fit.baselines],
        "cov": None if fit.cov is None else np.asarray(fit.cov).tolist(),
        "names": fit.names,
        "loglik_trace": [float(x) for x in fit.loglik_trace],
        "n_iter": fit.n_iter, "converged": bool(fit.converged),
        "runtime": fit.runtime,
        "columns": None if columns is None else columns.to_dict(),
    }


def fit_from_dict(d: dict) -> tuple[FitResult, ColumnMap | None]:
    if d.get("format") != FORMAT:
        raise InputError("not a fit artifact")
    if d.get("version") != VERSION:
        raise InputError(f"unsupported artifact version {d.get('version')!r}")
    spec = ModelSpec(**d["spec"])
    fit = FitResult(spec=spec, params=Params.from_dict(d["params"], spec),
                    baselines=[BaselineHazard.from_dict(b) for b in d["baselines"]],
                    loglik_trace=list(d["loglik_trace"]), n_iter=d["n_iter"],
                    converged=d["converged"], runtime=d.get("runtime", {}),
                    cov=None if d["cov"] is None else np.asarray(d["cov"], dtype=float))
    cols = d.get("columns")
    cm = None
    if cols is not None:
        cm = ColumnMap(**{k: cols[k] for k in ("id", "time", "y", "obs_time", "status")})
        cm.blocks = {b: list(cols[b]) for b in BLOCKS}
    return fit, cm


def save_fit(fit: FitResult, path, columns: ColumnMap | None = None) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit, columns), indent=1))


def load_fit(path) -> tuple[FitResult, ColumnMap | None]:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return fit_from_dict(d)


def spec_controls(model: dict | None) -> dict:
    model = dict(model or {})
    unknown = set(model) - set(SPEC_KEYS)
    if unknown:
        raise InputError(f"unknown [model] keys: {', '.join(sorted(unknown))}")
    mode = model.get("variance_mode", HETEROGENEOUS)
    if mode not in (HETEROGENEOUS, HOMOGENEOUS):
        raise InputError(f"unknown variance_mode {mode!r}")
    return model
