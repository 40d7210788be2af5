"""CSV artifacts written with pandas, plus YAML headers for observation records."""

from pathlib import Path
from typing import Any, Optional, Sequence, TextIO, Union

import numpy as np
import pandas as pd
import yaml

from ..core.paths import IncrementPath, Level

FLOAT_FORMAT = "%.17g"
OBSERVATIONS_FILE = "observations.csv"
HEADER_FILE = "header.yaml"

PathLike = Union[str, Path]


def write_frame(df: pd.DataFrame, out: Union[PathLike, TextIO], append: bool = False) -> None:
    if append:
        df.to_csv(out, index=False, float_format=FLOAT_FORMAT, mode="a", header=False)
    else:
        df.to_csv(out, index=False, float_format=FLOAT_FORMAT)


def write_observations(directory: PathLike, obs: IncrementPath, header: dict[str, Any]) -> Path:
    """observations.csv (step, dY_1..dY_dy) and header.yaml describing how it was generated."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(obs.data, columns=[f"dY_{i + 1}" for i in range(obs.dim)])
    df.insert(0, "step", np.arange(obs.steps))
    write_frame(df, directory / OBSERVATIONS_FILE)
    meta = {**header, "level": obs.level.l, "horizon": obs.horizon}
    (directory / HEADER_FILE).write_text(yaml.safe_dump(meta, sort_keys=False))
    return directory


def read_observations(directory: PathLike) -> tuple[IncrementPath, dict[str, Any]]:
    directory = Path(directory)
    try:
        header = yaml.safe_load((directory / HEADER_FILE).read_text()) or {}
    except yaml.YAMLError as e:
        raise ValueError(f"Invalid observation header YAML: {e}")
    df = pd.read_csv(directory / OBSERVATIONS_FILE, float_precision="round_trip")
    columns = [c for c in df.columns if c.startswith("dY_")]
    return IncrementPath(Level(int(header["level"])), int(header["horizon"]), df[columns].to_numpy()), header


class RecordSink:
    """Appends rows to a CSV as they arrive; the header is written with the first row."""

    def __init__(self, out: Union[PathLike, TextIO], columns: Sequence[str]):
        self.out = out
        self.columns = list(columns)
        self._started = False

    def __call__(self, row: Any) -> None:
        values = row.to_dict() if hasattr(row, "to_dict") else dict(row)
        df = pd.DataFrame([values], columns=self.columns)
        write_frame(df, self.out, append=self._started)
        if hasattr(self.out, "flush"):
            self.out.flush()
        self._started = True


def read_records(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def trajectory_frame(trajectories: Sequence[Any]) -> pd.DataFrame:
    """run, iter, theta_k, a_t_k, b_t, U_plus, U_minus for every iterate of every run."""
    d = len(trajectories[0].names) if trajectories else 0
    columns = (["run", "iter"] + [f"theta_{k + 1}" for k in range(d)] + [f"a_t_{k + 1}" for k in range(d)]
               + ["b_t", "U_plus", "U_minus"])
    rows = []
    for trajectory in trajectories:
        for it in trajectory.iterates:
            row = {"run": trajectory.run, "iter": it.iteration}
            row.update({f"theta_{k + 1}": float(it.theta[k]) for k in range(d)})
            row.update({f"a_t_{k + 1}": float(it.a[k]) for k in range(d)})
            row.update({"b_t": it.b, "U_plus": it.u_plus, "U_minus": it.u_minus})
            rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def summary_frame(summary: Any) -> pd.DataFrame:
    d = summary.mean.shape[1]
    df = pd.DataFrame({"iter": np.arange(summary.mean.shape[0])})
    for k in range(d):
        df[f"mean_{k + 1}"] = summary.mean[:, k]
    for k in range(d):
        df[f"std_{k + 1}"] = summary.std[:, k]
    return df


def kbf_frame(means: np.ndarray, covs: np.ndarray) -> pd.DataFrame:
    df = pd.DataFrame(means, columns=[f"m_{i + 1}" for i in range(means.shape[1])])
    diag = np.diagonal(covs, axis1=1, axis2=2)
    for i in range(diag.shape[1]):
        df[f"P_{i + 1}{i + 1}"] = diag[:, i]
    df.insert(0, "k", np.arange(len(means)))
    return df


def trace_frame(cumulative: np.ndarray, means: np.ndarray) -> pd.DataFrame:
    """step, U after the step, ensemble mean entering the step."""
    df = pd.DataFrame(means[:len(cumulative)], columns=[f"m_{i + 1}" for i in range(means.shape[1])])
    df.insert(0, "U", cumulative)
    df.insert(0, "step", np.arange(len(cumulative)))
    return df


def write_sidecar(path: PathLike, meta: dict[str, Any], suffix: Optional[str] = ".yaml") -> Path:
    target = Path(str(path) + suffix)
    target.write_text(yaml.safe_dump(meta, sort_keys=False))
    return target
