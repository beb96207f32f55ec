import os
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch
import yaml
from sklearn.metrics import max_error, mean_absolute_error, r2_score
from urbanet.Errors import MetricError, PreconditionError, ShapeError
from urbanet.Grid import SplitAssignment, WorldGrid
from urbanet.Tiler import DEFAULT_LAYOUT, ChannelLayout, Tiler, WindowSpec, partition_centers
from urbanet.UNet import UNet

REPORT_COLUMNS = ["model", "window", "scope", "stratum", "n_cells", "mean_abs", "max_abs", "std", "r2"]
STRATA = ("all_cells", "builtup_positive")
PUBLISHED_BASELINE = os.path.join(os.path.dirname(__file__), "baselines", "published.yaml")


def model_label(window: int, multitask: bool = False) -> str:
    return f"{'Multi-task' if multitask else 'U-Net'} (sz{window})"


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    """Median-aggregated predictions in unpadded coordinates, NaN where undefined."""

    values: np.ndarray
    counts: np.ndarray
    mask: np.ndarray
    targets: Tuple[str, ...]
    window: int

    def plane(self, target: Optional[str] = None) -> np.ndarray:
        if target is None:
            return self.values[0]
        return self.values[self.targets.index(target)]

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0


@dataclass
class MetricsRow:
    model: str = ""
    window: int = 0
    scope: str = "global"
    stratum: str = "all_cells"
    n_cells: int = 0
    mean_abs: float = math.nan
    max_abs: float = math.nan
    std: float = math.nan
    r2: Union[float, str, None] = None

    @property
    def key(self) -> Tuple[str, int, str, str]:
        return (self.model, self.window, self.scope, self.stratum)


@dataclass
class EvalReport:
    rows: List[MetricsRow] = field(default_factory=list)

    def keys(self):
        return [row.key for row in self.rows]

    def add(self, row: MetricsRow):
        if row.key in self.keys():
            raise ValueError(f"Report already has a row for {row.key}.")
        self.rows.append(row)

    def merge(self, other: "EvalReport") -> "EvalReport":
        """Later rows replace earlier rows with the same key."""
        merged = {row.key: row for row in self.rows}
        for row in other.rows:
            if row.key in merged:
                logging.info(f"Replacing report row {row.key}")
            merged[row.key] = row
        return EvalReport(rows=list(merged.values()))

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = dict(vars(row))
            record["window"] = row.window or ""
            record["r2"] = "" if row.r2 is None else row.r2
            records.append(record)
        return pd.DataFrame(records, columns=REPORT_COLUMNS)

    @classmethod
    def read_csv(cls, path: str) -> "EvalReport":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        rows = []
        for record in frame.to_dict("records"):
            number = lambda key: float(record[key]) if record[key] else math.nan
            r2 = record["r2"]
            rows.append(
                MetricsRow(
                    model=record["model"],
                    window=int(record["window"]) if record["window"] else 0,
                    scope=record["scope"],
                    stratum=record["stratum"],
                    n_cells=int(record["n_cells"]) if record["n_cells"] else 0,
                    mean_abs=number("mean_abs"),
                    max_abs=number("max_abs"),
                    std=number("std"),
                    r2=None if not r2 else (r2 if r2.startswith(">") else float(r2)),
                )
            )
        return cls(rows=rows)


def _tile_predictor(model, window: WindowSpec, layout: ChannelLayout) -> Tuple[Callable, int]:
    if not isinstance(model, UNet):
        return model, len(layout.targets)
    spec = model.spec
    if spec.tile_size not in (0, window.size):
        raise ShapeError(f"Model was trained on {spec.tile_size}-pixel tiles, not {window.size}.")
    if spec.input_channels != len(layout.inputs):
        raise ShapeError(
            f"Model expects {spec.input_channels} input channels, layout has {len(layout.inputs)}."
        )
    dtype = next(model.parameters()).dtype
    model.eval()

    def predict(inputs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return model(torch.as_tensor(inputs, dtype=dtype)).numpy()

    return predict, spec.output_channels


def predict_world(
    model: Union[UNet, Callable[[np.ndarray], np.ndarray]],
    grid: WorldGrid,
    window: WindowSpec,
    split: Optional[SplitAssignment] = None,
    split_filter: str = "all",
    layout: ChannelLayout = DEFAULT_LAYOUT,
    batch_size: int = 256,
    threads: int = 1,
) -> PredictionGrid:
    """Per-pixel median over every unaugmented tile whose window covers the pixel.

    Only land pixels inside `split_filter` receive predictions, and only tiles
    centered inside the filter contribute. `model` is a network or any callable
    mapping N x C x S x S inputs to N x T x S x S outputs.
    """
    predict, n_out = _tile_predictor(model, window, layout)
    tiler = Tiler(grid, window, layout, split)
    centers = tiler.centers(split_filter)
    height, width = tiler.height, tiler.width
    selected = np.zeros((height, width), dtype=bool)
    selected[centers[:, 0], centers[:, 1]] = True
    rows_off = np.arange(window.size)[:, None] - window.center_offset[0]
    cols_off = np.arange(window.size)[None, :] - window.center_offset[1]

    def collect(chunk: np.ndarray):
        indices, values = [], []
        for start in range(0, len(chunk), batch_size):
            batch = chunk[start : start + batch_size]
            inputs = np.stack([tiler.tile_at(center).input for center in batch])
            outputs = np.asarray(predict(inputs), dtype=np.float64)
            if outputs.shape != (len(batch), n_out, window.size, window.size):
                raise ShapeError(f"Predictor returned {outputs.shape} for {inputs.shape} inputs.")
            rows = batch[:, 0, None, None] + rows_off
            cols = batch[:, 1, None, None] + cols_off
            inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
            keep = inside & selected[np.clip(rows, 0, height - 1), np.clip(cols, 0, width - 1)]
            indices.append((rows * width + cols)[keep])
            values.append(np.moveaxis(outputs, 1, -1)[keep])
        return indices, values

    chunks = partition_centers(centers, threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(collect, chunks))
    else:
        results = [collect(chunk) for chunk in chunks]
    indices = [part for chunk_indices, _ in results for part in chunk_indices]
    values = [part for _, chunk_values in results for part in chunk_values]
    index = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
    value = np.concatenate(values) if values else np.zeros((0, n_out))

    planes = np.full((n_out, height * width), np.nan)
    counts = np.zeros(height * width, dtype=np.int64)
    for t in range(n_out):
        order = np.lexsort((value[:, t], index))
        pixels, starts, sizes = np.unique(index[order], return_index=True, return_counts=True)
        ordered = value[order, t]
        lower = ordered[starts + (sizes - 1) // 2]
        upper = ordered[starts + sizes // 2]
        planes[t, pixels] = (lower + upper) / 2
        counts[pixels] = sizes
    targets = tuple(layout.targets) if len(layout.targets) == n_out else tuple(
        f"output_{t}" for t in range(n_out)
    )
    logging.info(
        f"Predicted {int((counts > 0).sum())} pixels from {len(centers)} {split_filter} tiles"
    )
    return PredictionGrid(
        values=planes.reshape(n_out, height, width),
        counts=counts.reshape(height, width),
        mask=grid.unpadded(grid.mask),
        targets=targets,
        window=window.size,
    )


def residual_metrics(
    prediction: np.ndarray,
    truth: np.ndarray,
    cells: np.ndarray,
    strict: bool = False,
    model: str = "",
    window: int = 0,
    scope: str = "global",
    stratum: str = "all_cells",
) -> MetricsRow:
    """Mean and max |residual|, population std of residuals and R² over `cells`."""
    row = MetricsRow(model=model, window=window, scope=scope, stratum=stratum)
    cells = np.asarray(cells, dtype=bool)
    observed = np.asarray(truth, dtype=np.float64)[cells]
    predicted = np.asarray(prediction, dtype=np.float64)[cells]
    row.n_cells = int(observed.size)
    if row.n_cells == 0:
        return row
    if not np.all(np.isfinite(predicted)):
        raise PreconditionError(f"{np.sum(~np.isfinite(predicted))} cells have no prediction.")
    residual = observed - predicted
    row.mean_abs = float(mean_absolute_error(observed, predicted))
    row.max_abs = float(max_error(observed, predicted))
    row.std = float(np.std(residual))
    if np.sum((observed - observed.mean()) ** 2) == 0:
        message = f"R² undefined for {scope}/{stratum}: observed values have zero variance"
        if strict:
            raise MetricError(message)
        logging.warning(message)
    else:
        row.r2 = float(r2_score(observed, predicted))
    return row


def stratify(
    grid: WorldGrid,
    split: Optional[SplitAssignment] = None,
    split_filter: str = "all",
    builtup: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """All land cells of the filter, and those with built-up fraction > 0 in 2010.

    The 2010 fraction defaults to urban_2000 + delta_urban of the raw grid.
    """
    cells = grid.unpadded(grid.mask) == 1
    if split is not None:
        cells = cells & split.selects(split_filter)
    if builtup is None:
        builtup = grid.unpadded(grid.channel("urban_2000") + grid.channel("delta_urban"))
    return {"all_cells": cells, "builtup_positive": cells & (builtup > 0)}


def evaluate(
    prediction: PredictionGrid,
    truth: np.ndarray,
    strata: Dict[str, np.ndarray],
    model: str,
    target: Optional[str] = None,
    regions: Optional[Tuple[np.ndarray, Dict[int, str]]] = None,
) -> EvalReport:
    """Rows for every stratum, globally and, given region codes, per region."""
    report = EvalReport()
    plane = prediction.plane(target)
    scopes = {"global": np.ones(plane.shape, dtype=bool)}
    if regions is not None:
        codes, table = regions
        present = np.unique(codes[strata["all_cells"]])
        for code in present:
            scopes[table[int(code)]] = codes == code
    for scope, within in scopes.items():
        for stratum in STRATA:
            report.add(
                residual_metrics(
                    plane,
                    truth,
                    strata[stratum] & within,
                    model=model,
                    window=prediction.window,
                    scope=scope,
                    stratum=stratum,
                )
            )
    return report


def published_rows(path: str = PUBLISHED_BASELINE) -> List[MetricsRow]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return [
        MetricsRow(
            model=data["model"],
            stratum=row["stratum"],
            mean_abs=float(row["mean_abs"]),
            max_abs=float(row["max_abs"]),
            std=float(row["std"]),
            r2=str(row["r2"]),
        )
        for row in data["rows"]
    ]


def export_report(report: EvalReport, path: str):
    if not report.rows:
        raise PreconditionError("Refusing to write an empty report.")
    report.to_frame().to_csv(path, index=False, na_rep="", float_format="%.10g")
    logging.info(f"Wrote {len(report.rows)} report rows to {path}")


def export_scatter(
    prediction: np.ndarray,
    truth: np.ndarray,
    cells: np.ndarray,
    path: str,
    target: str = "delta_urban",
) -> str:
    """Writes `observed,predicted` per cell to `path` and an SVG beside it."""
    cells = np.asarray(cells, dtype=bool)
    frame = pd.DataFrame(
        {"observed": np.asarray(truth)[cells], "predicted": np.asarray(prediction)[cells]}
    )
    frame.to_csv(path, index=False, float_format="%.10g")
    logging.info(f"Wrote {len(frame)} scatter points to {path}")
    return render_scatter(path, target)


def render_scatter(path: str, target: str = "delta_urban") -> str:
    """Renders a scatter CSV as an 800x800 SVG with the identity line."""
    frame = pd.read_csv(path)
    svg_path = os.path.splitext(path)[0] + ".svg"
    figure, axes = plt.subplots(figsize=(800 / 72, 800 / 72), dpi=72)
    low = float(min(frame.min().min(), 0.0)) if len(frame) else 0.0
    high = float(max(frame.max().max(), 0.0)) if len(frame) else 1.0
    axes.plot([low, high], [low, high], color="black", linewidth=1, label="identity")
    axes.scatter(frame["observed"], frame["predicted"], s=4, alpha=0.5)
    axes.set_xlabel(f"observed {target}")
    axes.set_ylabel(f"predicted {target}")
    axes.legend(loc="upper left")
    figure.savefig(svg_path, format="svg")
    plt.close(figure)
    logging.info(f"Rendered {svg_path}")
    return svg_path
