"""Parameter, operation and energy accounting for a network config.

Two operation-count modes:

* ``uniform``: the prunable products are scaled by ``1 - sparsity`` (what a
  table of nominal sparsity levels reports);
* ``mask-exact``: each surviving weight is charged once per output position it
  multiplies (conv layers: output length, dense: 1).

The SomnNET totals include fixed input-stage overheads (``OVERHEAD_MUL``,
``OVERHEAD_ADD``) that close the gap between the conv/dense products and the
published totals.  Other configs default to the strict count without them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .compression import prune_count, round_half_up
from .errors import ConfigError, ParameterError, ShapeError
from .model import NetworkConfig, compile_plan, reference_config

OVERHEAD_MUL = 1_496
OVERHEAD_ADD = 4_356
PUBLISHED_TOTAL_PARAMS = 27_182

# published complexity table: label, sparsity, binarized, params, mul, add, energy (uJ)
PUBLISHED_TABLE = [
    ("Model 1", 0.0, False, 27182, 1270016, 1272876, 0.4964),
    ("Model 2 (10%)", 0.1, False, 24485, 1143428, 1146288, 0.4470),
    ("Model 2 (20%)", 0.2, False, 21788, 818840, 821700, 0.3205),
    ("Model 2 (30%)", 0.3, False, 19091, 889724, 892584, 0.3481),
    ("Model 2 (40%)", 0.4, False, 16394, 762608, 765468, 0.2985),
    ("Model 2 (50%)", 0.5, False, 13697, 636020, 638880, 0.2492),
    ("Model 2 (60%)", 0.6, False, 11000, 508904, 511764, 0.1996),
    ("Model 2 (70%)", 0.7, False, 8303, 382316, 385176, 0.1502),
    ("Model 2 (80%)", 0.8, False, 10106, 255200, 258060, 0.1006),
    ("Model 3", 0.0, True, 27094, 1496, 1179946, 0.0236),
]
# the prose gives a different add count for the binarized model than the table
PUBLISHED_TEXT_MODEL3_ADDS = 1_272_876

OP_TOLERANCE = 300
ENERGY_TOLERANCE = 1e-4


@dataclass(frozen=True)
class EnergyModel:
    mac_pj: float = 0.39
    add_pj: float = 0.02

    def __post_init__(self):
        if self.mac_pj <= 0 or self.add_pj <= 0:
            raise ParameterError("energy constants must be positive")


DEFAULT_ENERGY = EnergyModel()


@dataclass
class LayerCost:
    name: str
    kind: str
    weights: int
    biases: int
    usage: int  # output positions each weight multiplies
    outputs: int
    products: int  # weights * usage


@dataclass
class ParamCount:
    prunable: int
    nonzero_prunable: int
    biases: int
    normalization: int
    residual: int
    anchor: str

    @property
    def fixed(self) -> int:
        if self.anchor == "published":
            return self.biases + self.residual
        return self.biases + self.normalization

    @property
    def total(self) -> int:
        return self.nonzero_prunable + self.fixed


@dataclass
class CostReport:
    label: str
    sparsity: float
    binarized: bool
    mode: str
    params_total: int
    params_prunable: int
    params_fixed: int
    muls: int
    adds: int
    energy_microjoules: float = 0.0
    params_residual: int = 0
    layers: List[LayerCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label, "sparsity": self.sparsity, "binarized": self.binarized, "mode": self.mode,
            "params_total": self.params_total, "params_prunable": self.params_prunable,
            "params_fixed": self.params_fixed, "params_residual": self.params_residual,
            "muls": self.muls, "adds": self.adds, "energy_microjoules": self.energy_microjoules,
        }


def layer_costs(config: NetworkConfig) -> List[LayerCost]:
    costs = []
    for layer in compile_plan(config):
        if layer.kind == "conv1d":
            f, c, k = layer.spec.filter_count, layer.in_shape[0], layer.spec.kernel_length
            length = layer.out_shape[1]
            costs.append(LayerCost(layer.name, "conv1d", f * c * k, f, length, f * length, f * c * k * length))
        elif layer.kind == "dense":
            out, fan_in = layer.spec.filter_count, layer.in_shape[0]
            costs.append(LayerCost(layer.name, "dense", out * fan_in, out, 1, out, out * fan_in))
    return costs


def normalization_count(config: NetworkConfig) -> int:
    """Stored normalization values: gamma, beta, moving mean and variance per feature."""
    return sum(4 * int(np.prod(l.in_shape)) for l in compile_plan(config) if l.kind == "input-norm")


def is_reference(config: NetworkConfig) -> bool:
    return config.digest() == reference_config().digest()


def published_residual(config: NetworkConfig) -> int:
    """Published total minus the reconstructed conv/dense count (reference config only)."""
    if not is_reference(config):
        return 0
    costs = layer_costs(config)
    return PUBLISHED_TOTAL_PARAMS - sum(c.weights + c.biases for c in costs)


def _check(sparsity: float):
    if not 0.0 <= sparsity <= 0.95:
        raise ParameterError(f"sparsity must be in [0, 0.95], got {sparsity}")


def count_params(config: NetworkConfig, sparsity: float = 0.0, binarized: bool = False,
                 anchor: str = "published", mask: Optional[Dict[str, np.ndarray]] = None) -> ParamCount:
    """Parameter census.

    ``anchor="published"`` charges the published residual (reference config: 124)
    in place of the normalization values, so totals line up with the published
    table; ``anchor="analytic"`` charges the normalization values instead.
    Binarized networks carry no biases.
    """
    _check(sparsity)
    if anchor not in ("published", "analytic"):
        raise ConfigError(f"unknown anchor {anchor!r}")
    costs = layer_costs(config)
    prunable = sum(c.weights for c in costs)
    if mask is not None:
        nonzero = int(sum(np.count_nonzero(m) for m in mask.values()))
    else:
        nonzero = prunable - prune_count(sparsity, prunable)
    biases = 0 if binarized else sum(c.biases for c in costs)
    return ParamCount(prunable, nonzero, biases, normalization_count(config), published_residual(config), anchor)


def count_ops(config: NetworkConfig, sparsity: float = 0.0, binarized: bool = False,
              mode: str = "uniform", mask: Optional[Dict[str, np.ndarray]] = None,
              overhead: Optional[bool] = None, anchor: str = "published",
              label: str = "", energy: EnergyModel = DEFAULT_ENERGY) -> CostReport:
    """Multiplications/additions for one inference, plus parameters and energy."""
    _check(sparsity)
    if mode not in ("uniform", "mask-exact"):
        raise ConfigError(f"unknown counting mode {mode!r}")
    if (mode == "mask-exact") != (mask is not None):
        raise ParameterError("a mask is required exactly when mode is mask-exact")
    if overhead is None:
        overhead = is_reference(config)
    oh_mul, oh_add = (OVERHEAD_MUL, OVERHEAD_ADD) if overhead else (0, 0)
    costs = layer_costs(config)

    if mode == "mask-exact":
        used = 0
        for c in costs:
            key = f"{c.name}.kernel" if c.kind == "conv1d" else f"{c.name}.weight"
            if key not in mask:
                raise ShapeError(f"mask has no entry for {key!r}")
            m = np.asarray(mask[key])
            if m.size != c.weights:
                raise ShapeError(f"mask for {key!r} has {m.size} entries, layer has {c.weights} weights")
            used += int(np.count_nonzero(m)) * c.usage
    else:
        used = round_half_up((1.0 - sparsity) * sum(c.products for c in costs))

    if binarized:
        # ±1 weights: every product becomes an add/subtract; no bias term per output
        muls = oh_mul
        adds = oh_add + max(0, used - sum(c.outputs for c in costs))
    else:
        muls = oh_mul + used
        adds = oh_add + used

    pc = count_params(config, sparsity, binarized, anchor, mask if mode == "mask-exact" else None)
    report = CostReport(
        label=label or default_label(sparsity, binarized),
        sparsity=sparsity, binarized=binarized, mode=mode,
        params_total=pc.total, params_prunable=pc.nonzero_prunable, params_fixed=pc.fixed,
        params_residual=pc.residual if anchor == "published" else 0,
        muls=muls, adds=adds, layers=costs,
    )
    report.energy_microjoules = estimate_energy(report, energy)
    return report


def default_label(sparsity: float, binarized: bool) -> str:
    if binarized:
        return "Model 3" if sparsity == 0 else f"Model 3 ({round(sparsity * 100)}%)"
    return "Model 1" if sparsity == 0 else f"Model 2 ({round(sparsity * 100)}%)"


def energy_from_adds(adds: int, binarized: bool, energy: EnergyModel = DEFAULT_ENERGY) -> float:
    """Energy in microjoules, rounded to 4 decimals.

    Real-weight models price every addition as a 16-bit MAC; binarized
    models price it as a plain 16-bit adder.
    """
    pj = adds * (energy.add_pj if binarized else energy.mac_pj)
    return round(pj * 1e-6, 4)


def estimate_energy(report: CostReport, energy: EnergyModel = DEFAULT_ENERGY) -> float:
    return energy_from_adds(report.adds, report.binarized, energy)


# ----------------------------------------------------------------------
# reporting
# ----------------------------------------------------------------------

def published_row(report: CostReport):
    for row in PUBLISHED_TABLE:
        if abs(row[1] - report.sparsity) < 1e-9 and row[2] == report.binarized:
            return row
    return None


def discrepancies(report: CostReport) -> List[str]:
    """Fields where the computed value departs from the published row beyond tolerance."""
    row = published_row(report)
    if row is None or report.mode != "uniform":
        return []
    _, _, _, params, mul, add, uj = row
    notes = []
    if report.params_total != params:
        notes.append(f"params {report.params_total} vs published {params}")
    if abs(report.muls - mul) > OP_TOLERANCE:
        notes.append(f"mul {report.muls} vs published {mul}")
    if abs(report.adds - add) > OP_TOLERANCE:
        extra = f"/text {PUBLISHED_TEXT_MODEL3_ADDS}" if report.binarized else ""
        notes.append(f"add {report.adds} vs published {add}{extra}")
    if abs(report.energy_microjoules - uj) > ENERGY_TOLERANCE + 1e-12:
        notes.append(f"energy {report.energy_microjoules:.4f} vs published {uj:.4f}")
    return notes


COLUMNS = ["model", "sparsity", "binarized", "mode", "params", "mul", "add", "energy_uj",
           "published_params", "published_mul", "published_add", "published_energy_uj", "discrepancy"]


def table_rows(reports: Sequence[CostReport]) -> List[list]:
    rows = []
    for r in reports:
        row = published_row(r) if r.mode == "uniform" else None
        published = [row[3], row[4], row[5], f"{row[6]:.4f}"] if row else ["", "", "", ""]
        rows.append([r.label, f"{r.sparsity:g}", int(r.binarized), r.mode, r.params_total, r.muls, r.adds,
                     f"{r.energy_microjoules:.4f}", *published, "; ".join(discrepancies(r))])
    return rows


def render_table(reports: Sequence[CostReport]):
    """Return ``(csv_text, aligned_text)`` with one row per report."""
    if not reports:
        raise ParameterError("no reports to render")
    rows = table_rows(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(rows)

    header = ["Network", "Params", "Mul", "Add", "Energy (uJ)", "Discrepancy"]
    body = [[r[0], str(r[4]), str(r[5]), str(r[6]), r[7], r[12]] for r in rows]
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    lines = []
    for i, line in enumerate([header] + body):
        cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:5], widths[1:5])] + [line[5]]
        lines.append(" | ".join(cells).rstrip())
        if i == 0:
            lines.append("-" * len(lines[0]))
    return buf.getvalue(), "\n".join(lines) + "\n"
