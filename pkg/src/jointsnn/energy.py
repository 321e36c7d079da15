"""Inference energy accounting.

Compute energy charges every ANN multiply-accumulate ``E_MAC`` and every
spike-gated SNN accumulation ``E_ACC``. The first layer sees analog pixels,
so the SNN pays full MACs there at each of the T steps. Data movement is
charged per 64-bit word moved from cache.

All counts are per inference sample (spike-driven counts are averaged over
the reference batch); all energies are in joules.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .network import LayerInfo, SpikeStats, Topology

PJ = 1e-12
E_MAC_PJ = 4.6
E_ACC_PJ = 0.9
E_MOVE_MIN_PJ = 10.0
E_MOVE_MAX_PJ = 100.0
WORD_BITS = 64
VALUE_BITS = 32


@dataclass(frozen=True)
class EnergyConstants:
    e_mac_pj: float = E_MAC_PJ
    e_acc_pj: float = E_ACC_PJ
    e_move_min_pj: float = E_MOVE_MIN_PJ
    e_move_max_pj: float = E_MOVE_MAX_PJ

    @classmethod
    def from_config(cls, cfg) -> "EnergyConstants":
        return cls(cfg.e_mac_pj, cfg.e_acc_pj, cfg.e_move_min_pj, cfg.e_move_max_pj)


def count_ann_ops(topology: Topology) -> dict[str, int]:
    """MACs per synaptic layer for one sample."""
    return {layer.name: layer.macs for layer in topology.layers}


def _layer_adds(layer: LayerInfo, stats: SpikeStats) -> float:
    if layer.kind == "fc":
        # the exit pools before its FC: every (channel, step) that fired feeds c_out accumulators
        active = np.asarray(stats.channels_active[layer.source], dtype=np.float64)
        return float(active.sum()) * layer.c_out
    spikes = np.asarray(stats.maps[layer.source], dtype=np.float64)  # [T, H, W]
    return float(np.sum(spikes * layer.fanout_map()[None]))


def count_snn_ops(topology: Topology, stats: Optional[SpikeStats], time_steps: int) -> dict[str, tuple]:
    """(adds, mults) per layer, per sample.

    Non-first layers accumulate once per incoming spike per synapse it
    drives; the first layer multiplies its analog input at every step.
    """
    if stats is None:
        raise ConfigError("SNN op counts need spike statistics from a recorded forward_snn run")
    if time_steps < 1:
        raise ConfigError(f"time_steps must be at least 1, got {time_steps}")
    out = {}
    for layer in topology.layers:
        if layer.source == "input":
            out[layer.name] = (0.0, float(layer.macs * time_steps))
            continue
        table = stats.channels_active if layer.kind == "fc" else stats.maps
        if layer.source not in table:
            raise ConfigError(f"no spike statistics recorded for {layer.source!r} (feeds {layer.name})")
        out[layer.name] = (_layer_adds(layer, stats) / stats.batch, 0.0)
    return out


def compute_energy(macs: float = 0.0, adds: float = 0.0, mults: float = 0.0,
                   constants: EnergyConstants = EnergyConstants()) -> float:
    """Joules for the given op counts: MACs and mults at E_MAC, adds at E_ACC."""
    return ((macs + mults) * constants.e_mac_pj + adds * constants.e_acc_pj) * PJ


def movement_energy(volume_bits: float, constants: EnergyConstants = EnergyConstants()) -> tuple[float, float]:
    """(min, max) joules to move ``volume_bits`` in 64-bit words."""
    words = volume_bits / WORD_BITS
    return words * constants.e_move_min_pj * PJ, words * constants.e_move_max_pj * PJ


def movement_volume(topology: Topology, time_steps: int, bits: int = VALUE_BITS) -> tuple[int, int]:
    """(ANN bits, SNN bits) moved per sample.

    The ANN reads and writes every activation once. The SNN moves each
    layer's membrane potentials (``bits`` wide) and its 1-bit spikes at
    every step.
    """
    sizes = sum(a.size for a in topology.activations)
    return 2 * sizes * bits, sizes * time_steps * (bits + 1)


@dataclass
class LayerEnergy:
    name: str
    kind: str
    macs: int
    adds: float
    mults: float
    energy_ann: float
    energy_snn: float


@dataclass
class EnergyReport:
    time_steps: int
    reference_batch: int
    ann_macs: int
    snn_adds: float
    snn_mults: float
    compute_energy_ann: float
    compute_energy_snn: float
    movement_volume_ann: int
    movement_volume_snn: int
    movement_energy_min: dict
    movement_energy_max: dict
    spike_rates: dict
    layers: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def build_report(topology: Topology, stats: SpikeStats, time_steps: int,
                 constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    macs = count_ann_ops(topology)
    snn = count_snn_ops(topology, stats, time_steps)
    layers = []
    for layer in topology.layers:
        adds, mults = snn[layer.name]
        layers.append(LayerEnergy(layer.name, layer.kind, macs[layer.name], adds, mults,
                                  compute_energy(macs=macs[layer.name], constants=constants),
                                  compute_energy(adds=adds, mults=mults, constants=constants)))
    total_macs = sum(macs.values())
    total_adds = sum(v[0] for v in snn.values())
    total_mults = sum(v[1] for v in snn.values())
    vol_ann, vol_snn = movement_volume(topology, time_steps)
    ann_min, ann_max = movement_energy(vol_ann, constants)
    snn_min, snn_max = movement_energy(vol_snn, constants)
    rates = {name: stats.rate(name) for name in sorted(stats.maps)}
    return EnergyReport(
        time_steps=time_steps, reference_batch=stats.batch, ann_macs=total_macs,
        snn_adds=total_adds, snn_mults=total_mults,
        compute_energy_ann=compute_energy(macs=total_macs, constants=constants),
        compute_energy_snn=compute_energy(adds=total_adds, mults=total_mults, constants=constants),
        movement_volume_ann=vol_ann, movement_volume_snn=vol_snn,
        movement_energy_min={"ann": ann_min, "snn": snn_min},
        movement_energy_max={"ann": ann_max, "snn": snn_max},
        spike_rates=rates, layers=layers)


def _eng(x: float) -> str:
    return f"{x:.4e}"


def emit_report(report: EnergyReport, fmt: str = "json") -> str:
    """Serialize deterministically as JSON or as a plain-text table."""
    if fmt == "json":
        return json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n"
    if fmt != "table":
        raise ConfigError(f"unknown report format {fmt!r}; expected json or table")
    head = f"{'layer':<28}{'kind':<6}{'#MAC (ANN)':>14}{'#Add.':>16}{'#Mult.':>14}{'E_ANN [J]':>14}{'E_SNN [J]':>14}"
    lines = [f"T = {report.time_steps}, spike statistics over {report.reference_batch} samples (per-sample counts)",
             head, "-" * len(head)]
    for row in report.layers:
        lines.append(f"{row.name:<28}{row.kind:<6}{row.macs:>14d}{row.adds:>16.1f}{row.mults:>14.1f}"
                     f"{_eng(row.energy_ann):>14}{_eng(row.energy_snn):>14}")
    lines.append("-" * len(head))
    lines.append(f"{'total':<34}{report.ann_macs:>14d}{report.snn_adds:>16.1f}{report.snn_mults:>14.1f}"
                 f"{_eng(report.compute_energy_ann):>14}{_eng(report.compute_energy_snn):>14}")
    lines.append("")
    lines.append(f"{'movement':<12}{'volume [bit]':>16}{'min [J]':>14}{'max [J]':>14}")
    for side, vol in (("ann", report.movement_volume_ann), ("snn", report.movement_volume_snn)):
        lines.append(f"{side.upper():<12}{vol:>16d}{_eng(report.movement_energy_min[side]):>14}"
                     f"{_eng(report.movement_energy_max[side]):>14}")
    return "\n".join(lines) + "\n"


def report_schema() -> dict:
    """JSON schema of :func:`emit_report`'s json output."""
    path = Path(__file__).with_name("schemas") / "energy_report.schema.json"
    return json.loads(path.read_text(encoding="utf-8"))
