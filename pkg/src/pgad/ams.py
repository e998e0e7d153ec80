"""Adaptive sampling of genuine pairs versus same-class pseudo-pairs.

A batch plan names which paired samples enter the batch as genuine pairs
and which unpaired modality-A samples get a same-class modality-B donor.
The genuine share is ceil(r * B) with r = sigmoid(theta) in dynamic mode,
a constant in fixed mode, and 1.0 (genuine-only batches) when disabled.

theta has no pathwise gradient because batch composition is a discrete
draw.  theta_gradient therefore differentiates the expected-loss surrogate

    L(theta) = r * loss_paired + (1 - r) * loss_pseudo

which gives d L / d theta = (loss_paired - loss_pseudo) * r * (1 - r).
The realized batches still follow the rounded counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

from .errors import (
    ConfigError,
    DonorExhaustionError,
    NumericHealthError,
    ProtocolError,
    RangeError,
    UsageError,
)
import numpy as np

from .synthdata import Sample

AMS_MODES = ("none", "fixed", "dynamic")


def sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class AmsState:
    theta: float = 0.0
    mode: str = "dynamic"
    fixed_ratio: float = 0.5

    def validate(self) -> None:
        if self.mode not in AMS_MODES:
            raise ConfigError(f"mode must be one of {AMS_MODES}, got {self.mode!r}")
        if not math.isfinite(self.theta):
            raise ConfigError(f"theta must be finite, got {self.theta}")
        if not (0.0 <= self.fixed_ratio <= 1.0):
            raise ConfigError(f"fixed_ratio must be in [0, 1], got {self.fixed_ratio}")


@dataclass(frozen=True)
class BatchPlan:
    genuine: tuple
    pseudo: tuple  # (recipient modality-A id, donor id, shared class) triples
    unpaired_student_only: tuple
    shortfall: int = 0

    @property
    def size(self) -> int:
        return len(self.genuine) + len(self.pseudo)


def sampling_ratio(state: AmsState) -> float:
    """Share of the batch reserved for genuine pairs."""
    state.validate()
    if state.mode == "none":
        return 1.0
    if state.mode == "fixed":
        return state.fixed_ratio
    return sigmoid(state.theta)


def build_batch(
    paired_pool: Sequence[Sample],
    unpaired_pool: Sequence[Sample],
    batch_size: int,
    r: float,
    seed: int,
) -> BatchPlan:
    """Compose one batch: ceil(r*B) genuine pairs, pseudo-pairs for the rest.

    Donors are drawn per class without replacement within the batch (a
    paired sample may appear once as its own genuine pair and once as a
    donor, but never donates twice).  When pseudo-pairs cannot fill the
    remainder, unused genuine pairs top the batch up; any residual gap is
    reported via `shortfall` rather than padded.  Deterministic given seed.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if not (0.0 <= r <= 1.0):
        raise RangeError(f"sampling ratio must be in [0, 1], got {r}")
    if not paired_pool:
        raise ProtocolError("paired pool is empty: every batch needs at least one genuine pair")
    for s in paired_pool:
        if not s.paired:
            raise UsageError(f"sample {s.id} in the paired pool has no modality-B features")
    for s in unpaired_pool:
        if s.paired:
            raise UsageError(f"sample {s.id} in the unpaired pool is paired")
    paired_ids = {s.id for s in paired_pool}
    overlap = paired_ids & {s.id for s in unpaired_pool}
    if overlap:
        raise UsageError(f"pools must be disjoint, shared ids: {sorted(overlap)[:5]}")

    donor_classes = {s.label for s in paired_pool}
    for s in unpaired_pool:
        if s.label not in donor_classes:
            raise DonorExhaustionError(
                f"class {s.label} has unpaired samples but no paired donor"
            )

    rng = np.random.default_rng(seed)
    paired_sorted = sorted(paired_pool, key=lambda s: s.id)
    unpaired_sorted = sorted(unpaired_pool, key=lambda s: s.id)

    n_genuine = min(math.ceil(r * batch_size), len(paired_sorted), batch_size)
    paired_order = [paired_sorted[i] for i in rng.permutation(len(paired_sorted))]
    genuine = paired_order[:n_genuine]

    donors_by_class: dict[int, list[Sample]] = {}
    for s in paired_order:
        donors_by_class.setdefault(s.label, []).append(s)

    remainder = batch_size - n_genuine
    pseudo = []
    if remainder > 0 and unpaired_sorted:
        recipient_order = [unpaired_sorted[i] for i in rng.permutation(len(unpaired_sorted))]
        for rec in recipient_order:
            if len(pseudo) == remainder:
                break
            pool = donors_by_class.get(rec.label, [])
            if not pool:
                continue
            donor = pool.pop()
            pseudo.append((rec.id, donor.id, rec.label))

    still_short = batch_size - n_genuine - len(pseudo)
    if still_short > 0:
        extra = paired_order[n_genuine : n_genuine + still_short]
        genuine = genuine + extra

    shortfall = batch_size - len(genuine) - len(pseudo)
    return BatchPlan(
        genuine=tuple(s.id for s in genuine),
        pseudo=tuple(pseudo),
        unpaired_student_only=tuple(p[0] for p in pseudo),
        shortfall=shortfall,
    )


def theta_gradient(state: AmsState, loss_paired: float, loss_pseudo: float) -> float:
    """d(expected loss)/d(theta) under the surrogate described in the module docstring."""
    state.validate()
    if state.mode != "dynamic":
        raise UsageError(f"theta is only trainable in dynamic mode, state is {state.mode!r}")
    if not math.isfinite(loss_paired) or not math.isfinite(loss_pseudo):
        raise NumericHealthError(
            f"subset losses must be finite, got paired={loss_paired}, pseudo={loss_pseudo}"
        )
    r = sigmoid(state.theta)
    return (loss_paired - loss_pseudo) * r * (1.0 - r)


def export_ams_trace_csv(rows, path) -> None:
    """Write (epoch, theta, ratio) rows for offline ratio-evolution plots."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "theta", "ratio"])
        for epoch, theta, ratio in rows:
            writer.writerow([epoch, repr(float(theta)), repr(float(ratio))])
