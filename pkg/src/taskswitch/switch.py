"""Binary task switches: pulse mask, polarity, and a single scale knob.

A switch replaces a module's task vector by scale * (mask * polarity). The
scale is chosen so the l2 norm over the masked positions is preserved
exactly; everything else is thrown away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vectors import ParamSet, StructureError, TaskVector, sign_quantile


@dataclass
class SwitchModule:
    mask: np.ndarray       # bool, which positions fire
    polarity: np.ndarray   # int8, +-1 for every position (zeros map to -1)
    scale: float           # the knob; 0 iff the mask is empty

    def values(self) -> np.ndarray:
        """Reconstructed module vector: scale * mask * polarity."""
        return self.scale * self.mask.astype(np.float64) \
            * self.polarity.astype(np.float64)


@dataclass
class TaskSwitch:
    task_id: str
    modules: list[tuple[str, SwitchModule]]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.modules]


def pulse_mask(v: np.ndarray, alpha: float) -> np.ndarray:
    """Impulse activation: keep the strongest (1-alpha) share of each sign.

    mask_j = 1 iff v_j > gamma_+ or v_j < gamma_-, with the thresholds taken
    as nearest-rank alpha-quantiles of the positive and negative classes
    separately. Zeros are never activated.
    """
    v = np.asarray(v, dtype=np.float64)
    gamma_pos = sign_quantile(v, alpha, "+")
    gamma_neg = sign_quantile(v, alpha, "-")
    return (v > gamma_pos) | (v < gamma_neg)


def sign_vector(v: np.ndarray) -> np.ndarray:
    """Polarity of every element; zeros map to -1 (they never fire anyway)."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0.0, 1, -1).astype(np.int8)


def switch_scale(v: np.ndarray, mask: np.ndarray) -> float:
    """Norm-preserving knob: ||v * mask||_2 / sqrt(nnz(mask)); 0 if empty."""
    nnz = int(np.count_nonzero(mask))
    if nnz == 0:
        return 0.0
    masked = np.asarray(v, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    return float(np.linalg.norm(masked) / math.sqrt(nnz))


def build_switch(tv: TaskVector, alpha: float) -> TaskSwitch:
    """Compress every module of a task vector into a binary switch."""
    mods = []
    for name, v in tv.modules:
        mask = pulse_mask(v, alpha)
        mods.append((name, SwitchModule(
            mask=mask,
            polarity=sign_vector(v),
            scale=switch_scale(v, mask),
        )))
    return TaskSwitch(tv.task_id, mods)


def switch_values(sw: TaskSwitch) -> TaskVector:
    """The switch as a plain task vector (reconstructed module values)."""
    return TaskVector(sw.task_id, [(n, m.values()) for n, m in sw.modules])


def apply_switch(base: ParamSet, sw: TaskSwitch, weight: float = 1.0) -> ParamSet:
    """base + weight * reconstructed switch, module by module."""
    if len(base.modules) != len(sw.modules):
        raise StructureError(
            f"module count mismatch: {len(base.modules)} vs {len(sw.modules)}")
    out = []
    for (name_b, vb), (name_s, mod) in zip(base.modules, sw.modules):
        if name_b != name_s:
            raise StructureError(f"module name mismatch: {name_b!r} vs {name_s!r}")
        if vb.size != mod.mask.size:
            raise StructureError(
                f"module {name_b!r}: size {vb.size} vs {mod.mask.size}")
        out.append((name_b, vb + weight * mod.values()))
    return ParamSet(out)
