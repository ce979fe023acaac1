"""Recorded domain kernels and the sensitivity reports they produce."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tape as tp
from .policy import MlpArch


@dataclass
class DomainKernel:
    """One recorded simulation: dynamics, policy, smooth constraints and reward.

    ``builder`` is the same function that was recorded; calling it with floats
    is the independent plain-arithmetic path used by the mirror check.
    """

    name: str
    tape: tp.Tape
    builder: Callable
    arch: MlpArch | None
    inputs: np.ndarray
    input_names: list[str]
    randoms: np.ndarray
    output_names: list[str]
    objective: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return self.tape.n_params

    def workspace(self) -> tp.Workspace:
        return self.tape.workspace()

    def _slots(self, inputs, randoms):
        return (self.inputs if inputs is None else inputs, self.randoms if randoms is None else randoms)

    def evaluate(self, params, inputs=None, randoms=None, ws: tp.Workspace | None = None) -> np.ndarray:
        ins, rns = self._slots(inputs, randoms)
        return tp.forward(self.tape, ins, params, rns, ws)

    def value(self, params, inputs=None, randoms=None, ws=None) -> float:
        return float(self.evaluate(params, inputs, randoms, ws)[self.objective])

    def value_and_grad(self, params, inputs=None, randoms=None, ws=None, output: int | None = None):
        ins, rns = self._slots(inputs, randoms)
        k = self.objective if output is None else output
        val, res = tp.gradient(self.tape, ins, params, rns, ws, output=k)
        return float(val), res

    def plain(self, params, inputs=None, randoms=None) -> np.ndarray:
        ins, rns = self._slots(inputs, randoms)
        return tp.evaluate_plain(self.builder, ins, params, rns)

    def mirror(self, params, inputs=None, randoms=None) -> float:
        ins, rns = self._slots(inputs, randoms)
        return tp.mirror_check(self.builder, ins, params, rns, tape=self.tape)


@dataclass
class SensitivityReport:
    names: list[str]
    adjoint: np.ndarray
    fd: np.ndarray | None = None
    label: str = "delta"

    def __len__(self):
        return len(self.names)

    @property
    def rel_err(self) -> np.ndarray | None:
        if self.fd is None:
            return None
        return relative_error(self.adjoint, self.fd)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.adjoint)))

    def to_csv(self, path: str | Path, name_col: str = "name", comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow([name_col, self.label, f"fd_{self.label}", "rel_err"])
            fd = self.fd if self.fd is not None else [np.nan] * len(self)
            rel = self.rel_err if self.fd is not None else [np.nan] * len(self)
            for row in zip(self.names, self.adjoint, fd, rel):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def relative_error(a, b, floor: float = 0.0) -> np.ndarray:
    """|a-b| / max(|b|, floor); entries with both sides zero count as exact."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    den = np.maximum(np.abs(b), floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.abs(a - b) / den
    err[(np.abs(a - b) == 0)] = 0.0
    return err


def central_fd(f: Callable[[np.ndarray], float], x: np.ndarray, idx: Sequence[int], h) -> np.ndarray:
    """Central differences of a scalar function along selected coordinates.

    ``h`` is a scalar or per-coordinate array of absolute bump sizes.
    """
    x = np.asarray(x, dtype=float)
    hs = np.broadcast_to(np.asarray(h, dtype=float), (len(idx),))
    out = np.empty(len(idx))
    for n, (i, hi) in enumerate(zip(idx, hs)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        out[n] = (f(xp) - f(xm)) / (2.0 * hi)
    return out
