"""Small tanh MLP policies with optional per-timestep output biases.

Flattened parameter layout (fixed, shared by optimizers and tape slots)::

    W1 (out x in, row-major), b1, W2, b2, ..., WL, bL, time_biases (T x bias_dim, row-major)

Hidden layers use tanh, the output layer is linear, and ``time_biases[t]`` is
added to the first ``bias_dim`` outputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import stream
from .tape import dot, tanh


@dataclass(frozen=True)
class MlpArch:
    layer_sizes: tuple[int, ...]
    use_time_bias: bool = False
    horizon: int = 0
    bias_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        if self.use_time_bias:
            if self.horizon < 1:
                raise ValueError("time biases need horizon >= 1")
            if self.bias_dim == 0:
                object.__setattr__(self, "bias_dim", self.layer_sizes[-1])
            if not 1 <= self.bias_dim <= self.layer_sizes[-1]:
                raise ValueError("bias_dim must be within the output width")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_mlp(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def descriptor(self) -> str:
        d = "mlp:" + "-".join(map(str, self.layer_sizes))
        if self.use_time_bias:
            d += f";time_bias={self.horizon}x{self.bias_dim}"
        return d

    @classmethod
    def from_descriptor(cls, text: str) -> MlpArch:
        m = re.fullmatch(r"mlp:([\d-]+)(?:;time_bias=(\d+)x(\d+))?", text.strip())
        if not m:
            raise ValueError(f"bad architecture descriptor {text!r}")
        sizes = tuple(int(s) for s in m.group(1).split("-"))
        if m.group(2):
            return cls(sizes, True, int(m.group(2)), int(m.group(3)))
        return cls(sizes)


def param_count(arch: MlpArch) -> int:
    n = arch.n_mlp
    if arch.use_time_bias:
        n += arch.horizon * arch.bias_dim
    return n


@dataclass
class PolicyParams:
    arch: MlpArch
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (param_count(self.arch),):
            raise ValueError(f"expected {param_count(self.arch)} parameters, got {self.flat.shape}")

    @property
    def weights_and_biases(self) -> np.ndarray:
        return self.flat[: self.arch.n_mlp]

    @property
    def time_biases(self) -> np.ndarray:
        a = self.arch
        if not a.use_time_bias:
            return np.zeros((0, 0))
        return self.flat[a.n_mlp :].reshape(a.horizon, a.bias_dim)

    def copy(self) -> PolicyParams:
        return PolicyParams(self.arch, self.flat.copy())


def init(arch: MlpArch, seed: int, output_scale: float = 1.0) -> PolicyParams:
    """Glorot-uniform weights, zero layer biases, zero time biases.

    ``output_scale`` multiplies the output-layer weights; 0 starts training
    from the all-zero action while keeping random hidden features.
    """
    gen = stream(seed, "policy-init")
    flat = np.zeros(param_count(arch))
    pos = 0
    s = arch.layer_sizes
    for i in range(len(s) - 1):
        fan_in, fan_out = s[i], s[i + 1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w = gen.uniform(-lim, lim, fan_in * fan_out)
        flat[pos : pos + fan_in * fan_out] = w * output_scale if i == len(s) - 2 else w
        pos += fan_in * fan_out + fan_out
    return PolicyParams(arch, flat)


def evaluate(params: Sequence, arch: MlpArch, state: Sequence, t: int | None = None) -> list:
    """Scalar policy evaluation; works on floats and on recorded tape values.

    ``params`` is any indexable flat sequence in the documented layout (a numpy
    array, a :class:`PolicyParams` flat array, or a list of tape slots).
    """
    if isinstance(params, PolicyParams):
        params = params.flat
    s = arch.layer_sizes
    if len(state) != s[0]:
        raise ValueError(f"state has {len(state)} entries, policy expects {s[0]}")
    if arch.use_time_bias and (t is None or not 0 <= t < arch.horizon):
        raise IndexError(f"timestep {t} outside [0, {arch.horizon})")
    h = list(state)
    pos = 0
    last = len(s) - 2
    for layer in range(len(s) - 1):
        n_in, n_out = s[layer], s[layer + 1]
        w0 = pos
        b0 = pos + n_in * n_out
        out = []
        for j in range(n_out):
            z = dot(params[w0 + j * n_in : w0 + (j + 1) * n_in], h) + params[b0 + j]
            out.append(tanh(z) if layer < last else z)
        h = out
        pos = b0 + n_out
    if arch.use_time_bias:
        tb = pos + t * arch.bias_dim
        for j in range(arch.bias_dim):
            h[j] = h[j] + params[tb + j]
    return h


def evaluate_batch(flat: np.ndarray, arch: MlpArch, states: np.ndarray, t: int | None = None) -> np.ndarray:
    """Vectorized numpy evaluation over a batch of states (rows)."""
    s = arch.layer_sizes
    h = np.asarray(states, dtype=float)
    pos = 0
    for layer in range(len(s) - 1):
        n_in, n_out = s[layer], s[layer + 1]
        w = flat[pos : pos + n_in * n_out].reshape(n_out, n_in)
        b = flat[pos + n_in * n_out : pos + n_in * n_out + n_out]
        h = h @ w.T + b
        if layer < len(s) - 2:
            h = np.tanh(h)
        pos += n_in * n_out + n_out
    if arch.use_time_bias:
        h = h.copy()
        h[..., : arch.bias_dim] += flat[pos + t * arch.bias_dim : pos + (t + 1) * arch.bias_dim]
    return h


def save_csv(params: PolicyParams, path: str | Path) -> None:
    lines = [params.arch.descriptor()] + [repr(float(v)) for v in params.flat]
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path: str | Path) -> PolicyParams:
    lines = Path(path).read_text().split()
    arch = MlpArch.from_descriptor(lines[0])
    return PolicyParams(arch, np.array([float(v) for v in lines[1:]]))
