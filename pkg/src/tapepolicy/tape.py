"""Record-once / replay-many reverse-mode AD tape.

A builder function is written against plain scalars and the math helpers in
this module (:func:`exp`, :func:`log`, :func:`sqrt`, :func:`tanh`, ...). Called
with floats it is ordinary double arithmetic; called by :func:`record` it
receives :class:`AVar` handles and every operation is appended to a flat op
list. The resulting :class:`Tape` is immutable and can be replayed forward and
in reverse with new inputs, parameters and random draws.

Control flow is resolved while recording. Any attempt to branch on a tape
value (``if x > 0``, ``bool(x)``, ``float(x)``) raises
:class:`UnsupportedPrimitiveError`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _replay as _r

OPCODES = {
    "const": _r.CONST,
    "input": _r.INPUT,
    "param": _r.PARAM,
    "random": _r.RANDOM,
    "output": _r.OUTPUT,
    "add": _r.ADD,
    "sub": _r.SUB,
    "mul": _r.MUL,
    "div": _r.DIV,
    "neg": _r.NEG,
    "exp": _r.EXP,
    "log": _r.LOG,
    "sqrt": _r.SQRT,
    "tanh": _r.TANH,
    "powc": _r.POWC,
    "sin": _r.SIN,
    "cos": _r.COS,
}
OPNAMES = {v: k for k, v in OPCODES.items()}

DUMP_MAGIC = b"SNAP"
DUMP_VERSION = 1


class TapeError(Exception):
    pass


class UnsupportedPrimitiveError(TapeError, TypeError):
    """Builder used a construct the tape cannot represent (branch, abs, ...)."""


class SlotMismatchError(TapeError, ValueError):
    pass


class ReplayOrderError(TapeError, RuntimeError):
    pass


class _Recorder:
    __slots__ = ("code", "a", "b", "c", "_consts")

    def __init__(self):
        self.code: list[int] = []
        self.a: list[int] = []
        self.b: list[int] = []
        self.c: list[float] = []
        self._consts: dict[tuple[float, float], int] = {}

    def emit(self, code: int, a: int = -1, b: int = -1, c: float = 0.0) -> AVar:
        i = len(self.code)
        self.code.append(code)
        self.a.append(a)
        self.b.append(b)
        self.c.append(c)
        return AVar(self, i)

    def const(self, value: float) -> int:
        value = float(value)
        key = (value, math.copysign(1.0, value))
        i = self._consts.get(key)
        if i is None:
            i = self.emit(_r.CONST, c=value).i
            self._consts[key] = i
        return i

    def index_of(self, x) -> int:
        if isinstance(x, AVar):
            if x.rec is not self:
                raise TapeError("value belongs to a different recording")
            return x.i
        if isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool):
            return self.const(x)
        raise UnsupportedPrimitiveError(f"cannot record operand of type {type(x).__name__}")


def _unsupported(name):
    def method(self, *args):
        raise UnsupportedPrimitiveError(
            f"'{name}' on a recorded value is not supported: tape programs "
            "must not branch on or convert tape values"
        )

    return method


class AVar:
    """Handle to a value on an active recording."""

    __slots__ = ("rec", "i")

    def __init__(self, rec: _Recorder, i: int):
        self.rec = rec
        self.i = i

    def _bin(self, code, other, swap=False):
        rec = self.rec
        j = rec.index_of(other)
        if swap:
            return rec.emit(code, j, self.i)
        return rec.emit(code, self.i, j)

    def __add__(self, o):
        return self._bin(_r.ADD, o)

    def __radd__(self, o):
        return self._bin(_r.ADD, o, swap=True)

    def __sub__(self, o):
        return self._bin(_r.SUB, o)

    def __rsub__(self, o):
        return self._bin(_r.SUB, o, swap=True)

    def __mul__(self, o):
        return self._bin(_r.MUL, o)

    def __rmul__(self, o):
        return self._bin(_r.MUL, o, swap=True)

    def __truediv__(self, o):
        return self._bin(_r.DIV, o)

    def __rtruediv__(self, o):
        return self._bin(_r.DIV, o, swap=True)

    def __neg__(self):
        return self.rec.emit(_r.NEG, self.i)

    def __pos__(self):
        return self

    def __pow__(self, p):
        if isinstance(p, AVar):
            raise UnsupportedPrimitiveError("power with a recorded exponent")
        return self.rec.emit(_r.POWC, self.i, c=float(p))

    __rpow__ = _unsupported("rpow")
    __bool__ = _unsupported("bool")
    __float__ = _unsupported("float")
    __int__ = _unsupported("int")
    __index__ = _unsupported("index")
    __abs__ = _unsupported("abs")
    __lt__ = _unsupported("<")
    __le__ = _unsupported("<=")
    __gt__ = _unsupported(">")
    __ge__ = _unsupported(">=")
    __eq__ = _unsupported("==")
    __ne__ = _unsupported("!=")
    __mod__ = _unsupported("mod")
    __floordiv__ = _unsupported("floordiv")
    __round__ = _unsupported("round")
    __hash__ = None

    def __repr__(self):
        return f"AVar(#{self.i})"


def _unary(code: int, fn: Callable[[float], float], vec: Callable):
    def op(x):
        if isinstance(x, AVar):
            return x.rec.emit(code, x.i)
        if isinstance(x, np.ndarray):
            return vec(x)
        return fn(x)

    op.__name__ = OPNAMES[code]
    return op


exp = _unary(_r.EXP, math.exp, np.exp)
log = _unary(_r.LOG, math.log, np.log)
sqrt = _unary(_r.SQRT, math.sqrt, np.sqrt)
tanh = _unary(_r.TANH, math.tanh, np.tanh)
sin = _unary(_r.SIN, math.sin, np.sin)
cos = _unary(_r.COS, math.cos, np.cos)


def is_recorded(x) -> bool:
    return isinstance(x, AVar)


def total(xs):
    """Left-to-right sum; fixed accumulation order."""
    it = iter(xs)
    acc = next(it)
    for x in it:
        acc = acc + x
    return acc


def dot(ws, xs):
    it = zip(ws, xs)
    w, x = next(it)
    acc = w * x
    for w, x in it:
        acc = acc + w * x
    return acc


@dataclass(frozen=True)
class Tape:
    code: np.ndarray
    arg_a: np.ndarray
    arg_b: np.ndarray
    const: np.ndarray
    n_inputs: int
    n_params: int
    n_randoms: int
    input_nodes: np.ndarray
    param_nodes: np.ndarray
    random_nodes: np.ndarray
    output_nodes: np.ndarray

    def __post_init__(self):
        for name in ("code", "arg_a", "arg_b", "const", "input_nodes", "param_nodes", "random_nodes", "output_nodes"):
            getattr(self, name).flags.writeable = False

    @property
    def n_outputs(self) -> int:
        return len(self.output_nodes)

    @property
    def work_size(self) -> int:
        return len(self.code)

    def __len__(self):
        return len(self.code)

    def op_counts(self) -> dict[str, int]:
        ids, counts = np.unique(self.code, return_counts=True)
        return {OPNAMES[int(i)]: int(n) for i, n in zip(ids, counts)}

    def workspace(self) -> Workspace:
        return Workspace(self)


@dataclass
class Workspace:
    tape: Tape
    values: np.ndarray = field(init=False)
    adjoints: np.ndarray = field(init=False)
    outputs: np.ndarray = field(init=False)
    ready: bool = field(init=False, default=False)

    def __post_init__(self):
        n = self.tape.work_size
        self.values = np.zeros(n)
        self.adjoints = np.zeros(n)
        self.outputs = np.zeros(self.tape.n_outputs)


@dataclass
class AdjointResult:
    input_grads: np.ndarray
    param_grads: np.ndarray
    forward_value: np.ndarray
    random_grads: np.ndarray | None = None


def record(
    builder: Callable,
    n_inputs: int,
    n_params: int = 0,
    n_randoms: int = 0,
) -> Tape:
    """Record ``builder(inputs, params, randoms) -> outputs`` once.

    ``outputs`` may be a scalar or a sequence of scalars.
    """
    rec = _Recorder()
    ins = [rec.emit(_r.INPUT, k) for k in range(n_inputs)]
    prs = [rec.emit(_r.PARAM, k) for k in range(n_params)]
    rns = [rec.emit(_r.RANDOM, k) for k in range(n_randoms)]
    outs = builder(ins, prs, rns)
    if isinstance(outs, (AVar, int, float)):
        outs = [outs]
    outs = list(outs)
    if not outs:
        raise TapeError("builder produced zero outputs")
    out_nodes = []
    for k, o in enumerate(outs):
        src = rec.index_of(o)
        out_nodes.append(rec.emit(_r.OUTPUT, src, k).i)

    i32 = np.int32
    return Tape(
        code=np.asarray(rec.code, dtype=np.int8),
        arg_a=np.asarray(rec.a, dtype=i32),
        arg_b=np.asarray(rec.b, dtype=i32),
        const=np.asarray(rec.c, dtype=np.float64),
        n_inputs=n_inputs,
        n_params=n_params,
        n_randoms=n_randoms,
        input_nodes=np.asarray([v.i for v in ins], dtype=np.int64),
        param_nodes=np.asarray([v.i for v in prs], dtype=np.int64),
        random_nodes=np.asarray([v.i for v in rns], dtype=np.int64),
        output_nodes=np.asarray(out_nodes, dtype=np.int64),
    )


def _as_slots(x, n, what):
    arr = np.ascontiguousarray(np.asarray(x if x is not None else np.zeros(0), dtype=np.float64).ravel())
    if arr.shape[0] != n:
        raise SlotMismatchError(f"{what}: expected {n} values, got {arr.shape[0]}")
    return arr


def forward(tape: Tape, inputs, params=None, randoms=None, ws: Workspace | None = None) -> np.ndarray:
    """Replay the tape forward; returns a copy of the outputs."""
    if ws is None:
        ws = tape.workspace()
    elif ws.tape is not tape:
        raise TapeError("workspace belongs to a different tape")
    ins = _as_slots(inputs, tape.n_inputs, "inputs")
    prs = _as_slots(params, tape.n_params, "params")
    rns = _as_slots(randoms, tape.n_randoms, "randoms")
    _r.forward_loop(tape.code, tape.arg_a, tape.arg_b, tape.const, ins, prs, rns, ws.values, ws.outputs)
    ws.ready = True
    return ws.outputs.copy()


def reverse(tape: Tape, output_seeds, ws: Workspace) -> AdjointResult:
    """Adjoint sweep seeded by ``output_seeds`` over the last forward replay."""
    if ws.tape is not tape:
        raise TapeError("workspace belongs to a different tape")
    if not ws.ready:
        raise ReplayOrderError("reverse called before forward on this workspace")
    seeds = _as_slots(output_seeds, tape.n_outputs, "output_seeds")
    _r.reverse_loop(tape.code, tape.arg_a, tape.arg_b, tape.const, ws.values, ws.adjoints, seeds, tape.output_nodes)
    adj = ws.adjoints
    return AdjointResult(
        input_grads=adj[tape.input_nodes],
        param_grads=adj[tape.param_nodes],
        forward_value=ws.outputs.copy(),
        random_grads=adj[tape.random_nodes],
    )


def evaluate_plain(builder: Callable, inputs, params=(), randoms=()) -> np.ndarray:
    outs = builder(
        [float(v) for v in np.ravel(inputs)],
        [float(v) for v in np.ravel(params)],
        [float(v) for v in np.ravel(randoms)],
    )
    return np.atleast_1d(np.asarray(outs, dtype=np.float64))


def mirror_check(builder: Callable, inputs, params=(), randoms=(), tape: Tape | None = None) -> float:
    """Max relative disagreement between plain-float and tape evaluation."""
    inputs = np.ravel(np.asarray(inputs, dtype=float))
    params = np.ravel(np.asarray(params, dtype=float))
    randoms = np.ravel(np.asarray(randoms, dtype=float))
    plain = evaluate_plain(builder, inputs, params, randoms)
    if tape is None:
        tape = record(builder, len(inputs), len(params), len(randoms))
    taped = forward(tape, inputs, params, randoms)
    return float(np.max(np.abs(taped - plain) / np.maximum(np.abs(plain), 1.0)))


def dump(tape: Tape, path: str | Path) -> int:
    """Write the tape as a versioned little-endian binary file; returns bytes written."""
    header = struct.pack(
        "<4sIqiiii",
        DUMP_MAGIC,
        DUMP_VERSION,
        len(tape),
        tape.n_inputs,
        tape.n_params,
        tape.n_randoms,
        tape.n_outputs,
    )
    recs = np.empty(
        len(tape),
        dtype=np.dtype([("code", "<i1"), ("a", "<i4"), ("b", "<i4"), ("c", "<f8")]),
    )
    recs["code"] = tape.code
    recs["a"] = tape.arg_a
    recs["b"] = tape.arg_b
    recs["c"] = tape.const
    body = recs.tobytes()
    Path(path).write_bytes(header + body)
    return len(header) + len(body)


def load(path: str | Path) -> Tape:
    raw = Path(path).read_bytes()
    hsize = struct.calcsize("<4sIqiiii")
    magic, version, n, ni, np_, nr, no = struct.unpack("<4sIqiiii", raw[:hsize])
    if magic != DUMP_MAGIC:
        raise TapeError("not a tape dump (bad magic)")
    if version != DUMP_VERSION:
        raise TapeError(f"unsupported tape dump version {version}")
    recs = np.frombuffer(
        raw[hsize:],
        dtype=np.dtype([("code", "<i1"), ("a", "<i4"), ("b", "<i4"), ("c", "<f8")]),
        count=n,
    )
    code = recs["code"].astype(np.int8)
    a = recs["a"].astype(np.int32)

    def nodes(op):
        idx = np.nonzero(code == op)[0]
        return idx[np.argsort(a[idx], kind="stable")] if op != _r.OUTPUT else idx[np.argsort(recs["b"][idx])]

    return Tape(
        code=code,
        arg_a=a,
        arg_b=recs["b"].astype(np.int32),
        const=recs["c"].astype(np.float64),
        n_inputs=ni,
        n_params=np_,
        n_randoms=nr,
        input_nodes=nodes(_r.INPUT).astype(np.int64),
        param_nodes=nodes(_r.PARAM).astype(np.int64),
        random_nodes=nodes(_r.RANDOM).astype(np.int64),
        output_nodes=nodes(_r.OUTPUT).astype(np.int64),
    )


def gradient(tape: Tape, inputs, params, randoms, ws: Workspace | None = None, output: int = 0):
    """Forward + one reverse seeded on a single output. Returns (value, AdjointResult)."""
    if ws is None:
        ws = tape.workspace()
    out = forward(tape, inputs, params, randoms, ws)
    seeds = np.zeros(tape.n_outputs)
    seeds[output] = 1.0
    return out[output], reverse(tape, seeds, ws)


def jacobian(tape: Tape, inputs, params, randoms, rows: Sequence[int], ws: Workspace | None = None):
    """One forward, then one reverse per requested output row."""
    if ws is None:
        ws = tape.workspace()
    out = forward(tape, inputs, params, randoms, ws)
    jin = np.empty((len(rows), tape.n_inputs))
    jpar = np.empty((len(rows), tape.n_params))
    seeds = np.zeros(tape.n_outputs)
    for r, k in enumerate(rows):
        seeds[:] = 0.0
        seeds[k] = 1.0
        res = reverse(tape, seeds, ws)
        jin[r] = res.input_grads
        jpar[r] = res.param_grads
    return out, jin, jpar
