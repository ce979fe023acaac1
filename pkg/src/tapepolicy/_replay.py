"""Compiled interpreter loops for tape replay.

Op records are stored struct-of-arrays: ``code[i]``, ``arg_a[i]``, ``arg_b[i]``,
``const[i]``. Every op writes exactly one value at index ``i`` of the
workspace, so the work size equals the op count.
"""

import numpy as np
from numba import njit

# opcodes; keep in sync with tape.OPCODES
CONST = 0
INPUT = 1
PARAM = 2
RANDOM = 3
OUTPUT = 4
ADD = 5
SUB = 6
MUL = 7
DIV = 8
NEG = 9
EXP = 10
LOG = 11
SQRT = 12
TANH = 13
POWC = 14
SIN = 15
COS = 16


@njit(cache=True, nogil=True)
def forward_loop(code, arg_a, arg_b, const, inputs, params, randoms, values, outputs):
    n = code.shape[0]
    for i in range(n):
        op = code[i]
        if op == MUL:
            values[i] = values[arg_a[i]] * values[arg_b[i]]
        elif op == ADD:
            values[i] = values[arg_a[i]] + values[arg_b[i]]
        elif op == SUB:
            values[i] = values[arg_a[i]] - values[arg_b[i]]
        elif op == DIV:
            values[i] = values[arg_a[i]] / values[arg_b[i]]
        elif op == CONST:
            values[i] = const[i]
        elif op == SQRT:
            values[i] = np.sqrt(values[arg_a[i]])
        elif op == TANH:
            values[i] = np.tanh(values[arg_a[i]])
        elif op == NEG:
            values[i] = -values[arg_a[i]]
        elif op == EXP:
            values[i] = np.exp(values[arg_a[i]])
        elif op == LOG:
            values[i] = np.log(values[arg_a[i]])
        elif op == POWC:
            values[i] = values[arg_a[i]] ** const[i]
        elif op == SIN:
            values[i] = np.sin(values[arg_a[i]])
        elif op == COS:
            values[i] = np.cos(values[arg_a[i]])
        elif op == RANDOM:
            values[i] = randoms[arg_a[i]]
        elif op == PARAM:
            values[i] = params[arg_a[i]]
        elif op == INPUT:
            values[i] = inputs[arg_a[i]]
        elif op == OUTPUT:
            v = values[arg_a[i]]
            values[i] = v
            outputs[arg_b[i]] = v


@njit(cache=True, nogil=True)
def reverse_loop(code, arg_a, arg_b, const, values, adjoints, seeds, output_nodes):
    n = code.shape[0]
    adjoints[:] = 0.0
    for k in range(output_nodes.shape[0]):
        adjoints[output_nodes[k]] += seeds[k]
    for i in range(n - 1, -1, -1):
        g = adjoints[i]
        if g == 0.0:
            continue
        op = code[i]
        if op == MUL:
            a = arg_a[i]
            b = arg_b[i]
            adjoints[a] += g * values[b]
            adjoints[b] += g * values[a]
        elif op == ADD:
            adjoints[arg_a[i]] += g
            adjoints[arg_b[i]] += g
        elif op == SUB:
            adjoints[arg_a[i]] += g
            adjoints[arg_b[i]] -= g
        elif op == DIV:
            b = arg_b[i]
            inv = 1.0 / values[b]
            adjoints[arg_a[i]] += g * inv
            adjoints[b] -= g * values[i] * inv
        elif op == SQRT:
            adjoints[arg_a[i]] += g * 0.5 / values[i]
        elif op == TANH:
            y = values[i]
            adjoints[arg_a[i]] += g * (1.0 - y * y)
        elif op == NEG:
            adjoints[arg_a[i]] -= g
        elif op == EXP:
            adjoints[arg_a[i]] += g * values[i]
        elif op == LOG:
            adjoints[arg_a[i]] += g / values[arg_a[i]]
        elif op == POWC:
            a = arg_a[i]
            c = const[i]
            adjoints[a] += g * c * values[a] ** (c - 1.0)
        elif op == SIN:
            adjoints[arg_a[i]] += g * np.cos(values[arg_a[i]])
        elif op == COS:
            adjoints[arg_a[i]] -= g * np.sin(values[arg_a[i]])
        elif op == OUTPUT:
            adjoints[arg_a[i]] += g
        # CONST / INPUT / PARAM / RANDOM are leaves
