"""Plain-text complex array format for replaying channels and beams.

A file holds one or more named arrays::

    array H_hat 3 3 2 2
    0.123 -0.5 1.0 0.25
    ...

The header line gives the name followed by the shape.  It is followed by
``prod(shape[:-1])`` rows in C order, each with ``shape[-1]`` pairs of
"re im" written with 17 significant digits so values round-trip exactly.
Blank lines and lines starting with ``#`` are ignored.
"""

import numpy as np

from .channel import BeamSet, ChannelEstimateSet


def _fmt(x):
    return f"{x:.17g}"


def dumps(arrays):
    lines = ["# complex arrays: header 'array NAME dims...', rows of 're im' pairs"]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=complex)
        if a.ndim == 0:
            a = a.reshape(1)
        lines.append("array " + name + " " + " ".join(map(str, a.shape)))
        for row in a.reshape(-1, a.shape[-1]):
            lines.append(" ".join(f"{_fmt(z.real)} {_fmt(z.imag)}" for z in row))
    return "\n".join(lines) + "\n"


def loads(text):
    out = {}
    rows = [ln.strip() for ln in text.splitlines()]
    rows = [ln for ln in rows if ln and not ln.startswith("#")]
    pos = 0
    while pos < len(rows):
        head = rows[pos].split()
        if len(head) < 3 or head[0] != "array":
            raise ValueError(f"bad header: {rows[pos]!r}")
        name, shape = head[1], tuple(int(s) for s in head[2:])
        n_rows = int(np.prod(shape[:-1]))
        vals = []
        for ln in rows[pos + 1:pos + 1 + n_rows]:
            nums = [float(t) for t in ln.split()]
            if len(nums) != 2 * shape[-1]:
                raise ValueError(f"array {name}: row has {len(nums)} numbers")
            vals.extend(complex(r, i) for r, i in zip(nums[0::2], nums[1::2]))
        if len(vals) != int(np.prod(shape)):
            raise ValueError(f"array {name}: truncated data")
        out[name] = np.array(vals, dtype=complex).reshape(shape)
        pos += 1 + n_rows
    return out


def save(path, **arrays):
    with open(path, "w") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path) as fh:
        return loads(fh.read())


def save_channels(path, est):
    save(path, H_hat=est.H_hat)


def load_channels(path):
    return ChannelEstimateSet(load(path)["H_hat"])


def save_beams(path, beams):
    save(path, V=beams.V, U=beams.U)


def load_beams(path):
    data = load(path)
    return BeamSet(data["V"], data.get("U"))
