"""Text formats for problems and solutions, and ASCII PLY export.

Problem file::

    ROTPOSE-PROBLEM 1
    n_cams <int>
    n_pts <int>
    eta <float>
    observations <count>
    obs <cam> <pt> <m_x> <m_y>
    ...
    priors <count>
    prior <k> <l> <9 x R~ row-major> <81 x sqrt(W) row-major>
    ...
    end

Solution file::

    ROTPOSE-SOLUTION 1
    n_cams <int>
    n_pts <int>
    cam <i> <9 x A row-major> <3 x t>
    ...
    pt <j> <x> <y> <z>
    ...
    end

Floats are written with ``repr`` (shortest string that round-trips), so
save -> load -> save reproduces the file byte for byte.  The sqrt(W)
entries use the package-wide column-major ``vec`` convention.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np

from .errors import ParseError, SingularCameraWarning, VersionMismatch
from .objective import ObjectiveConfig, Problem, RotationPrior, Variables

log = logging.getLogger(__name__)

PROBLEM_MAGIC = "ROTPOSE-PROBLEM"
SOLUTION_MAGIC = "ROTPOSE-SOLUTION"
VERSION = 1


def _fmt(x):
    return repr(float(x))


def _fmts(xs):
    return " ".join(_fmt(x) for x in np.asarray(xs, float).ravel())


def dumps_problem(prob):
    out = [
        f"{PROBLEM_MAGIC} {VERSION}",
        f"n_cams {prob.n_cams}",
        f"n_pts {prob.n_pts}",
        f"eta {_fmt(prob.config.eta)}",
        f"observations {prob.n_obs}",
    ]
    for i, j, m in zip(prob.obs_cam, prob.obs_pt, prob.obs_m):
        out.append(f"obs {int(i)} {int(j)} {_fmt(m[0])} {_fmt(m[1])}")
    out.append(f"priors {len(prob.priors)}")
    for p in prob.priors:
        out.append(f"prior {p.k} {p.l} {_fmts(p.r_tilde)} {_fmts(p.w_sqrt)}")
    out.append("end")
    return "\n".join(out) + "\n"


def save_problem(prob, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_problem(prob))


class _Reader:
    def __init__(self, text):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, record=None):
        if self.pos >= len(self.lines):
            raise ParseError("unexpected end of file", line=self.pos + 1, record=record)
        self.pos += 1
        return self.pos, self.lines[self.pos - 1].split()

    def header(self, magic):
        lineno, tok = self.next()
        if len(tok) != 2 or tok[0] != magic:
            raise ParseError(f"expected '{magic} <version>'", line=lineno)
        try:
            version = int(tok[1])
        except ValueError:
            raise ParseError("version is not an integer", line=lineno) from None
        if version != VERSION:
            raise VersionMismatch(f"unsupported version {version}", line=lineno)

    def keyed(self, key, conv=int):
        lineno, tok = self.next()
        if len(tok) != 2 or tok[0] != key:
            raise ParseError(f"expected '{key} <value>'", line=lineno)
        try:
            return conv(tok[1])
        except ValueError:
            raise ParseError(f"bad value for {key}", line=lineno) from None

    def record(self, key, nfields, index):
        lineno, tok = self.next(record=index)
        if not tok or tok[0] != key:
            raise ParseError(f"expected '{key}' record", line=lineno, record=index)
        if len(tok) != nfields + 1:
            raise ParseError(
                f"'{key}' record has {len(tok) - 1} fields, expected {nfields}",
                line=lineno, record=index,
            )
        return lineno, tok[1:]

    def end(self):
        lineno, tok = self.next()
        if tok != ["end"]:
            raise ParseError("expected 'end'", line=lineno)
        if self.pos != len(self.lines):
            raise ParseError("trailing content after 'end'", line=self.pos + 1)


def _ints_floats(fields, n_int, lineno, index):
    try:
        ints = [int(x) for x in fields[:n_int]]
        floats = np.array([float(x) for x in fields[n_int:]])
    except ValueError as exc:
        raise ParseError(f"malformed number: {exc}", line=lineno, record=index) from None
    return ints, floats


def loads_problem(text):
    rd = _Reader(text)
    rd.header(PROBLEM_MAGIC)
    n_cams = rd.keyed("n_cams")
    n_pts = rd.keyed("n_pts")
    eta = rd.keyed("eta", float)
    n_obs = rd.keyed("observations")
    cams = np.empty(n_obs, dtype=np.int64)
    pts = np.empty(n_obs, dtype=np.int64)
    ms = np.empty((n_obs, 2))
    for k in range(n_obs):
        lineno, fields = rd.record("obs", 4, k)
        (i, j), m = _ints_floats(fields, 2, lineno, k)
        cams[k], pts[k], ms[k] = i, j, m
    n_pri = rd.keyed("priors")
    priors = []
    for k in range(n_pri):
        lineno, fields = rd.record("prior", 2 + 9 + 81, k)
        (a, b), vals = _ints_floats(fields, 2, lineno, k)
        try:
            priors.append(RotationPrior(a, b, vals[:9].reshape(3, 3), vals[9:].reshape(9, 9)))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno, record=k) from None
    rd.end()
    try:
        config = ObjectiveConfig(eta=eta)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return Problem(n_cams, n_pts, cams, pts, ms, priors, config)


def load_problem(path):
    with open(path, encoding="ascii") as fh:
        return loads_problem(fh.read())


def dumps_solution(vars):
    f, n = len(vars.b), len(vars.c)
    out = [f"{SOLUTION_MAGIC} {VERSION}", f"n_cams {f}", f"n_pts {n}"]
    for i in range(f):
        out.append(f"cam {i} {_fmts(vars.b[i])} {_fmts(vars.t[i])}")
    for j in range(n):
        out.append(f"pt {j} {_fmts(vars.c[j])}")
    out.append("end")
    return "\n".join(out) + "\n"


def save_solution(vars, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_solution(vars))


def loads_solution(text):
    rd = _Reader(text)
    rd.header(SOLUTION_MAGIC)
    f = rd.keyed("n_cams")
    n = rd.keyed("n_pts")
    b = np.empty((f, 3, 3))
    t = np.empty((f, 3))
    c = np.empty((n, 3))
    for k in range(f):
        lineno, fields = rd.record("cam", 13, k)
        (i,), vals = _ints_floats(fields, 1, lineno, k)
        if i != k:
            raise ParseError(f"camera index {i} out of order", line=lineno, record=k)
        b[k] = vals[:9].reshape(3, 3)
        t[k] = vals[9:]
    for k in range(n):
        lineno, fields = rd.record("pt", 4, k)
        (j,), vals = _ints_floats(fields, 1, lineno, k)
        if j != k:
            raise ParseError(f"point index {j} out of order", line=lineno, record=k)
        c[k] = vals
    rd.end()
    return Variables(b, t, c)


def load_solution(path):
    with open(path, encoding="ascii") as fh:
        return loads_solution(fh.read())


def export_ply(vars, path):
    """ASCII PLY of points and camera centres; ``is_camera`` flags the latter.

    Cameras with a singular block are omitted with a warning.
    """
    verts = [(p, 0) for p in np.asarray(vars.c, float)]
    skipped = 0
    for a, t in zip(vars.b, vars.t):
        if abs(np.linalg.det(a)) <= 1e-10:
            skipped += 1
            continue
        verts.append((-np.linalg.solve(a, t), 1))
    if skipped:
        warnings.warn(
            f"{skipped} camera(s) with singular blocks omitted", SingularCameraWarning, stacklevel=2
        )
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar is_camera",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, flag in verts:
        color = "255 0 0" if flag else "200 200 200"
        lines.append(f"{_fmts(p)} {flag} {color}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(verts)
