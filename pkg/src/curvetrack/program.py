"""Motion programs: MoveL / MoveC / MoveJ primitives and their text format.

Grammar (one statement per line, ``#`` starts a comment)::

    Start q1 q2 q3 q4 q5 q6
    MoveL x y z bx by bz v<speed> z<zone>
    MoveC vx vy vz vbx vby vbz x y z bx by bz v<speed> z<zone>
    MoveJ q1 q2 q3 q4 q5 q6 v<fraction> z<zone>

Positions are mm, angle-product orientations and joints rad, speeds mm/s
(MoveL/MoveC) or a fraction of the joint speed limits (MoveJ), zones mm.
``Start`` gives the initial joint configuration and must come first.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Pose

MOVEL, MOVEC, MOVEJ = "MoveL", "MoveC", "MoveJ"
KINDS = (MOVEL, MOVEC, MOVEJ)


class ProgramError(ValueError):
    def __init__(self, msg, line=None, col=None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if col is not None:
                where += f", token {col}"
            where += ": "
        super().__init__(where + msg)
        self.line = line
        self.col = col


@dataclass
class Primitive:
    kind: str
    target: object  # Pose for MoveL/MoveC, joint vector for MoveJ
    speed: float
    zone: float = 0.0
    via: Pose | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProgramError(f"unknown primitive {self.kind!r}")
        if not self.speed > 0:
            raise ProgramError("speed must be positive")
        if self.zone < 0:
            raise ProgramError("zone must be non-negative")
        if self.kind == MOVEC and self.via is None:
            raise ProgramError("MoveC needs a via pose")
        if self.kind == MOVEJ:
            self.target = np.asarray(self.target, dtype=float)

    @property
    def is_joint(self) -> bool:
        return self.kind == MOVEJ


@dataclass
class MotionProgram:
    start: np.ndarray
    primitives: list
    lead_in: Primitive | None = None
    lead_out: Primitive | None = None
    sample_rate: float = 250.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        if not self.primitives:
            raise ProgramError("no primitives")

    @property
    def extended(self) -> bool:
        return self.lead_in is not None and self.lead_out is not None

    def copy(self) -> "MotionProgram":
        return copy.deepcopy(self)

    def with_speed(self, speed, joint_fraction=None) -> "MotionProgram":
        """Copy with every Cartesian primitive at ``speed`` (leads dropped)."""
        prims = []
        for p in self.primitives:
            q = copy.deepcopy(p)
            if q.kind == MOVEJ:
                if joint_fraction is not None:
                    q.speed = joint_fraction
            else:
                q.speed = float(speed)
            prims.append(q)
        return MotionProgram(self.start.copy(), prims, sample_rate=self.sample_rate, meta=dict(self.meta))

    def with_zone(self, zone) -> "MotionProgram":
        prims = [copy.deepcopy(p) for p in self.primitives]
        for p in prims:
            p.zone = float(zone)
        return MotionProgram(self.start.copy(), prims, sample_rate=self.sample_rate, meta=dict(self.meta))

    def all_primitives(self):
        out = list(self.primitives)
        if self.lead_in is not None:
            out.insert(0, self.lead_in)
        if self.lead_out is not None:
            out.append(self.lead_out)
        return out


def _fmt(x) -> str:
    s = "%.12g" % float(x)
    return "0" if s == "-0" else s


def _fmt_vec(v):
    return " ".join(_fmt(x) for x in v)


def format_primitive(p: Primitive) -> str:
    tail = f"v{_fmt(p.speed)} z{_fmt(p.zone)}"
    if p.kind == MOVEL:
        return f"MoveL {_fmt_vec(p.target.p)} {_fmt_vec(p.target.beta)} {tail}"
    if p.kind == MOVEC:
        return (f"MoveC {_fmt_vec(p.via.p)} {_fmt_vec(p.via.beta)} "
                f"{_fmt_vec(p.target.p)} {_fmt_vec(p.target.beta)} {tail}")
    return f"MoveJ {_fmt_vec(p.target)} {tail}"


def print_program(program: MotionProgram, header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    lines.append(f"Start {_fmt_vec(program.start)}")
    lines.extend(format_primitive(p) for p in program.primitives)
    return "\n".join(lines) + "\n"


def _floats(tokens, lineno, first_col):
    out = []
    for i, t in enumerate(tokens):
        try:
            out.append(float(t))
        except ValueError:
            raise ProgramError(f"expected a number, got {t!r}", lineno, first_col + i) from None
    return out


def _param(tok, prefix, lineno, col, what):
    if not tok.startswith(prefix):
        raise ProgramError(f"expected {what} '{prefix}<value>', got {tok!r}", lineno, col)
    try:
        return float(tok[len(prefix):])
    except ValueError:
        raise ProgramError(f"malformed {what} {tok!r}", lineno, col) from None


def parse_program(text: str, sample_rate=250.0) -> MotionProgram:
    start = None
    prims = []
    arity = {MOVEL: 6, MOVEC: 12, MOVEJ: 6}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        op = toks[0]
        if op == "Start":
            if start is not None or prims:
                raise ProgramError("Start must appear once, before any motion", lineno, 1)
            if len(toks) != 7:
                raise ProgramError(f"Start takes 6 joint values, got {len(toks) - 1}", lineno, len(toks))
            start = np.array(_floats(toks[1:], lineno, 2))
            continue
        if op not in arity:
            raise ProgramError(f"unknown opcode {op!r}", lineno, 1)
        n = arity[op]
        if len(toks) != n + 3:
            raise ProgramError(f"{op} takes {n} values plus speed and zone, got {len(toks) - 1} tokens",
                               lineno, min(len(toks), n + 3))
        vals = _floats(toks[1 : n + 1], lineno, 2)
        speed = _param(toks[n + 1], "v", lineno, n + 2, "speed")
        zone = _param(toks[n + 2], "z", lineno, n + 3, "zone")
        if not speed > 0:
            raise ProgramError("speed must be positive", lineno, n + 2)
        if zone < 0:
            raise ProgramError("zone must be non-negative", lineno, n + 3)
        if op == MOVEL:
            prims.append(Primitive(MOVEL, Pose(np.array(vals[:3]), np.array(vals[3:])), speed, zone))
        elif op == MOVEC:
            via = Pose(np.array(vals[:3]), np.array(vals[3:6]))
            prims.append(Primitive(MOVEC, Pose(np.array(vals[6:9]), np.array(vals[9:])), speed, zone, via))
        else:
            prims.append(Primitive(MOVEJ, np.array(vals), speed, zone))
    if not prims:
        raise ProgramError("no primitives")
    if start is None:
        raise ProgramError("missing Start line")
    return MotionProgram(start, prims, sample_rate=sample_rate)
