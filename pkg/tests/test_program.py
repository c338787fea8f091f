import numpy as np
import pytest

from curvetrack.kinematics import Pose
from curvetrack.program import MOVEC, MOVEJ, MOVEL, MotionProgram, Primitive, ProgramError, parse_program, print_program


def three_primitive_program():
    return MotionProgram(
        np.array([0.1, 0.2, -0.3, 0.0, 0.7, 0.05]),
        [
            Primitive(MOVEL, Pose(np.array([1800.0, 0.5, 900.25]), np.array([0.0, 3.0, 0.1])), 250.0, 5.0),
            Primitive(MOVEC, Pose(np.array([1810.0, 20.0, 905.0]), np.array([0.0, 3.0, 0.0])), 250.0, 0.0,
                      via=Pose(np.array([1805.0, 10.0, 903.0]), np.array([0.01, 3.0, 0.05]))),
            Primitive(MOVEJ, np.array([0.2, 0.1, -0.2, 0.1, 0.6, 0.0]), 0.5, 10.0),
        ],
    )


def test_round_trip_is_byte_identical():
    text = print_program(three_primitive_program())
    again = print_program(parse_program(text))
    assert again == text
    assert text.splitlines()[1].startswith("MoveL 1800 0.5 900.25")


def test_parse_values_and_comments():
    text = "# header\nStart 0 0 0 0 0.5 0\n\nMoveL 1 2 3 0 0 0 v100 z2  # trailing\n"
    prog = parse_program(text)
    assert len(prog.primitives) == 1
    p = prog.primitives[0]
    assert p.kind == MOVEL and p.speed == 100.0 and p.zone == 2.0
    assert np.array_equal(p.target.p, [1.0, 2.0, 3.0])


def test_empty_text_has_no_primitives():
    with pytest.raises(ProgramError, match="no primitives"):
        parse_program("")
    with pytest.raises(ProgramError, match="no primitives"):
        parse_program("# only a comment\nStart 0 0 0 0 0 0\n")


def test_negative_speed_rejected():
    with pytest.raises(ProgramError, match="speed must be positive") as err:
        parse_program("Start 0 0 0 0 0 0\nMoveL 1 2 3 0 0 0 v-5 z0\n")
    assert err.value.line == 2 and err.value.col == 8


def test_unknown_opcode_named():
    with pytest.raises(ProgramError, match="MoveX") as err:
        parse_program("Start 0 0 0 0 0 0\nMoveX 1 2 3 0 0 0 v5 z0\n")
    assert err.value.line == 2


@pytest.mark.parametrize("line,col", [
    ("MoveL 1 2 x 0 0 0 v5 z0", 4),
    ("MoveL 1 2 3 0 0 0 5 z0", 8),
    ("MoveL 1 2 3 0 0 0 v5 zz", 9),
    ("MoveL 1 2 3 0 0 v5 z0", 8),
])
def test_malformed_line_reports_position(line, col):
    with pytest.raises(ProgramError) as err:
        parse_program("Start 0 0 0 0 0 0\n" + line + "\n")
    assert err.value.line == 2 and err.value.col == col


def test_negative_zone_rejected():
    with pytest.raises(ProgramError, match="zone"):
        parse_program("Start 0 0 0 0 0 0\nMoveJ 0 0 0 0 0 0 v0.5 z-1\n")


def test_start_must_come_first():
    with pytest.raises(ProgramError, match="Start"):
        parse_program("MoveJ 0 0 0 0 0 0 v0.5 z0\nStart 0 0 0 0 0 0\n")


def test_with_speed_keeps_joint_fraction():
    prog = three_primitive_program().with_speed(900.0)
    assert [p.speed for p in prog.primitives] == [900.0, 900.0, 0.5]
