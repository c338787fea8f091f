"""Fast, accurate robot curve tracking with optimised motion primitives.

Stages: redundancy resolution (curve placement, arm branch, tool roll),
greedy primitive fitting, execution on a virtual controller, and
post-execution waypoint adjustment.
"""
from .curves import Curve, CurvePose, gen_curve1, gen_curve2_analogue, load_csv, save_csv
from .kinematics import Pose, RobotModel, load_model
from .program import MotionProgram, Primitive, parse_program, print_program

__version__ = "0.1.0"

__all__ = [
    "Curve", "CurvePose", "gen_curve1", "gen_curve2_analogue", "load_csv", "save_csv",
    "Pose", "RobotModel", "load_model", "MotionProgram", "Primitive", "parse_program", "print_program",
]
