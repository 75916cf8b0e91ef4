"""Class ids shared by label maps, models and reports."""

from enum import IntEnum


class PrimitiveClass(IntEnum):
    """Per-pixel ground-truth class.

    ``INVALID`` marks zero-depth pixels. The four primitive classes come first
    so that ``PLANE..CONE`` index report columns in a fixed order.
    """

    INVALID = 0
    PLANE = 1
    SPHERE = 2
    CYLINDER = 3
    CONE = 4
    OTHER = 5


PRIMITIVE_CLASSES = (
    PrimitiveClass.PLANE,
    PrimitiveClass.SPHERE,
    PrimitiveClass.CYLINDER,
    PrimitiveClass.CONE,
)

SHORT_NAMES = {
    PrimitiveClass.PLANE: "PLN",
    PrimitiveClass.SPHERE: "SPH",
    PrimitiveClass.CYLINDER: "CYL",
    PrimitiveClass.CONE: "CON",
}
