"""Fixed label orders shared by the simulator, the encoders and the models."""

from __future__ import annotations

import enum


class Tag(enum.IntEnum):
    """Transition-log location tags. Index order is part of the data contract."""

    OFFICE = 0
    LAB = 1
    STORAGE = 2
    MAINTENANCE = 3
    ENTRY = 4
    END = 5


class UserClass(enum.IntEnum):
    FACILITY_MANAGER = 0
    RAD_WORKER = 1
    INVESTIGATOR = 2
    FACILITY_USER = 3


N_TAGS = len(Tag)
N_CLASSES = len(UserClass)
WORK_TAGS = (Tag.OFFICE, Tag.LAB, Tag.STORAGE, Tag.MAINTENANCE)
