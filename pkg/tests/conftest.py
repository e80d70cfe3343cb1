import math

import pytest

from privtraffic.detectors import SensorConfig
from privtraffic.dynamics import reference_diagram
from privtraffic.zones import ZoneParams


@pytest.fixture
def fd():
    return reference_diagram()


@pytest.fixture
def sensor_cfg():
    return SensorConfig.from_field_units(30.0, 20.0)


@pytest.fixture
def zp():
    return ZoneParams.from_feet(20.0, 0.51, 0.25)


LN2 = math.log(2)
LN4 = math.log(4)
