import logging

import pytest
from hypothesis import settings

from maintsched.domain import Dataset, FirmwareType, HardwareDescriptor, JobRecord
from maintsched.workload import WorkloadSpec, generate

settings.register_profile("default", deadline=None)
settings.load_profile("default")
logging.getLogger("maintsched").setLevel(logging.ERROR)


def make_record(job_id="j0", firmware=FirmwareType.BIOS, duration=100.0, day=0.0, server="u000-s00000",
                priority=0, server_type="T1", region="east", cores=16, current="v1", target="v2"):
    hw = HardwareDescriptor(server_type, cores, 64.0, 500.0, 0.0, region, 30.0)
    return JobRecord(job_id, firmware, current, target, hw, priority, duration, day, server)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture(scope="session")
def small_workload() -> Dataset:
    spec = WorkloadSpec(n_servers=120, n_jobs=2400, n_days=42, servers_per_unit=10, seed=3)
    return generate(spec)
