import copy

import pytest

CA = "/C=CH/O=CERN/CN=CERN CA"
ATLAS_PROD = "/O=Grid/O=CERN/CN=atlas prod"
JDL = 'Executable = "/bin/sh";\nRequirements = other.FreeCPUs >= 0;\n'

_MINIMAL = {
    "seed": 1,
    "duration_h": 2,
    "cas": [CA],
    "vos": [{"name": "atlas", "members": [ATLAS_PROD]}],
    "pools": {"atlas": 10},
    "sites": [{"name": "CERN", "ces": [{"ce_id": "ce1", "worker_nodes": 2}]}],
    "rbs": [{"rb_id": "rb1"}],
}


@pytest.fixture
def minimal_doc():
    return copy.deepcopy(_MINIMAL)
