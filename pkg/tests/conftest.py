import numpy as np
import pytest

from faircap.cohort import PatientRecord


def make_patient(**overrides) -> PatientRecord:
    """A valid patient with sane mid-range values; override what matters."""
    fields = dict(
        id="p000001",
        age=65,
        sex="male",
        race="white",
        gcs=8,
        apache_iii=29,
        sofa_24h=4,
        charlson=5,
        spo2_min=87.0,
        heart_rate=88.0,
        resp_rate=19.3,
        map_mean=84.8,
        creatinine_max=3.2,
        lactate_max=1.9,
        troponin_max=0.8,
        platelet_min=167.7,
        bilirubin_max=1.9,
        wbc_max=17.2,
        urine_24h=1680.8,
        mech_vent=False,
        code_status=False,
        died_in_hospital=False,
    )
    fields.update(overrides)
    return PatientRecord(**fields)


@pytest.fixture
def patient():
    return make_patient()


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
