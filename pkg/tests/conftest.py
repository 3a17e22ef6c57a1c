import numpy as np
import pytest

from regimenrl import cohort as co
from regimenrl import preprocess as pp


def make_record(pid="P1", days=(0, 30, 60), a1c=(8.0, 7.5, 7.2), sbp=(150.0, 145.0, 140.0),
                rx=(("BIG",), ("BIG", "ACE"), ()), flags=(True, True, False), age=55.0, sex="female",
                race="white", smoker=False):
    encs = []
    for d, a, s, r, f in zip(days, a1c, sbp, rx, flags):
        panel = co.BiomarkerPanel(sbp=s, dbp=None if s is None else s - 60.0, bmi=31.0, weight=85.0, a1c=a,
                                  tc=190.0, ldl=110.0, hdl=50.0, triglycerides=150.0, creatinine=0.9)
        encs.append(co.Encounter(d, panel, r, f))
    return co.PatientRecord(pid, co.Demographics(age, sex, race, smoker), tuple(encs))


@pytest.fixture(scope="session")
def small_synth():
    cfg = co.SynthConfig(n_patients=60, mean_encounters_per_patient=8, seed=11, observation_noise=0.5)
    return co.generate_synthetic_cohort(cfg)


@pytest.fixture(scope="session")
def small_prepared(small_synth):
    cohort, _ = small_synth
    cohort = pp.impute_cohort(co.phenotype_t2dm(cohort))
    vocab = pp.build_action_vocab(cohort, "glycemia", min_count=2)
    ts, stats, params = pp.build_transitions(cohort, "glycemia", vocab)
    return cohort, vocab, ts, stats, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (verdict, detail), filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{n:2d}] {verdict}  {detail}")
