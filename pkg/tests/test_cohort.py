import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regimenrl import cohort as co
from regimenrl.errors import CohortParseError, CohortValidationError, ConfigError

from conftest import make_record


def test_code_tables_partition_subclasses():
    assert len(co.SUBCLASS_CODES) == 24
    assert len(set(co.SUBCLASS_CODES)) == 24
    assert (len(co.ANTIHYPERGLYCEMIC), len(co.ANTIHYPERTENSIVE), len(co.ANTIHYPERLIPIDEMIC)) == (9, 10, 5)


def test_canonical_regimen_orders_and_dedups():
    assert co.canonical_regimen(["HMG", "BIG", "ACE", "BIG"]) == ("BIG", "ACE", "HMG")
    with pytest.raises(ValueError):
        co.canonical_regimen(["ASPIRIN"])


def test_restrict_regimen_by_target():
    rx = ("BIG", "GLP1", "ACE", "HMG")
    assert co.restrict_regimen(rx, "glycemia") == ("GLP1", "BIG")
    assert co.restrict_regimen(rx, "bp") == ("ACE",)
    assert co.restrict_regimen(rx, "cvd") == ("HMG",)
    assert co.restrict_regimen(rx, "multimorbidity") == co.canonical_regimen(rx)


def test_record_validation_rejects_bad_invariants():
    make_record().validate()
    with pytest.raises(CohortValidationError, match="P1"):
        make_record(days=(0, 30, 30)).validate()
    with pytest.raises(CohortValidationError):
        make_record(age=12.0).validate()
    bad = make_record(sbp=(150.0, 145.0, 140.0))
    enc = bad.encounters[0]
    panel = co.BiomarkerPanel(sbp=80.0, dbp=90.0)
    broken = co.PatientRecord("X", bad.demographics, (co.Encounter(0, panel),))
    with pytest.raises(CohortValidationError, match="exceed"):
        broken.validate()
    assert enc.prescriptions == ("BIG",)


class TestPhenotype:
    def test_two_coded_encounters(self):
        assert co.phenotype_t2dm([make_record(rx=((), (), ()), flags=(True, True, False))])

    def test_a1c_plus_one_code(self):
        r = make_record(a1c=(7.0, 6.6, 5.0), rx=((), (), ()), flags=(True, False, False))
        assert co.phenotype_t2dm([r])

    def test_a1c_without_code_is_not_enough(self):
        r = make_record(a1c=(7.0, 6.6, 9.0), rx=((), (), ()), flags=(False, False, False))
        assert not co.phenotype_t2dm([r])

    def test_metformin_alone_does_not_qualify(self):
        r = make_record(a1c=(5.0, 5.0, 5.0), rx=(("BIG",), ("BIG",), ()), flags=(True, False, False))
        assert not co.phenotype_t2dm([r])
        r2 = make_record(a1c=(5.0, 5.0, 5.0), rx=(("SGLT2",), (), ()), flags=(False, False, False))
        assert co.phenotype_t2dm([r2])


def test_cohort_roundtrip(tmp_path, small_synth):
    cohort, truth = small_synth
    path = tmp_path / "c.jsonl"
    co.write_cohort(cohort, path)
    back = co.read_cohort(path)
    assert back == cohort
    co.write_ground_truth(truth.optimal, tmp_path / "g.jsonl")
    assert co.read_ground_truth(tmp_path / "g.jsonl") == truth.optimal


def test_read_cohort_reports_line_number(tmp_path):
    good = json.dumps(co.record_to_dict(make_record()))
    path = tmp_path / "c.jsonl"
    path.write_text(good + "\n{not json\n", encoding="utf-8")
    with pytest.raises(CohortParseError, match="line 2"):
        co.read_cohort(path)


class TestSynthetic:
    def test_shape_and_validity(self, small_synth):
        cohort, truth = small_synth
        assert len(cohort) == 60 == len(truth)
        for r in cohort:
            r.validate()
            assert len(r.encounters) >= 2
            assert set(truth.optimal[r.patient_id]) == set(co.TARGETS)

    def test_deterministic_in_seed(self):
        cfg = co.SynthConfig(n_patients=5, mean_encounters_per_patient=4, seed=3)
        assert co.generate_synthetic_cohort(cfg)[0] == co.generate_synthetic_cohort(cfg)[0]
        other = co.SynthConfig(n_patients=5, mean_encounters_per_patient=4, seed=4)
        assert co.generate_synthetic_cohort(cfg)[0] != co.generate_synthetic_cohort(other)[0]

    def test_zero_patients(self):
        cohort, truth = co.generate_synthetic_cohort(co.SynthConfig(n_patients=0))
        assert cohort == [] and len(truth) == 0

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            co.SynthConfig(behavior_policy_noise=1.5).validate()
        with pytest.raises(ConfigError):
            co.SynthConfig(missingness_rates={"xyz": 0.1}).validate()

    def test_missingness_rate_is_respected(self):
        cfg = co.SynthConfig(n_patients=200, seed=5, missingness_rates={"a1c": 0.3, "lipids": 0.0,
                                                                         "vitals": 0.0, "creatinine": 0.0})
        cohort, _ = co.generate_synthetic_cohort(cfg)
        a1c = [e.panel.a1c is None for r in cohort for e in r.encounters]
        ldl = [e.panel.ldl is None for r in cohort for e in r.encounters]
        assert abs(np.mean(a1c) - 0.3) < 0.03
        assert not any(ldl)

    def test_non_t2dm_patients_get_no_glycemic_drugs(self):
        cohort, truth = co.generate_synthetic_cohort(co.SynthConfig(n_patients=80, seed=2, non_t2dm_fraction=0.5))
        for r in cohort:
            if not truth.latent[r.patient_id].t2dm:
                assert all(co.restrict_regimen(e.prescriptions, "glycemia") == () for e in r.encounters)

    def test_optimal_regimen_is_argmax_of_planted_effect(self, small_synth):
        _, truth = small_synth
        for latent in truth.latent.values():
            for target in ("glycemia", "bp", "cvd"):
                (best,) = latent.optimal_regimen(target)
                assert latent.effects[target][best] == max(latent.effects[target].values())
            mm = latent.optimal_regimen("multimorbidity")
            assert len(mm) == 3

    def test_simulate_step_without_noise_is_deterministic(self, small_synth):
        _, truth = small_synth
        latent = next(iter(truth.latent.values()))
        levels = dict(latent.baseline, tc=200.0, weight=80.0)
        a = co.simulate_step(latent, levels, ("BIG",))
        b = co.simulate_step(latent, levels, ("BIG",))
        assert a == b
        none = co.simulate_step(latent, levels, ())
        assert none["a1c"] - a["a1c"] == pytest.approx(latent.effects["glycemia"]["BIG"])

    def test_planted_phenotypes_have_distinct_optima(self):
        _, truth = co.generate_synthetic_cohort(co.SynthConfig(n_patients=300, seed=9))
        optima = {truth.optimal[p]["glycemia"] for p in truth.optimal if truth.latent[p].t2dm}
        assert {("BIG",), ("GLP1",), ("SGLT2",), ("DPP4-BIG",)} <= optima


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(co.SUBCLASS_CODES), max_size=6))
def test_canonical_regimen_is_idempotent(codes):
    once = co.canonical_regimen(codes)
    assert co.canonical_regimen(once) == once
    assert set(once) == set(codes)
    parts = [co.restrict_regimen(codes, t) for t in ("glycemia", "bp", "cvd")]
    assert co.canonical_regimen(c for p in parts for c in p) == once
