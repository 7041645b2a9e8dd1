import numpy as np
import pytest

from lesionbench.datamodel import (
    BinaryTarget,
    PredictionSet,
    Sex,
    SourceYear,
    parse_metadata_csv,
    parse_predictions_csv,
    validate_consistency,
    write_metadata_csv,
    write_predictions_csv,
)
from lesionbench.errors import (
    DomainError,
    FormatError,
    RangeError,
    UniquenessError,
)
from lesionbench.targets import TargetScheme
from util import make_dataset, make_record

HEADER = "image_name,patient_id,sex,age_approx,anatom_site_general_challenge,diagnosis,target,source"


def test_parse_full_row():
    d = parse_metadata_csv(HEADER + "\nISIC_01,P1,male,45,torso,melanoma,1,2020\n")
    assert len(d) == 1
    r = d.records[0]
    assert r.image_name == "ISIC_01"
    assert r.patient_id == "P1"
    assert r.sex is Sex.MALE
    assert r.age_approx == 45.0
    assert r.anatom_site == "torso"
    assert r.diagnosis == "melanoma"
    assert r.target_binary is BinaryTarget.MALIGNANT
    assert r.source_year is SourceYear.Y2020
    assert r.image_size_bytes is None


def test_parse_empty_cells_are_missing():
    d = parse_metadata_csv(HEADER + "\nISIC_02,P1,,,,,0,2019\n")
    r = d.records[0]
    assert r.sex is Sex.MISSING
    assert r.age_approx is None
    assert r.anatom_site is None
    assert r.diagnosis is None
    assert r.target_binary is BinaryTarget.BENIGN
    assert r.source_year is SourceYear.Y2019


def test_parse_optional_size_column():
    text = HEADER + ",image_size_bytes\nISIC_01,P1,male,45,torso,melanoma,1,2020,12345\n"
    d = parse_metadata_csv(text)
    assert d.records[0].image_size_bytes == 12345


def test_parse_preserves_row_order():
    rows = "\n".join(f"I{i},P{i},male,30,torso,nevus,0,2020" for i in range(20))
    d = parse_metadata_csv(HEADER + "\n" + rows + "\n")
    assert [r.image_name for r in d.records] == [f"I{i}" for i in range(20)]


def test_parse_accepts_crlf():
    text = HEADER + "\r\nISIC_01,P1,male,45,torso,melanoma,1,2020\r\n"
    d = parse_metadata_csv(text)
    assert d.records[0].age_approx == 45.0


def test_duplicate_image_name_rejected():
    text = HEADER + "\nISIC_03,P1,male,45,torso,nevus,0,2020\nISIC_03,P2,male,50,torso,nevus,0,2020\n"
    with pytest.raises(UniquenessError, match="ISIC_03"):
        parse_metadata_csv(text)


def test_missing_column_named_in_error():
    bad = HEADER.replace(",diagnosis", "")
    with pytest.raises(FormatError, match="diagnosis"):
        parse_metadata_csv(bad + "\n")


def test_non_numeric_age_carries_row_number():
    text = (
        HEADER
        + "\nISIC_01,P1,male,45,torso,nevus,0,2020"
        + "\nISIC_02,P2,male,old,torso,nevus,0,2020\n"
    )
    with pytest.raises(FormatError, match="row 2"):
        parse_metadata_csv(text)


def test_bad_target_and_source_rejected():
    with pytest.raises(FormatError, match="target"):
        parse_metadata_csv(HEADER + "\nI1,P1,male,45,torso,nevus,2,2020\n")
    with pytest.raises(FormatError, match="source"):
        parse_metadata_csv(HEADER + "\nI1,P1,male,45,torso,nevus,0,2021\n")


def test_age_range_enforced():
    with pytest.raises(RangeError):
        parse_metadata_csv(HEADER + "\nI1,P1,male,150,torso,nevus,0,2020\n")
    with pytest.raises(RangeError):
        make_record("I1", age=-1.0)


def test_size_must_be_positive():
    with pytest.raises(RangeError):
        make_record("I1", size=0)


def test_by_patient_covers_every_record_once():
    d = make_dataset(
        [
            make_record("I1", patient_id="A"),
            make_record("I2", patient_id="B"),
            make_record("I3", patient_id="A"),
        ]
    )
    positions = sorted(pos for group in d.by_patient.values() for pos in group)
    assert positions == [0, 1, 2]
    assert d.by_patient["A"] == (0, 2)


def test_metadata_round_trip():
    rng = np.random.default_rng(7)
    records = []
    sites = ["torso", "head/neck", None]
    diagnoses = ["melanoma", "nevus", "BKL", None]
    for i in range(50):
        diag = diagnoses[rng.integers(len(diagnoses))]
        records.append(
            make_record(
                f"I{i}",
                patient_id=f"P{rng.integers(10)}",
                sex=[Sex.MALE, Sex.FEMALE, Sex.MISSING][rng.integers(3)],
                age=None if rng.random() < 0.2 else float(rng.integers(0, 100)) + 0.5,
                site=sites[rng.integers(len(sites))],
                diagnosis=diag,
                malignant=diag == "melanoma",
                year=2019 if rng.random() < 0.5 else 2020,
                size=None if rng.random() < 0.3 else int(rng.integers(1, 10**7)),
            )
        )
    d = make_dataset(records)
    assert parse_metadata_csv(write_metadata_csv(d)) == d


def test_consistency_truth_table():
    # all four (diagnosis maps to MEL?, malignant?) combinations
    cases = [
        (make_record("I1", diagnosis="melanoma", malignant=True), 0),
        (make_record("I2", diagnosis="melanoma", malignant=False), 1),
        (make_record("I3", diagnosis="nevus", malignant=True), 1),
        (make_record("I4", diagnosis="nevus", malignant=False), 0),
    ]
    for record, expected_errors in cases:
        report = validate_consistency(make_dataset([record]))
        assert len(report.errors) == expected_errors, record.image_name


def test_consistency_missing_diagnosis_warns():
    d = make_dataset([make_record("I1", diagnosis=None, malignant=True)])
    report = validate_consistency(d)
    assert len(report.errors) == 0
    assert any(w.rule == "diagnosis-missing" for w in report.warnings)


def test_consistency_flags_2020_positive_rate():
    # 50% positive is far above the expected 1.76%
    records = [
        make_record("I1", diagnosis="melanoma", malignant=True),
        make_record("I2", diagnosis="nevus", malignant=False),
    ]
    report = validate_consistency(make_dataset(records))
    assert any(w.rule == "positive-rate-2020" for w in report.warnings)

    # 1.76% on the nose: 2 positives among ~114 images
    ok_records = [
        make_record(f"N{i}", patient_id=f"P{i}", diagnosis="nevus") for i in range(112)
    ] + [
        make_record("M1", patient_id="PM1", diagnosis="melanoma", malignant=True),
        make_record("M2", patient_id="PM2", diagnosis="melanoma", malignant=True),
    ]
    report = validate_consistency(make_dataset(ok_records))
    assert not any(w.rule == "positive-rate-2020" for w in report.warnings)


def test_scalar_predictions_format():
    p = PredictionSet.from_scores(["ISIC_01"], [0.25])
    assert write_predictions_csv(p) == "image_name,target\nISIC_01,0.25\n"


def test_scalar_predictions_round_trip():
    rng = np.random.default_rng(11)
    p = PredictionSet.from_scores([f"I{i}" for i in range(200)], rng.random(200))
    assert parse_predictions_csv(write_predictions_csv(p)) == p


def test_full_predictions_round_trip_both_schemes():
    rng = np.random.default_rng(12)
    for scheme in TargetScheme:
        raw = rng.random((40, scheme.class_count))
        probs = raw / raw.sum(axis=1, keepdims=True)
        p = PredictionSet.from_probs([f"I{i}" for i in range(40)], probs, scheme)
        back = parse_predictions_csv(write_predictions_csv(p))
        assert back == p
        assert back.scheme is scheme


def test_prediction_header_shapes():
    nine = write_predictions_csv(
        PredictionSet.from_probs(["I1"], np.full((1, 9), 1 / 9), TargetScheme.NINE_CLASS)
    )
    assert nine.splitlines()[0] == (
        "image_name,prob_NV,prob_MEL,prob_BCC,prob_BKL,prob_AK,prob_SCC,"
        "prob_VASC,prob_DF,prob_Unknown"
    )
    four = write_predictions_csv(
        PredictionSet.from_probs(["I1"], np.full((1, 4), 0.25), TargetScheme.FOUR_CLASS)
    )
    assert four.splitlines()[0] == "image_name,prob_NV,prob_MEL,prob_BKL,prob_Unknown"


def test_prediction_out_of_range_rejected():
    with pytest.raises(RangeError):
        PredictionSet.from_scores(["I1"], [1.5])
    with pytest.raises(RangeError):
        parse_predictions_csv("image_name,target\nI1,1.5\n")
    with pytest.raises(RangeError):
        parse_predictions_csv("image_name,target\nI1,-0.1\n")


def test_prediction_unknown_header_rejected():
    with pytest.raises(FormatError):
        parse_predictions_csv("image_name,score\nI1,0.5\n")


def test_prediction_row_sums_enforced():
    bad = np.array([[0.5, 0.2, 0.2, 0.2]])
    with pytest.raises(DomainError):
        PredictionSet.from_probs(["I1"], bad, TargetScheme.FOUR_CLASS)


def test_to_scalar_extracts_mel_column():
    probs = np.array([[0.1, 0.6, 0.2, 0.1], [0.7, 0.1, 0.1, 0.1]])
    p = PredictionSet.from_probs(["A", "B"], probs, TargetScheme.FOUR_CLASS)
    s = p.to_scalar()
    assert s.is_scalar
    assert np.array_equal(s.scores, [0.6, 0.1])


def test_prediction_arrays_read_only():
    p = PredictionSet.from_scores(["I1"], [0.5])
    with pytest.raises(ValueError):
        p.scores[0] = 0.9
