import numpy as np
import pytest

from lesionbench.errors import DomainError, ShapeError
from lesionbench.targets import (
    COLLAPSED_CLASSES,
    FOUR_CLASS_ORDER,
    DiagnosisClass,
    TargetScheme,
    class_index,
    collapse,
    map_diagnosis,
    mel_probability,
)

# Every known spelling and its nine-class target.
MAPPING_TABLE = [
    ("NV", DiagnosisClass.NV),
    ("MEL", DiagnosisClass.MEL),
    ("BCC", DiagnosisClass.BCC),
    ("BKL", DiagnosisClass.BKL),
    ("AK", DiagnosisClass.AK),
    ("SCC", DiagnosisClass.SCC),
    ("VASC", DiagnosisClass.VASC),
    ("DF", DiagnosisClass.DF),
    ("nevus", DiagnosisClass.NV),
    ("melanoma", DiagnosisClass.MEL),
    ("seborrheic keratosis", DiagnosisClass.BKL),
    ("lichenoid keratosis", DiagnosisClass.BKL),
    ("solar lentigo", DiagnosisClass.BKL),
    ("lentigo NOS", DiagnosisClass.BKL),
    ("cafe-au-lait macule", DiagnosisClass.Unknown),
    ("atypical melanocytic proliferation", DiagnosisClass.Unknown),
]


@pytest.mark.parametrize("raw,expected", MAPPING_TABLE)
def test_mapping_table(raw, expected):
    assert map_diagnosis(raw, TargetScheme.NINE_CLASS) is expected


def test_mapping_is_case_insensitive_and_trimmed():
    assert map_diagnosis("  Melanoma ", TargetScheme.NINE_CLASS) is DiagnosisClass.MEL
    assert map_diagnosis("NEVUS", TargetScheme.NINE_CLASS) is DiagnosisClass.NV
    assert map_diagnosis("bkl", TargetScheme.NINE_CLASS) is DiagnosisClass.BKL


def test_missing_and_unrecognized_map_to_unknown():
    assert map_diagnosis(None, TargetScheme.NINE_CLASS) is DiagnosisClass.Unknown
    assert map_diagnosis("", TargetScheme.NINE_CLASS) is DiagnosisClass.Unknown
    assert map_diagnosis("space lizard", TargetScheme.NINE_CLASS) is DiagnosisClass.Unknown


def test_four_class_collapse():
    assert map_diagnosis("BCC", TargetScheme.FOUR_CLASS) is DiagnosisClass.Unknown
    for name in ("BCC", "AK", "SCC", "VASC", "DF"):
        assert map_diagnosis(name, TargetScheme.FOUR_CLASS) is DiagnosisClass.Unknown
    assert map_diagnosis("melanoma", TargetScheme.FOUR_CLASS) is DiagnosisClass.MEL
    assert map_diagnosis("solar lentigo", TargetScheme.FOUR_CLASS) is DiagnosisClass.BKL


def test_four_class_commutes_with_collapse():
    # collapse(nine-class result) == direct four-class result, for any input
    probes = [raw for raw, _ in MAPPING_TABLE] + [None, "garbage", "  MEL  "]
    for raw in probes:
        assert map_diagnosis(raw, TargetScheme.FOUR_CLASS) is collapse(
            map_diagnosis(raw, TargetScheme.NINE_CLASS)
        )


def test_only_melanoma_spellings_reach_mel():
    mel_inputs = {raw for raw, cls in MAPPING_TABLE if cls is DiagnosisClass.MEL}
    assert mel_inputs == {"MEL", "melanoma"}
    for raw, cls in MAPPING_TABLE:
        if raw not in mel_inputs:
            assert cls is not DiagnosisClass.MEL


def test_class_index_nine_class_order():
    expected = ["NV", "MEL", "BCC", "BKL", "AK", "SCC", "VASC", "DF", "Unknown"]
    for i, name in enumerate(expected):
        assert class_index(DiagnosisClass[name], TargetScheme.NINE_CLASS) == i


def test_class_index_four_class_order():
    assert [class_index(c, TargetScheme.FOUR_CLASS) for c in FOUR_CLASS_ORDER] == [0, 1, 2, 3]
    assert class_index(DiagnosisClass.Unknown, TargetScheme.FOUR_CLASS) == 3


def test_class_index_rejects_uncollapsed():
    for c in COLLAPSED_CLASSES:
        with pytest.raises(DomainError):
            class_index(c, TargetScheme.FOUR_CLASS)


def test_mel_probability():
    one_hot = np.zeros(9)
    one_hot[1] = 1.0
    assert mel_probability(one_hot, TargetScheme.NINE_CLASS) == 1.0
    assert mel_probability(np.full(9, 1 / 9), TargetScheme.NINE_CLASS) == 1 / 9
    assert mel_probability([0.1, 0.6, 0.2, 0.1], TargetScheme.FOUR_CLASS) == 0.6


def test_mel_probability_shape_error():
    with pytest.raises(ShapeError):
        mel_probability(np.full(4, 0.25), TargetScheme.NINE_CLASS)
    with pytest.raises(ShapeError):
        mel_probability(np.full(9, 1 / 9), TargetScheme.FOUR_CLASS)
