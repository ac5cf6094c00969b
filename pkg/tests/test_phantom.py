import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dramseg.losses import Interval
from dramseg.phantom import (
    HU_AIR,
    HU_CONSOLIDATION,
    HU_GGO,
    HU_PARENCHYMA,
    PhantomConfig,
    generate_case,
    interval_from_score,
    list_case_ids,
    load_case,
    read_severity_csv,
    score_from_fraction,
    true_fraction,
    write_case,
    write_severity_csv,
)


# ---------------------------------------------------------------------------
# severity mapping


SCORE_TABLE = [
    (0.0, 0),
    (0.001, 1),
    (0.05, 1),   # boundary goes to the lower score
    (0.050001, 2),
    (0.25, 2),
    (0.30, 3),
    (0.50, 3),
    (0.75, 4),
    (0.750001, 5),
    (1.0, 5),
]


@pytest.mark.parametrize("p,score", SCORE_TABLE)
def test_score_from_fraction_table(p, score):
    assert score_from_fraction(p) == score


def test_score_from_fraction_domain():
    with pytest.raises(ValueError):
        score_from_fraction(-0.01)
    with pytest.raises(ValueError):
        score_from_fraction(1.01)


def test_interval_table():
    expected = {
        0: (0.00, 0.00),
        1: (0.01, 0.05),
        2: (0.05, 0.25),
        3: (0.25, 0.50),
        4: (0.50, 0.75),
        5: (0.75, 1.00),
    }
    for score, (lo, hi) in expected.items():
        iv = interval_from_score(score)
        assert iv == Interval(lo, hi)
    with pytest.raises(ValueError):
        interval_from_score(6)
    with pytest.raises(ValueError):
        interval_from_score(-1)


@settings(max_examples=300, deadline=None)
@given(p=st.floats(0.0, 1.0))
def test_score_interval_consistency(p):
    score = score_from_fraction(p)
    iv = interval_from_score(score)
    if score == 0:
        assert p == 0.0
    else:
        # p sits inside (or on the edge of) its own score band
        assert iv.r_l - 0.01 <= p <= iv.r_u  # score 1 band starts at fraction >0


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
def test_score_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert score_from_fraction(lo) <= score_from_fraction(hi)


# ---------------------------------------------------------------------------
# true_fraction


def test_true_fraction_examples():
    lobes = np.zeros((2, 2, 2), dtype=np.uint8)
    lobes[0] = 1
    lesions = np.zeros_like(lobes)
    assert true_fraction(lesions, lobes, 1) == 0.0
    lesions[0] = 1
    assert true_fraction(lesions, lobes, 1) == 1.0
    lobes = np.ones((2, 2, 2), dtype=np.uint8)
    lesions = np.zeros_like(lobes)
    lesions[0, 0, 0] = 2
    lesions[0, 0, 1] = 3
    assert true_fraction(lesions, lobes, 1) == 0.25
    with pytest.raises(ValueError):
        true_fraction(lesions, lobes, 9)


# ---------------------------------------------------------------------------
# generator


SMALL = PhantomConfig(grid_size=48, seed=7)


def test_generate_deterministic():
    a = generate_case(SMALL, 0)
    b = generate_case(SMALL, 0)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    np.testing.assert_array_equal(a.lobe_map.data, b.lobe_map.data)
    np.testing.assert_array_equal(a.lesion_map.data, b.lesion_map.data)
    np.testing.assert_array_equal(a.vessel_map.data, b.vessel_map.data)
    assert a.severity == b.severity


def test_generate_cases_differ():
    a = generate_case(SMALL, 0)
    b = generate_case(SMALL, 1)
    assert not np.array_equal(a.lesion_map.data, b.lesion_map.data) or not np.array_equal(
        a.lobe_map.data, b.lobe_map.data
    )


@pytest.mark.parametrize("idx", [0, 1, 2])
def test_generated_case_invariants(idx):
    case = generate_case(SMALL, idx)
    case.validate()


def test_zero_burden_config():
    cfg = PhantomConfig(grid_size=48, lesion_burden=(0.0, 0.0), seed=3)
    case = generate_case(cfg, 0)
    assert not case.lesion_map.data.any()
    assert all(r.score == 0 for r in case.severity)
    case.validate()


def test_label_noise_keeps_interval_consistent():
    cfg = PhantomConfig(grid_size=48, label_noise_prob=1.0, seed=5)
    case = generate_case(cfg, 0)
    case.validate(label_noise=True)
    for rec in case.severity:
        assert 0 <= rec.score <= 5
        assert rec.interval == interval_from_score(rec.score)


def test_intensity_palette():
    cfg = PhantomConfig(grid_size=48, noise_sigma=0.0, seed=7, lesion_burden=(0.3, 0.6))
    case = generate_case(cfg, 0)
    img = case.image.data
    lung = case.lobe_map.data > 0
    clean = lung & (case.lesion_map.data == 0) & (case.vessel_map.data == 0)
    outside = ~lung
    assert np.median(img[outside]) == pytest.approx(HU_AIR, abs=5)
    # parenchyma mode sits at the configured HU; vessel rims blend upward
    vals = img[clean]
    assert np.percentile(vals, 50) == pytest.approx(HU_PARENCHYMA, abs=10)
    # lesion voxels composite between parenchyma (at the smoothed rim) and
    # the subtype attenuation (with +-35 / +-20 HU per-blob jitter), so they
    # stay inside [parenchyma, consolidation + jitter] and are distinctly
    # brighter than clean parenchyma on average
    lesioned = img[case.lesion_map.data > 0]
    assert lesioned.size > 0
    assert lesioned.min() >= HU_PARENCHYMA - 1
    assert lesioned.max() <= HU_CONSOLIDATION + 21
    assert lesioned.mean() > HU_PARENCHYMA + 100


def test_burden_mean_within_configured_range():
    cfg = PhantomConfig(grid_size=48, seed=7)
    fracs = []
    for idx in range(12):
        case = generate_case(cfg, idx)
        fracs.extend(r.true_fraction for r in case.severity)
    lo, hi = cfg.lesion_burden
    mean = float(np.mean(fracs))
    # a quarter of lobes are forced healthy, so the mean sits in the lower
    # half of the configured range but stays well inside it
    assert lo - 0.05 <= mean <= hi + 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(grid_size=30).validate()
    with pytest.raises(ValueError):
        PhantomConfig(grid_size=44).validate()
    with pytest.raises(ValueError):
        PhantomConfig(subtype_mix=(0.5, 0.5, 0.5)).validate()
    with pytest.raises(ValueError):
        PhantomConfig(lesion_burden=(0.5, 0.2)).validate()
    with pytest.raises(ValueError):
        PhantomConfig(noise_sigma=-1.0).validate()
    with pytest.raises(ValueError):
        generate_case(SMALL, -1)


# ---------------------------------------------------------------------------
# round trip through the on-disk layout


def test_case_round_trip(tmp_path):
    case = generate_case(SMALL, 0)
    write_case(case, tmp_path)
    write_severity_csv([case], tmp_path)
    severity = read_severity_csv(tmp_path)
    assert list_case_ids(tmp_path) == [case.case_id]
    back = load_case(tmp_path, case.case_id, severity)
    np.testing.assert_array_equal(back.image.data, case.image.data)
    np.testing.assert_array_equal(back.lobe_map.data, case.lobe_map.data)
    np.testing.assert_array_equal(back.lesion_map.data, case.lesion_map.data)
    np.testing.assert_array_equal(back.vessel_map.data, case.vessel_map.data)
    assert back.severity == case.severity
    back.validate()


def test_list_case_ids_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        list_case_ids(tmp_path / "nope")
