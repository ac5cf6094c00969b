import itertools

import numpy as np
import pytest
import torch

from dramseg.losses import Interval
from dramseg.model import NetworkConfig, RegressionNetwork
from dramseg.pipeline import (
    LOG_HEADER,
    AffineTransform,
    GeometryRecord,
    TrainConfig,
    TrainingCase,
    TrainingDivergence,
    apply_affine,
    extract_chunk,
    extract_mask_chunk,
    infer_scan,
    insert_activations,
    load_training_cases,
    make_pseudo_labels,
    normalize_intensity,
    postprocess_cam,
    sample_affine,
    train_regression,
)

TOY_NET = NetworkConfig(base_width=2, attention_dim=4, chunk_size=(8, 8, 8))


def _toy_case(fill=None, seed=0):
    """One 16^3 case whose single lobe is an exact 8^3 box (identity resize)."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(16, 16, 16)).astype(np.float32)
    if fill is not None:
        image[:] = fill
    lobe_map = np.zeros((16, 16, 16), dtype=np.uint8)
    lobe_map[4:12, 4:12, 4:12] = 1
    candidates = np.zeros_like(lobe_map, dtype=bool)
    candidates[6:10, 6:10, 6:10] = True
    vessels = np.zeros_like(candidates)
    vessels[4:12, 7:9, 7:9] = True
    return TrainingCase(
        case_id="toy",
        image=image,
        lobe_map=lobe_map,
        candidates=candidates,
        vessels=vessels,
        intervals={1: Interval(0.05, 0.25)},
        positive={1: True},
    )


# ---------------------------------------------------------------------------
# intensity + chunk geometry


def test_normalize_intensity_anchors():
    v = normalize_intensity(np.array([-1200.0, -1000.0, -300.0, 400.0, 900.0]))
    np.testing.assert_allclose(v, [0.0, 0.0, 0.5, 1.0, 1.0])
    assert v.dtype == np.float32


def test_extract_chunk_identity_geometry():
    case = _toy_case()
    chunk, mask, geom = extract_chunk(case.image, case.lobe_map, 1, (8, 8, 8))
    assert geom.bbox == (4, 12, 4, 12, 4, 12)
    assert geom.bbox_shape == (8, 8, 8)
    assert chunk.shape == (1, 8, 8, 8)
    assert mask.all()                 # the box is entirely lobe
    np.testing.assert_allclose(chunk[0].numpy(), case.image[4:12, 4:12, 4:12], atol=1e-6)


def test_extract_chunk_zeroes_out_of_lobe():
    case = _toy_case(fill=0.7)
    case.lobe_map[4:12, 4:12, 4:12] = 0
    case.lobe_map[4:12, 4:8, 4:12] = 1    # half the old box
    case.lobe_map[4, 4, 4] = 0            # notch inside the bbox
    chunk, mask, geom = extract_chunk(case.image, case.lobe_map, 1, (8, 4, 8))
    assert not bool(mask[0, 0, 0])
    assert float(chunk[0, 0, 0, 0]) == 0.0
    assert bool(mask[1, 1, 1]) and float(chunk[0, 1, 1, 1]) == pytest.approx(0.7)


def test_extract_chunk_empty_lobe_raises():
    case = _toy_case()
    with pytest.raises(ValueError):
        extract_chunk(case.image, case.lobe_map, 3, (8, 8, 8))


def test_extract_mask_chunk_agrees_with_lobe_mask():
    case = _toy_case()
    _, mask, geom = extract_chunk(case.image, case.lobe_map, 1, (8, 8, 8))
    again = extract_mask_chunk(case.lobe_map == 1, geom)
    assert torch.equal(mask, again)
    cand = extract_mask_chunk(case.candidates, geom)
    assert cand.shape == (8, 8, 8)
    assert bool(cand[3, 3, 3]) and not bool(cand[0, 0, 0])


def test_insert_activations_inverts_identity_crop():
    case = _toy_case()
    _, _, geom = extract_chunk(case.image, case.lobe_map, 1, (8, 8, 8))
    acts = torch.rand(3, 8, 8, 8)
    back = insert_activations(acts, geom, (16, 16, 16))
    assert back.shape == (3, 16, 16, 16)
    assert torch.equal(back[:, 4:12, 4:12, 4:12], acts)
    outside = back.clone()
    outside[:, 4:12, 4:12, 4:12] = 0
    assert not outside.any()


# ---------------------------------------------------------------------------
# affine augmentation


def test_affine_validation():
    with pytest.raises(ValueError):
        AffineTransform((1.0, 1.0, 1.0), rotation_k=0, rotation_axes=(0, 1))
    with pytest.raises(ValueError):
        AffineTransform((1.0, 1.0, 1.0), rotation_k=1, rotation_axes=(1, 1))
    with pytest.raises(ValueError):
        AffineTransform((1.3, 1.0, 1.0), rotation_k=1, rotation_axes=(0, 1))


def test_pure_rotation_is_voxel_permutation():
    torch.manual_seed(0)
    vol = torch.rand(2, 6, 6, 6)
    for k, (a, b) in itertools.product((1, 2, 3), ((0, 1), (0, 2), (1, 2), (2, 1))):
        t = AffineTransform((1.0, 1.0, 1.0), rotation_k=k, rotation_axes=(a, b))
        got = apply_affine(vol, t)
        want = np.rot90(vol.numpy(), k=k, axes=(1 + a, 1 + b))
        np.testing.assert_array_equal(got.numpy(), want)


def test_pure_rotation_inverse_restores():
    torch.manual_seed(1)
    vol = torch.rand(1, 6, 6, 6)
    fwd = AffineTransform((1.0, 1.0, 1.0), rotation_k=1, rotation_axes=(0, 2))
    bwd = AffineTransform((1.0, 1.0, 1.0), rotation_k=3, rotation_axes=(0, 2))
    assert torch.equal(apply_affine(apply_affine(vol, fwd), bwd), vol)


def test_quarter_rotation_needs_equal_axes():
    vol = torch.rand(1, 4, 6, 6)
    t = AffineTransform((1.0, 1.0, 1.0), rotation_k=1, rotation_axes=(0, 1))
    with pytest.raises(ValueError):
        apply_affine(vol, t)
    # the half turn and the untouched-axis quarter turn are both fine
    apply_affine(vol, AffineTransform((1.0, 1.0, 1.0), 2, (0, 1)))
    apply_affine(vol, AffineTransform((1.0, 1.0, 1.0), 1, (1, 2)))


def test_affine_preserves_shape():
    rng = np.random.default_rng(7)
    vol = torch.rand(3, 8, 8, 8)
    for _ in range(10):
        t = sample_affine(rng)
        assert apply_affine(vol, t).shape == vol.shape


def test_sample_affine_deterministic():
    a = sample_affine(np.random.default_rng(11))
    b = sample_affine(np.random.default_rng(11))
    assert a == b
    assert all(0.8 <= s <= 1.2 for s in a.scale_factors)


# ---------------------------------------------------------------------------
# pseudo-labels


def test_pseudo_labels_match_brute_force():
    torch.manual_seed(2)
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        dram = torch.softmax(torch.randn(3, 3, 3, 3, generator=g), dim=0)
        cand = torch.rand(3, 3, 3, generator=g) > 0.5
        ves = torch.rand(3, 3, 3, generator=g) > 0.5
        lobe = torch.rand(3, 3, 3, generator=g) > 0.3
        t_star = make_pseudo_labels(dram, cand, ves, lobe)
        assert t_star.shape == (3, 3, 3, 3)
        for i, j, k in itertools.product(range(3), repeat=3):
            if lobe[i, j, k] and dram[:, i, j, k].argmax() == 2 and cand[i, j, k]:
                want = 2
            elif lobe[i, j, k] and ves[i, j, k]:
                want = 1
            else:
                want = 0
            vec = t_star[:, i, j, k]
            assert float(vec.sum()) == 1.0
            assert int(vec.argmax()) == want and float(vec[want]) == 1.0


# ---------------------------------------------------------------------------
# training loop


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(checkpoint_every=0).validate()


def test_train_rejects_chunk_size_mismatch(tmp_path):
    cfg = TrainConfig(epochs=1, chunk_size=(16, 16, 16))
    with pytest.raises(ValueError):
        train_regression([_toy_case()], TOY_NET, cfg, tmp_path)


def test_short_training_run_writes_artifacts(tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, epochs=2, checkpoint_every=1, seed=0)
    net = train_regression(
        [_toy_case()], TOY_NET, cfg, tmp_path / "run",
        use_er=True, use_ref=True, use_at=True,
    )
    lines = (tmp_path / "run" / "log.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(LOG_HEADER)
    assert len(lines) == 3                       # 2 epochs x 1 lobe
    for row in lines[1:]:
        parts = [float(x) for x in row.split(",")[2:]]
        assert all(np.isfinite(p) for p in parts)
    names = sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir())
    assert names == ["epoch_0001.ckpt", "epoch_0002.ckpt"]

    pred = infer_scan(net, np.full((16, 16, 16), -850.0, dtype=np.float32), _toy_case().lobe_map)
    assert pred.shape == (16, 16, 16)
    assert set(np.unique(pred)) <= {0, 1, 2}
    assert not pred[_toy_case().lobe_map == 0].any()


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, epochs=1, checkpoint_every=1, seed=3)
    for d in ("a", "b"):
        train_regression([_toy_case()], TOY_NET, cfg, tmp_path / d, use_er=True, use_ref=True, use_at=True)
    assert (tmp_path / "a" / "checkpoints" / "epoch_0001.ckpt").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "epoch_0001.ckpt").read_bytes()
    assert (tmp_path / "a" / "log.csv").read_text() == (tmp_path / "b" / "log.csv").read_text()


def test_zero_epochs_saves_initial_checkpoint(tmp_path):
    cfg = TrainConfig(epochs=0)
    train_regression([_toy_case()], TOY_NET, cfg, tmp_path)
    assert (tmp_path / "checkpoints" / "epoch_0000.ckpt").exists()
    assert (tmp_path / "log.csv").read_text().strip() == ",".join(LOG_HEADER)


def test_non_finite_loss_raises_after_logging(tmp_path):
    case = _toy_case(fill=np.nan)
    cfg = TrainConfig(learning_rate=1e-3, epochs=1)
    with pytest.raises(TrainingDivergence):
        train_regression([case], TOY_NET, cfg, tmp_path)
    lines = (tmp_path / "log.csv").read_text().strip().splitlines()
    assert len(lines) == 2                       # the offending step was logged


# ---------------------------------------------------------------------------
# CAM post-processing


def test_postprocess_cam_splits_bimodal_lobe():
    lobe_map = np.zeros((6, 6, 6), dtype=np.uint8)
    lobe_map[1:5, 1:5, 1:5] = 1
    cam = np.zeros((6, 6, 6), dtype=np.float32)
    cam[lobe_map == 1] = 0.1
    cam[2:4, 2:4, 2:4] = 0.9
    pred = postprocess_cam(cam, lobe_map, None)
    np.testing.assert_array_equal(pred, cam == 0.9)


def test_postprocess_cam_constant_lobe_silent():
    lobe_map = np.zeros((4, 4, 4), dtype=np.uint8)
    lobe_map[1:3, 1:3, 1:3] = 1
    cam = np.full((4, 4, 4), 0.5, dtype=np.float32)
    assert not postprocess_cam(cam, lobe_map, None).any()
    # all-negative rectifies to constant zero: also silent
    assert not postprocess_cam(-cam, lobe_map, None).any()


def test_postprocess_cam_candidate_clip():
    lobe_map = np.zeros((6, 6, 6), dtype=np.uint8)
    lobe_map[1:5, 1:5, 1:5] = 1
    cam = np.zeros((6, 6, 6), dtype=np.float32)
    cam[lobe_map == 1] = 0.1
    cam[2:4, 2:4, 2:4] = 0.9
    cand = np.zeros((6, 6, 6), dtype=bool)
    cand[2:4, 2:4, 2:3] = True
    pred = postprocess_cam(cam, lobe_map, cand)
    np.testing.assert_array_equal(pred, (cam == 0.9) & cand)


# ---------------------------------------------------------------------------
# case assembly (generation -> proposals -> training views)


def test_load_training_cases_round_trip(tmp_path):
    from dramseg.losses import calibrate_interval
    from dramseg.phantom import (
        PhantomConfig,
        generate_case,
        interval_from_score,
        write_case,
        write_severity_csv,
    )
    from dramseg.proposal import propose, proposal_rows, write_proposal, write_proposals_csv

    case = generate_case(PhantomConfig(grid_size=48, seed=7), 0)
    write_case(case, tmp_path / "data")
    write_severity_csv([case], tmp_path / "data")
    prop = propose(case.image, case.lobe_map)
    write_proposal(prop, tmp_path / "props", case.case_id, case.image.spacing)
    write_proposals_csv(proposal_rows(case, prop), tmp_path / "props")

    loaded, = load_training_cases(tmp_path / "data", tmp_path / "props", [case.case_id])
    assert loaded.case_id == case.case_id
    assert loaded.image.dtype == np.float32
    assert loaded.image.min() >= 0.0 and loaded.image.max() <= 1.0
    assert loaded.candidates.dtype == np.bool_ and loaded.vessels.dtype == np.bool_
    assert sorted(loaded.intervals) == [1, 2, 3, 4, 5]
    for rec in case.severity:
        base = interval_from_score(rec.score)
        want = calibrate_interval(base, prop.p_star[rec.lobe_id])
        assert loaded.intervals[rec.lobe_id] == want
        assert loaded.positive[rec.lobe_id] == (rec.score > 0)
