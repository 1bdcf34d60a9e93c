import numpy as np
import pytest

from afunet.data import (
    ExposureStack,
    SceneError,
    SyntheticScene,
    dihedral,
    epoch_rng,
    exposure_times,
    gamma_companions,
    generate_synthetic,
    load_scene,
    read_manifest,
    sample_patches,
    split_validation,
    write_ldr16,
    write_manifest,
)
from afunet.oracle import DegradationOp, OracleProblem, SolveConfig, solve
from afunet.rgbe import write_hdr


def make_scene_dir(root, ev=(-2.0, 0.0, 2.0), with_gt=True, size=(16, 20), seed=0, fmt=".tif"):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    ldrs = [rng.uniform(0, 1, size=size + (3,)) for _ in range(3)]
    for i, L in enumerate(ldrs):
        write_ldr16(root / f"input_{i + 1}{fmt}", L)
    (root / "exposures.txt").write_text("\n".join(str(v) for v in ev) + "\n")
    if with_gt:
        write_hdr(root / "HDRImg.hdr", rng.uniform(0, 1, size=size + (3,)))
    return root


def test_companion_formula_example():
    # L = 0.25, ev = (-2, 0, 2): reference H = 0.25^2.2, under-exposed t = 0.25
    L = np.full((2, 2, 3), 0.25)
    H = gamma_companions((L, L, L), (-2, 0, 2))
    assert H[1][0, 0, 0] == pytest.approx(0.25 ** 2.2, rel=1e-14)
    assert H[1][0, 0, 0] == pytest.approx(0.0474, abs=5e-5)
    assert H[0][0, 0, 0] == pytest.approx(0.25 ** 2.2 / 0.25, rel=1e-14)
    assert H[0][0, 0, 0] == pytest.approx(0.1895, abs=5e-5)
    assert H[2][0, 0, 0] == pytest.approx(0.25 ** 2.2 / 4, rel=1e-14)


def test_equal_evs_give_plain_gamma():
    rng = np.random.default_rng(0)
    Ls = [rng.uniform(size=(3, 3, 3)) for _ in range(3)]
    np.testing.assert_array_equal(exposure_times((1.5, 1.5, 1.5)), np.ones(3))
    for L, H in zip(Ls, gamma_companions(Ls, (1.5, 1.5, 1.5))):
        np.testing.assert_allclose(H, L ** 2.2, rtol=1e-15)


def test_load_scene(tmp_path):
    scene = make_scene_dir(tmp_path / "s001")
    stack = load_scene(scene)
    assert stack.shape == (16, 20)
    assert stack.ev == (-2.0, 0.0, 2.0)
    assert not stack.eval_only
    for L in stack.ldr:
        assert L.min() >= 0 and L.max() <= 1
    np.testing.assert_allclose(stack.hdr[1], stack.ldr[1] ** 2.2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(stack.hdr[0], stack.ldr[0] ** 2.2 / 0.25, rtol=1e-12)
    y1, y2, y3 = stack.inputs()
    assert y2.shape == (6, 16, 20)
    np.testing.assert_allclose(y2[:3], stack.ldr[1].transpose(2, 0, 1), rtol=1e-6)


def test_load_scene_ordering_and_png(tmp_path):
    scene = make_scene_dir(tmp_path / "s", fmt=".png")
    stack = load_scene(scene)
    assert len(stack.ldr) == 3
    # 16-bit PNG decodes through the same path
    assert stack.ldr[0].dtype == np.float64


def test_load_scene_without_gt(tmp_path):
    stack = load_scene(make_scene_dir(tmp_path / "s", with_gt=False))
    assert stack.gt is None and stack.eval_only


def test_load_scene_errors(tmp_path):
    with pytest.raises(SceneError, match="not found"):
        load_scene(tmp_path / "missing")
    scene = make_scene_dir(tmp_path / "a")
    (scene / "exposures.txt").unlink()
    with pytest.raises(SceneError, match="exposures.txt"):
        load_scene(scene)
    scene = make_scene_dir(tmp_path / "b")
    (scene / "input_3.tif").unlink()
    with pytest.raises(SceneError, match="3 LDR"):
        load_scene(scene)
    scene = make_scene_dir(tmp_path / "c")
    write_ldr16(scene / "input_3.tif", np.zeros((8, 8, 3)))
    with pytest.raises(SceneError, match="shape"):
        load_scene(scene)
    scene = make_scene_dir(tmp_path / "d")
    (scene / "input_2.tif").write_bytes(b"not an image")
    with pytest.raises(SceneError, match="unreadable"):
        load_scene(scene)
    scene = make_scene_dir(tmp_path / "e")
    (scene / "exposures.txt").write_text("0\n2\n")
    with pytest.raises(SceneError, match="3 exposure"):
        load_scene(scene)


def test_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "train.txt", ["a", "b", "/abs/c"])
    scenes = read_manifest(tmp_path / "train.txt")
    assert scenes == [tmp_path / "a", tmp_path / "b", __import__("pathlib").Path("/abs/c")]


def test_split_validation():
    scenes = [f"s{i}" for i in range(20)]
    train, val = split_validation(scenes, 0.1, seed=3)
    assert len(val) == 2 and len(train) == 18 and not set(train) & set(val)
    assert split_validation(scenes, 0.1, seed=3) == (train, val)
    small = ["a", "b"]
    assert split_validation(small, 0.1) == (small, small)


# patches


def synthetic_stack(seed=0, size=32, **kw):
    return generate_synthetic(SyntheticScene(height=size, width=size, **kw), np.random.default_rng(seed))


def test_patch_determinism():
    stack = synthetic_stack()
    a = sample_patches(stack, 16, epoch_rng(7, 3), count=4)
    b = sample_patches(stack, 16, epoch_rng(7, 3), count=4)
    for k in ("y1", "y2", "y3", "gt"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    assert a.meta == b.meta
    assert a.y1.shape == (4, 6, 16, 16) and a.gt.shape == (4, 3, 16, 16)


def test_patch_identity_transform_is_raw_crop():
    stack = synthetic_stack()
    batch = sample_patches(stack, 16, epoch_rng(0, 0), count=3, augment=False)
    y2 = stack.inputs(np.float64)[1]
    for i, m in enumerate(batch.meta):
        assert m["transform"] == 0
        t, l = m["top"], m["left"]
        np.testing.assert_allclose(batch.y2[i], y2[:, t:t + 16, l:l + 16], rtol=1e-6)
        np.testing.assert_allclose(batch.gt[i], stack.gt[t:t + 16, l:l + 16].transpose(2, 0, 1), rtol=1e-6)


def test_patch_transform_shared_across_exposures():
    stack = synthetic_stack()
    batch = sample_patches(stack, 16, epoch_rng(1, 0), count=8)
    ys = [a.transpose(1, 2, 0) for a in stack.inputs(np.float64)]
    for i, m in enumerate(batch.meta):
        t, l, k = m["top"], m["left"], m["transform"]
        for y, got in zip(ys, (batch.y1[i], batch.y2[i], batch.y3[i])):
            want = dihedral(y[t:t + 16, l:l + 16], k).transpose(2, 0, 1)
            np.testing.assert_allclose(got, want, rtol=1e-6)


def test_dihedral_group_is_distinct():
    a = np.arange(9.0).reshape(3, 3, 1)
    outs = {dihedral(a, k).tobytes() for k in range(8)}
    assert len(outs) == 8


def test_patch_offsets_uniform_chi_square():
    stack = synthetic_stack(size=20)
    s = 16
    batch = sample_patches(stack, s, epoch_rng(123, 0), count=10_000, augment=False)
    k = (20 - s + 1) ** 2
    counts = np.zeros(k)
    for m in batch.meta:
        counts[m["top"] * (20 - s + 1) + m["left"]] += 1
    expected = 10_000 / k
    chi2 = np.sum((counts - expected) ** 2 / expected)
    dof = k - 1
    assert chi2 < dof + 3 * np.sqrt(2 * dof)


def test_patch_too_small_scene():
    with pytest.raises(SceneError, match="smaller"):
        sample_patches(synthetic_stack(size=16), 32, epoch_rng(0, 0))


def test_epoch_rng_is_pure():
    assert epoch_rng(1, 2).integers(0, 1 << 30) == epoch_rng(1, 2).integers(0, 1 << 30)
    assert epoch_rng(1, 2).integers(0, 1 << 30) != epoch_rng(1, 3).integers(0, 1 << 30)


# synthetic generator


def test_synthetic_inversion_recovers_latent():
    spec = SyntheticScene(height=24, width=24, gains=(0.25, 0.5, 0.9), noise=0.0)
    stack = generate_synthetic(spec, np.random.default_rng(0))
    assert stack.gt.max() * max(spec.gains) < 1  # no clipping in play
    for L, g in zip(stack.ldr, spec.gains):
        np.testing.assert_allclose(L ** spec.gamma / g, stack.gt, rtol=1e-12)


def test_synthetic_clipping_saturates():
    spec = SyntheticScene(height=24, width=24, gains=(0.25, 1.0, 8.0), clip=1.0)
    stack = generate_synthetic(spec, np.random.default_rng(1))
    bright = stack.gt * 8.0 >= 1.0
    assert bright.any()
    np.testing.assert_allclose(stack.ldr[2][bright], 1.0)
    recovered = stack.ldr[2] ** spec.gamma / 8.0
    np.testing.assert_allclose(recovered[bright], 1.0 / 8.0)


def test_synthetic_offset_cross_correlation():
    spec = SyntheticScene(height=32, width=32, offsets=((3, -2), (0, 0)))
    stack = generate_synthetic(spec, np.random.default_rng(2))
    a = stack.ldr[0].mean(axis=2)
    b = stack.ldr[1].mean(axis=2)
    a, b = a - a.mean(), b - b.mean()
    best, best_shift = -np.inf, None
    for dy in range(-8, 9):
        for dx in range(-8, 9):
            score = np.sum(a * np.roll(b, (dy, dx), axis=(0, 1)))
            if score > best:
                best, best_shift = score, (dy, dx)
    assert best_shift == (3, -2)


def test_synthetic_is_diagonal_degradation_for_oracle():
    # sigma = 0, no clipping: L_i^gamma = gain_i * x*, so the exact solver recovers x*
    spec = SyntheticScene(height=8, width=8, gains=(0.25, 1.0, 0.9), noise=0.0)
    stack = generate_synthetic(spec, np.random.default_rng(3))
    ys = [L ** spec.gamma for L in stack.ldr]
    ops = [DegradationOp(np.full(ys[0].shape, g)) for g in spec.gains]
    problem = OracleProblem(y1=ys[0], y2=ys[1], y3=ys[2], d1=ops[0], d2=ops[1], d3=ops[2])
    out = solve(problem, SolveConfig(max_iters=50, tol=0.0, exact_align=True))
    np.testing.assert_allclose(out.x, stack.gt, atol=1e-9)


def test_stack_invariants():
    stack = synthetic_stack(noise=0.05)
    for L in stack.ldr:
        assert L.min() >= 0 and L.max() <= 1
    for H in stack.hdr:
        assert np.all(np.isfinite(H))
    np.testing.assert_allclose(stack.hdr[1], stack.ldr[1] ** 2.2, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        ExposureStack(ldr=(np.full((2, 2, 3), 1.5),) * 3, ev=(0, 0, 0))
