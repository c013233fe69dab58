import numpy as np
import pytest
from conftest import param, projected
from oracles import brute_nearest

from weakpoint import numerics as nx
from weakpoint.cloudstore import PointCloud, brute_force_neighbors, grid_subsample, radius_neighbors
from weakpoint.kpnet import (
    BottleneckBlock,
    CheckpointError,
    ClassificationBackbone,
    KernelDisposition,
    LayerPlan,
    SegmentationNet,
    build_kernel_disposition,
    build_pyramid,
    input_features,
    kernel_influence,
    kpconv_forward,
    load_checkpoint,
    load_state,
    save_checkpoint,
    stack_pyramids,
    state_dict,
    upsample_nearest,
)

GRAD_TOL = 1e-4
SMALL = dict(cell=0.2, kernel_points=5, num_classes=3)


def small_plan(kind="classifier"):
    widths = (4, 6, 8) if kind == "classifier" else (4, 4, 6, 6, 8)
    return LayerPlan(kind, widths=widths, **SMALL)


def cloud_points(n, seed, extent=1.2):
    return np.random.default_rng(seed).random((n, 3)) * extent


# ---------------------------------------------------------------------------
# kernel points and convolution


def test_disposition_single_point_is_origin():
    np.testing.assert_array_equal(build_kernel_disposition(1).points, np.zeros((1, 3)))


def test_disposition_deterministic_and_spread():
    a = build_kernel_disposition(15, seed=3)
    b = build_kernel_disposition(15, seed=3)
    np.testing.assert_array_equal(a.points, b.points)
    d = np.linalg.norm(a.points[:, None] - a.points[None], axis=2)
    assert d[np.triu_indices(15, 1)].min() > 0.4
    assert np.linalg.norm(a.points, axis=1).max() <= 1.0 + 1e-12


def test_kpconv_colocated_identity():
    disp = KernelDisposition(np.zeros((1, 3)), 0.3)
    pts = np.zeros((1, 3))
    nb = radius_neighbors(pts, pts, 1.0)
    feats = nx.Tensor([[0.3, -1.2, 2.0]])
    out = kpconv_forward(pts, pts, feats, nb, nx.Tensor(np.eye(3)[None]), disp, 1.0)
    np.testing.assert_array_equal(out.data, feats.data)


def test_kpconv_support_outside_influence_contributes_nothing():
    disp = KernelDisposition(np.zeros((1, 3)), 0.3)
    q = np.zeros((1, 3))
    sup = np.array([[0.0, 0, 0], [0.5, 0, 0]])  # 0.5 / r = 0.5 > sigma
    nb = radius_neighbors(q, sup, 1.0)
    assert nb.counts[0] == 2
    w = nx.Tensor(np.eye(2)[None])
    base = kpconv_forward(q, sup, nx.Tensor([[1.0, 2.0], [0.0, 0.0]]), nb, w, disp, 1.0)
    moved = kpconv_forward(q, sup, nx.Tensor([[1.0, 2.0], [50.0, -9.0]]), nb, w, disp, 1.0)
    np.testing.assert_array_equal(base.data, moved.data)


def test_kernel_influence_matches_loop():
    disp = build_kernel_disposition(5, seed=1)
    pts = cloud_points(25, 2)
    r = 0.5
    nb = brute_force_neighbors(pts, pts, r, cap=100)
    mat = kernel_influence(pts, pts, nb, disp, r).toarray()
    want = np.zeros_like(mat)
    for q in range(len(pts)):
        for j in nb.lists()[q]:
            for k in range(disp.size):
                y = (pts[j] - pts[q]) / r
                want[q * disp.size + k, j] += max(0.0, 1 - np.linalg.norm(y - disp.points[k]) / disp.sigma)
    np.testing.assert_allclose(mat, want, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_kpconv_gradient(seed):
    rng = np.random.default_rng(seed)
    disp = build_kernel_disposition(5, seed=seed)
    pts = cloud_points(30, seed, extent=1.0)
    nb = radius_neighbors(pts, pts, 0.5)
    feats, w = param(rng, 30, 3), param(rng, 5, 3, 2)
    fn = lambda: projected(kpconv_forward(pts, pts, feats, nb, w, disp, 0.5), seed)  # noqa: E731
    assert nx.gradient_error(fn, [feats, w]) < GRAD_TOL


def test_kpconv_permutation_equivariant():
    rng = np.random.default_rng(4)
    disp = build_kernel_disposition(7)
    pts = cloud_points(40, 4)
    feats = rng.standard_normal((40, 3))
    w = nx.Tensor(rng.standard_normal((7, 3, 2)))
    perm = rng.permutation(40)
    out = kpconv_forward(pts, pts, nx.Tensor(feats), radius_neighbors(pts, pts, 0.5), w, disp, 0.5).data
    p = pts[perm]
    out_p = kpconv_forward(p, p, nx.Tensor(feats[perm]), radius_neighbors(p, p, 0.5), w, disp, 0.5).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# blocks and geometry


def _geometry(n=40, seed=0, plan=None):
    plan = plan or small_plan()
    disp = build_kernel_disposition(plan.kernel_points, plan.kernel_seed, plan.sigma)
    return build_pyramid(cloud_points(n, seed), plan, disp), plan


@pytest.mark.parametrize("strided", [False, True])
def test_bottleneck_zero_expand_is_residual(strided):
    geo, plan = _geometry()
    rng = np.random.default_rng(0)
    block = BottleneckBlock(4, 4, plan, rng, strided=strided)
    block.expand.weight.data[:] = 0.0
    x = nx.Tensor(rng.standard_normal((len(geo.positions[0]), 4)))
    if strided:
        out = block(geo.strided[0], x, geo.pool[0])
        np.testing.assert_array_equal(out.data, nx.pool_max(x, geo.pool[0]).data)
    else:
        np.testing.assert_array_equal(block(geo.conv[0], x).data, x.data)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("strided", [False, True])
def test_bottleneck_gradient(seed, strided):
    geo, plan = _geometry(n=30, seed=seed)
    rng = np.random.default_rng(seed)
    block = BottleneckBlock(4, 6, plan, rng, strided=strided)
    for p in block.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    x = param(rng, len(geo.positions[0]), 4)
    inf = geo.strided[0] if strided else geo.conv[0]
    fn = lambda: projected(block(inf, x, geo.pool[0] if strided else None), seed)  # noqa: E731
    out = fn()
    assert np.all(np.isfinite(out.data))
    assert nx.gradient_error(fn, [x, *block.parameters()]) < GRAD_TOL


def test_strided_levels_shrink_on_lattice():
    g = np.arange(12) * 0.1
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    plan = small_plan()
    geo = build_pyramid(pts, plan, build_kernel_disposition(5))
    sizes = [len(p) for p in geo.positions]
    for fine, coarse, lvl in zip(sizes, sizes[1:], range(1, 3)):
        assert coarse <= fine / 2
        sub = grid_subsample(PointCloud(geo.positions[lvl - 1], np.zeros((fine, 3))), plan.level_cell(lvl))
        assert coarse == len(sub.cloud)


def test_stacked_batch_equals_separate_forward():
    plan = small_plan()
    rng = np.random.default_rng(0)
    net = ClassificationBackbone(plan, rng)
    geos = [_geometry(n, s, plan)[0] for n, s in ((35, 1), (50, 2), (20, 3))]
    feats = [rng.random((len(g.positions[0]), 4)) for g in geos]
    stacked = net(stack_pyramids(geos), nx.Tensor(np.vstack(feats))).data
    separate = np.vstack([net(g, nx.Tensor(f)).data for g, f in zip(geos, feats)])
    np.testing.assert_allclose(stacked, separate, atol=1e-12)


def test_backbone_gradient_small():
    geo, plan = _geometry(n=25, seed=9)
    rng = np.random.default_rng(9)
    net = ClassificationBackbone(plan, rng)
    x = param(rng, len(geo.positions[0]), 4)
    params = [x, net.stem.conv.weight, net.blocks[1].conv.weight, net.blocks[4].expand.weight]
    assert nx.gradient_error(lambda: projected(net(geo, x), 9), params) < GRAD_TOL


def test_segmentation_net_output_shape_and_flow():
    plan = small_plan("segmenter")
    geo, _ = _geometry(n=80, seed=5, plan=plan)
    rng = np.random.default_rng(5)
    net = SegmentationNet(plan, rng)
    out = net(geo, nx.Tensor(rng.random((80, 4))))
    assert out.shape == (80, plan.num_classes)
    nx.softmax_cross_entropy(out, rng.integers(0, 3, 80)).backward()
    assert net.stem.conv.weight.grad is not None and np.any(net.stem.conv.weight.grad != 0)


# ---------------------------------------------------------------------------
# upsampling and inputs


def test_upsample_cases():
    coarse = cloud_points(100, 1)
    feats = nx.Tensor(np.random.default_rng(1).random((100, 3)))
    np.testing.assert_array_equal(upsample_nearest(feats, coarse, coarse).data, feats.data)
    single = upsample_nearest(nx.Tensor([[1.0, 2.0]]), cloud_points(7, 2), np.zeros((1, 3))).data
    np.testing.assert_array_equal(single, np.tile([1.0, 2.0], (7, 1)))
    fine = cloud_points(400, 3)
    np.testing.assert_array_equal(upsample_nearest(feats, fine, coarse).data, feats.data[brute_nearest(fine, coarse)])


def test_input_features():
    cloud = PointCloud(np.zeros((3, 3)), [[1, 1, 1], [0, 0, 0], [0.2, 0.4, 0.6]])
    f = input_features(cloud).data
    assert f.shape == (3, 4)
    np.testing.assert_array_equal(f[0], [1, 1, 1, 1])
    np.testing.assert_array_equal(f[1], [0, 0, 0, 1])
    np.testing.assert_array_equal(input_features(cloud, black_indicator=True).data[:, 3], [0, 1, 0])


def test_plan_validation():
    with pytest.raises(NotImplementedError):
        LayerPlan("classifier", deformable=True)
    with pytest.raises(ValueError):
        LayerPlan("classifier", widths=(1, 2))
    assert LayerPlan("classifier").digest() != LayerPlan("classifier", cell=0.3).digest()


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    plan = small_plan("segmenter")
    net = SegmentationNet(plan, np.random.default_rng(0))
    path = tmp_path / "seg.ckpt"
    save_checkpoint(path, plan, state_dict(net), {"note": "x"})
    plan2, params, extra = load_checkpoint(path, expected=plan)
    assert plan2 == plan and extra == {"note": "x"}
    fresh = SegmentationNet(plan, np.random.default_rng(1))
    load_state(fresh, params)
    for (n1, a), (n2, b) in zip(net.named_parameters(), fresh.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_rejects_other_plan_and_garbage(tmp_path):
    plan = small_plan()
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, plan, {"w": np.ones((2, 2))})
    with pytest.raises(CheckpointError, match="different layer plan"):
        load_checkpoint(path, expected=LayerPlan("classifier", widths=(4, 6, 8), cell=0.3))
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError, match="missing"):
        load_state(SegmentationNet(small_plan("segmenter"), np.random.default_rng(0)), {"w": np.ones((2, 2))})
