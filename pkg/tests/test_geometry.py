import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from endodepthl.geometry import (CameraIntrinsics, SampleCoords, axis_angle_to_matrix, backproject,
                                 bilinear_sample, compose, invert_pose, make_pixel_grid, pose_from_vector,
                                 pose_matrix, project, synthesize_view, transform_points)

from _fd import grad_rel_error

pytestmark = pytest.mark.usefixtures("float64")


def k_simple(fx=100.0, fy=100.0, cx=64.0, cy=64.0, w=128, h=128):
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def test_pixel_grid_2x2():
    g = make_pixel_grid(CameraIntrinsics(1, 1, 0, 0, 2, 2))
    coords = {tuple(int(c) for c in g[:, v, u]) for v in range(2) for u in range(2)}
    assert coords == {(0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)}


def test_pixel_grid_1x1():
    g = make_pixel_grid(CameraIntrinsics(1, 1, 0, 0, 1, 1))
    assert g.shape == (3, 1, 1)
    assert g[:, 0, 0].tolist() == [0, 0, 1]


def test_pixel_grid_320x256_counts():
    g = make_pixel_grid(CameraIntrinsics(200, 200, 160, 128, 320, 256))
    flat = g.reshape(3, -1)
    assert flat.shape[1] == 81920
    # counting oracle: every (u, v) exactly once
    pairs = set(map(tuple, flat[:2].T.long().tolist()))
    assert len(pairs) == 320 * 256
    assert flat[0].max() == 319 and flat[1].max() == 255
    assert torch.all(flat[2] == 1)


@pytest.mark.parametrize("bad", [dict(fx=0), dict(fy=-1), dict(cx=128), dict(cy=-0.5)])
def test_intrinsics_invariants(bad):
    args = dict(fx=10, fy=10, cx=5, cy=5, width=128, height=128)
    args.update(bad)
    with pytest.raises(ValueError):
        CameraIntrinsics(**args)


def test_backproject_identity_k():
    k = CameraIntrinsics(1, 1, 0, 0, 4, 3)
    pts = backproject(torch.ones(1, 1, 3, 4), k)
    grid = make_pixel_grid(k)
    assert torch.equal(pts[0], grid)


def test_backproject_principal_point_on_axis():
    k = CameraIntrinsics(37.0, 52.0, 5.0, 3.0, 10, 8)
    depth = torch.full((1, 1, 8, 10), 7.5)
    pts = backproject(depth, k)
    assert pts[0, :, 3, 5].tolist() == pytest.approx([0.0, 0.0, 7.5], abs=1e-12)


def test_backproject_hand_value():
    k = k_simple()
    depth = torch.full((1, 1, 128, 128), 10.0)
    pts = backproject(depth, k)
    assert pts[0, :, 64, 74].tolist() == pytest.approx([1.0, 0.0, 10.0], abs=1e-12)


def test_backproject_dimension_mismatch():
    k = CameraIntrinsics(1, 1, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        backproject(torch.ones(1, 1, 4, 4), k, make_pixel_grid(CameraIntrinsics(1, 1, 0, 0, 5, 4)))


def test_transform_identity_and_translation():
    pts = torch.randn(2, 3, 4, 5)
    assert torch.equal(transform_points(pts, torch.eye(4)), pts)
    pose = pose_matrix(torch.eye(3), torch.tensor([0.0, 0.0, 5.0]))
    x = torch.zeros(1, 3, 1, 1)
    x[0, 2] = 10
    assert transform_points(x, pose)[0, :, 0, 0].tolist() == [0, 0, 15]


def test_transform_rotation_about_z():
    c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
    r = torch.tensor([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    x = torch.tensor([1.0, 0, 0]).view(1, 3, 1, 1)
    out = transform_points(x, pose_matrix(r, torch.zeros(3)))
    assert out.flatten().tolist() == pytest.approx([0, 1, 0], abs=1e-15)


def test_transform_composition():
    g = torch.Generator().manual_seed(0)
    t1 = pose_from_vector(torch.randn(6, generator=g))
    t2 = pose_from_vector(torch.randn(6, generator=g))
    x = torch.randn(1, 3, 6, 7, generator=g)
    a = transform_points(transform_points(x, t1), t2)
    b = transform_points(x, compose(t2, t1))
    assert (a - b).abs().max() < 1e-6


def test_pose_helpers_are_rigid():
    r = axis_angle_to_matrix(torch.tensor([0.3, -0.2, 0.9]))
    assert (r.T @ r - torch.eye(3)).abs().max() < 1e-12
    assert torch.linalg.det(r).item() == pytest.approx(1.0, abs=1e-12)
    pose = pose_matrix(r, torch.tensor([1.0, 2.0, 3.0]))
    assert (compose(invert_pose(pose), pose) - torch.eye(4)).abs().max() < 1e-12


def test_project_optical_axis_and_hand_value():
    k = k_simple()
    pts = torch.zeros(1, 3, 1, 2)
    pts[0, :, 0, 0] = torch.tensor([0.0, 0.0, 3.0])
    pts[0, :, 0, 1] = torch.tensor([1.0, 0.0, 10.0])
    uv, valid = project(pts, k)
    assert uv[0, :, 0, 0].tolist() == [64.0, 64.0]
    assert uv[0, :, 0, 1].tolist() == pytest.approx([74.0, 64.0], abs=1e-12)
    assert valid.all()


def test_project_invalid_points():
    k = CameraIntrinsics(10, 10, 2, 2, 5, 5)
    pts = torch.tensor([[0.0, 0, 1e-5], [0, 0, -1], [10, 0, 1], [0, 0, 1]]).T.reshape(1, 3, 1, 4)
    uv, valid = project(pts, k)
    assert valid.flatten().tolist() == [False, False, False, True]
    assert torch.isfinite(uv).all()


@settings(max_examples=30, deadline=None)
@given(fx=st.floats(20, 500), fy=st.floats(20, 500), cxr=st.floats(0, 0.999), cyr=st.floats(0, 0.999),
       seed=st.integers(0, 2 ** 16))
def test_round_trip_property(fx, fy, cxr, cyr, seed):
    w, h = 17, 11
    k = CameraIntrinsics(fx, fy, cxr * w, cyr * h, w, h)
    g = torch.Generator().manual_seed(seed)
    depth = 0.1 + 100 * torch.rand(1, 1, h, w, generator=g)
    uv, valid = project(backproject(depth, k), k)
    grid = make_pixel_grid(k)
    assert (uv[0] - grid[:2]).abs().max() < 1e-5
    assert valid.all()


def test_bilinear_identity_and_midpoint():
    img = torch.rand(2, 3, 5, 6)
    grid = make_pixel_grid(CameraIntrinsics(1, 1, 0, 0, 6, 5))[:2]
    uv = grid.unsqueeze(0).expand(2, -1, -1, -1)
    out, valid = bilinear_sample(img, SampleCoords(uv, torch.ones(2, 1, 5, 6, dtype=torch.bool)))
    assert torch.equal(out, img)
    assert valid.all()

    two = torch.tensor([[[[0.0, 1.0]]]])
    uv = torch.tensor([0.5, 0.0]).view(1, 2, 1, 1)
    out, valid = bilinear_sample(two, SampleCoords(uv, torch.ones(1, 1, 1, 1, dtype=torch.bool)))
    assert out.item() == 0.5 and valid.item()


def test_bilinear_out_of_bounds():
    img = torch.ones(1, 1, 4, 4)
    uv = torch.tensor([[-0.5, 1.0], [3.5, 1.0], [1.0, 3.01], [3.0, 3.0]]).T.reshape(1, 2, 1, 4)
    out, valid = bilinear_sample(img, SampleCoords(uv, torch.ones(1, 1, 1, 4, dtype=torch.bool)))
    assert valid.flatten().tolist() == [False, False, False, True]
    assert out.flatten().tolist() == [0, 0, 0, 1]


def test_bilinear_respects_input_validity():
    img = torch.ones(1, 1, 4, 4)
    uv = torch.ones(1, 2, 1, 1)
    out, valid = bilinear_sample(img, SampleCoords(uv, torch.zeros(1, 1, 1, 1, dtype=torch.bool)))
    assert not valid.any() and out.item() == 0


def test_synthesize_identity_warp():
    g = torch.Generator().manual_seed(1)
    k = CameraIntrinsics(40, 40, 15.5, 11.5, 32, 24)
    for _ in range(5):
        img = torch.rand(1, 3, 24, 32, generator=g)
        depth = 1 + 10 * torch.rand(1, 1, 24, 32, generator=g)
        out, valid = synthesize_view(img, depth, torch.eye(4).unsqueeze(0), k)
        assert valid.all()
        assert (out - img).abs().max() < 1e-6


def test_synthesize_dimension_mismatch():
    k = CameraIntrinsics(40, 40, 15.5, 11.5, 32, 24)
    with pytest.raises(ValueError):
        synthesize_view(torch.rand(1, 3, 24, 32), torch.ones(1, 1, 12, 16), torch.eye(4), k)


def _random_coords(g, h, w):
    u = 0.5 + (w - 2) * torch.rand(1, 1, h, w, generator=g)
    v = 0.5 + (h - 2) * torch.rand(1, 1, h, w, generator=g)
    return torch.cat([u, v], 1)


def test_bilinear_gradients():
    g = torch.Generator().manual_seed(2)
    img = torch.rand(1, 2, 8, 8, generator=g)
    uv = _random_coords(g, 8, 8)
    ok = torch.ones(1, 1, 8, 8, dtype=torch.bool)
    weights = torch.rand(1, 2, 8, 8, generator=g)
    assert grad_rel_error(lambda x: (bilinear_sample(x, SampleCoords(uv, ok))[0] * weights).sum(), img) < 1e-4
    assert grad_rel_error(lambda c: (bilinear_sample(img, SampleCoords(c, ok))[0] * weights).sum(), uv) < 1e-4


def _smooth_scene(g, h=8, w=8):
    v, u = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                          indexing="ij")
    img = torch.stack([0.5 + 0.3 * torch.sin(0.7 * u + 0.4 * v), 0.5 + 0.2 * torch.cos(0.5 * u - 0.6 * v),
                       0.4 + 0.1 * torch.sin(0.3 * u * v / 4)]).unsqueeze(0)
    depth = 5 + torch.rand(1, 1, h, w, generator=g)
    return img, depth


def test_synthesize_view_gradients():
    g = torch.Generator().manual_seed(3)
    img, depth = _smooth_scene(g)
    k = CameraIntrinsics(8, 8, 3.5, 3.5, 8, 8)
    vec = torch.tensor([0.01, -0.02, 0.015, 0.05, -0.04, 0.1])
    weights = torch.rand(1, 3, 8, 8, generator=g)

    def by_depth(d):
        out, _ = synthesize_view(img, d, pose_from_vector(vec).unsqueeze(0), k)
        return (out * weights).sum()

    def by_pose(p):
        out, _ = synthesize_view(img, depth, pose_from_vector(p).unsqueeze(0), k)
        return (out * weights).sum()

    assert grad_rel_error(by_depth, depth) < 1e-4
    assert grad_rel_error(by_pose, vec) < 1e-4
