import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from manifold_sde.errors import DegenerateInputError, OutOfDomainError, ParameterError, ParseError
from manifold_sde.manifolds import (ManifoldSpec, PointCloud, load_cloud, project_sphere,
                                    sample_sphere, sample_swiss_roll, sample_torus, save_cloud,
                                    swiss_roll_embed, swiss_roll_latent, torus_embed, torus_latent)


def test_sphere_norms():
    c = sample_sphere(2, 1.0, 1000, seed=7)
    assert c.points.shape == (1000, 3)
    assert np.max(np.abs(np.linalg.norm(c.points, axis=1) - 1)) <= 1e-12
    assert c.intrinsic_dim == 2 and c.spec.kind == "sphere"


def test_sphere_mean_s7():
    c = sample_sphere(7, 1.0, 5000, seed=1)
    assert np.all(np.abs(c.points.mean(axis=0)) <= 3 / math.sqrt(5000))


def test_sphere_single_point():
    c = sample_sphere(2, 1.0, 1, seed=0)
    assert c.points.shape == (1, 3)
    assert abs(np.linalg.norm(c.points[0]) - 1) < 1e-12


def test_sphere_radius():
    c = sample_sphere(3, 2.5, 200, seed=4)
    assert np.max(np.abs(np.linalg.norm(c.points, axis=1) - 2.5)) <= 1e-9


@pytest.mark.parametrize("args", [(0, 1.0, 10), (2, -1.0, 10), (2, 1.0, 0)])
def test_sphere_bad_params(args):
    with pytest.raises(ParameterError):
        sample_sphere(*args, seed=0)


def test_sphere_rotation_invariance_in_law():
    # rotated sample vs fresh sample: per-coordinate two-sample t-tests,
    # Bonferroni-corrected at alpha=0.01
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    a = sample_sphere(2, 1.0, 4000, seed=11).points @ Q.T
    b = sample_sphere(2, 1.0, 4000, seed=12).points
    p = stats.ttest_ind(a, b, axis=0).pvalue
    assert np.all(p > 0.01 / 3)


def test_samplers_deterministic():
    for f in (lambda s: sample_sphere(3, 1.0, 50, s), lambda s: sample_torus(2, 1, 50, s),
              lambda s: sample_swiss_roll(1.5, 15.5, 20, 50, s)):
        assert np.array_equal(f(5).points, f(5).points)
        assert not np.array_equal(f(5).points, f(6).points)


def test_torus_implicit_equation():
    c = sample_torus(2.0, 1.0, 500, seed=3)
    x, y, z = c.points.T
    assert np.max(np.abs((np.hypot(x, y) - 2) ** 2 + z ** 2 - 1)) <= 1e-9


def test_torus_embed_origin():
    assert np.allclose(torus_embed(np.array([[0.0, 0.0]]), 2, 1)[0], [3, 0, 0], atol=1e-15)


def test_torus_area_weighting():
    # E[cos v] under density proportional to R + r cos v, by quadrature
    R, r = 2.0, 1.0
    num = integrate.quad(lambda v: math.cos(v) * (R + r * math.cos(v)), 0, 2 * math.pi)[0]
    den = integrate.quad(lambda v: R + r * math.cos(v), 0, 2 * math.pi)[0]
    c = sample_torus(R, r, 100_000, seed=0)
    cv = np.cos(c.latent[:, 1])
    assert abs(cv.mean() - num / den) <= 4 * cv.std() / math.sqrt(len(cv))


def test_torus_latent_round_trip():
    c = sample_torus(2.0, 0.5, 1000, seed=1)
    assert np.max(np.abs(torus_embed(torus_latent(c.points, 2.0), 2.0, 0.5) - c.points)) <= 1e-9


def test_torus_bad_radii():
    with pytest.raises(ParameterError):
        sample_torus(1.0, 1.0, 10, seed=0)


def test_swiss_roll_embed_and_inverse():
    assert np.allclose(swiss_roll_embed(np.array([[math.pi, 5.0]]))[0], [-math.pi, 5, 0], atol=1e-12)
    t, h = swiss_roll_latent(np.array([-math.pi, 5.0, 0.0]))
    assert abs(t - math.pi) < 1e-12 and h == 5.0


def test_swiss_roll_round_trip():
    c = sample_swiss_roll(1.5, 15.5, 20.0, 1000, seed=2)
    back = np.array([swiss_roll_latent(x) for x in c.points])
    assert np.max(np.abs(back - c.latent)) <= 1e-9


def test_swiss_roll_latent_lipschitz():
    c = sample_swiss_roll(1.5, 15.5, 20.0, 200, seed=5)
    for (t, h), x in zip(c.latent, c.points):
        # unit normal of the roll: cross product of the two tangents
        tt = np.array([math.cos(t) - t * math.sin(t), 0.0, math.sin(t) + t * math.cos(t)])
        nrm = np.cross(tt, [0.0, 1.0, 0.0])
        nrm /= np.linalg.norm(nrm)
        t2, h2 = swiss_roll_latent(x + 1e-6 * nrm)
        assert abs(t2 - t) <= 1e-5 and abs(h2 - h) <= 1e-5


def test_swiss_roll_off_surface():
    with pytest.raises(OutOfDomainError):
        swiss_roll_latent(np.array([0.0, 1.0, 0.0]))


def test_swiss_roll_uniform_sheet():
    # area-uniform: arclength coordinate s(t) and h uniform on the sheet
    lo, hi, H = 1.5, 15.5, 20.0
    c = sample_swiss_roll(lo, hi, H, 10_000, seed=9)

    def arclen(t):
        return 0.5 * (t * np.sqrt(1 + t * t) + np.arcsinh(t))

    s = (arclen(c.latent[:, 0]) - arclen(lo)) / (arclen(hi) - arclen(lo))
    counts, _, _ = np.histogram2d(s, c.latent[:, 1] / H, bins=10, range=[[0, 1], [0, 1]])
    chi2 = stats.chisquare(counts.ravel())
    assert chi2.pvalue > 0.01


def test_swiss_roll_bad_range():
    with pytest.raises(ParameterError):
        sample_swiss_roll(5.0, 5.0, 1.0, 10, seed=0)


def test_project_sphere():
    assert np.allclose(project_sphere([0, 0, 2.0]), [0, 0, 1])
    assert np.allclose(project_sphere([3, 4, 0.0]), [0.6, 0.8, 0])
    x = project_sphere([1.0, 2.0, 3.0])
    assert np.allclose(project_sphere(x), x, atol=1e-15)
    with pytest.raises(DegenerateInputError):
        project_sphere([0.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6).filter(lambda v: np.linalg.norm(v) > 1e-6),
       st.floats(0.1, 10))
def test_project_sphere_idempotent(v, R):
    p = project_sphere(v, R)
    assert abs(np.linalg.norm(p) - R) <= 1e-9 * R
    assert np.allclose(project_sphere(p, R), p, rtol=1e-12, atol=1e-12)


def test_spec_validation():
    with pytest.raises(ParameterError):
        ManifoldSpec("klein_bottle")
    with pytest.raises(ParameterError):
        ManifoldSpec.swiss_roll(1.0, 2.0, 0.0)
    s = ManifoldSpec.torus(2, 1)
    assert ManifoldSpec.from_dict(s.to_dict()) == s


def test_save_load_round_trip(tmp_path):
    for c in (sample_sphere(2, 1.0, 30, 0), sample_torus(2, 1, 30, 1), sample_swiss_roll(1.5, 15.5, 20, 30, 2)):
        p = tmp_path / "c.csv"
        save_cloud(p, c)
        d = load_cloud(p)
        assert np.array_equal(c.points, d.points)
        assert (c.latent is None and d.latent is None) or np.array_equal(c.latent, d.latent)
        assert d.spec == c.spec and d.intrinsic_dim == c.intrinsic_dim


def test_load_without_latent(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x1,x2\n0,1\n1,0\n")
    c = load_cloud(p)
    assert c.latent is None and c.points.shape == (2, 2)


def test_load_non_numeric(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x1,x2\n0,1\n1,abc\n")
    with pytest.raises(ParseError, match=r"line 3.*row 2"):
        load_cloud(p)


def test_load_bad_header(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("a,b\n0,1\n")
    with pytest.raises(ParseError, match="line 1"):
        load_cloud(p)


def test_pointcloud_rejects_nonfinite():
    with pytest.raises(ParameterError):
        PointCloud(np.array([[0.0, np.nan]]), 1)


def test_diameter_brute_force():
    c = sample_torus(2, 1, 300, seed=4)
    D = np.linalg.norm(c.points[:, None] - c.points[None], axis=2)
    assert abs(c.diameter() - D.max()) <= 1e-9
