import numpy as np
import pytest

from fifsplat.camera import Camera
from fifsplat.core import GaussianSet, logit


def make_camera(size=32, eye=(0.0, -0.4, -3.0), target=(0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0), fov=50.0,
                **kw):
    return Camera.look_at(eye, target, up, size, size, fov, **kw)


def random_scene(rng, n, spread=0.6, scale=(0.05, 0.35), alpha=(0.05, 0.95), vp=(0.0, 0.3),
                 dtype=np.float64):
    """Random splats clustered near the origin, in front of ``make_camera``."""
    means = rng.uniform(-spread, spread, size=(n, 3))
    scales = rng.uniform(*scale, size=(n, 2))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    a = rng.uniform(*alpha, size=n)
    colors = rng.uniform(0, 1, size=(n, 3))
    thr = rng.uniform(*vp, size=n)
    return GaussianSet(means, scales, q, logit(a), colors, thr).astype(dtype)


def facing_splat(center, scale, alpha, color=(1.0, 1.0, 1.0), vp=0.0):
    """Splat with identity rotation: its plane is z = const, facing a camera on the z axis."""
    return GaussianSet(np.array([center], float), np.array([scale], float),
                       np.array([[1.0, 0, 0, 0]]), np.array([logit(alpha)]),
                       np.array([color], float), np.array([vp], float))


def axis_camera(size=33, z=-2.0, fov=60.0, **kw):
    """Camera on the -z axis looking at the origin; the center pixel lies on the axis."""
    return make_camera(size, eye=(0.0, 0.0, z), up=(0.0, -1.0, 0.0), fov=fov, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plane_sphere_runs(tmp_path_factory):
    """Trained full / no-global / no-local models on the plane+sphere scene (shared by slow checks)."""
    from fifsplat.config import TrainConfig
    from fifsplat.synthetic import generate_synthetic, plane_sphere_spec
    from fifsplat.trainer import train

    ds = generate_synthetic(plane_sphere_spec(), seed=0)
    runs = {}
    for name, kw in (("full", {}), ("no_global", {"use_global_fif": False}),
                     ("no_local", {"use_local_fif": False})):
        cfg = TrainConfig(iterations=2000, seed=0, **kw)
        out = tmp_path_factory.mktemp(f"run_{name}")
        runs[name] = (cfg, train(cfg, ds, out_dir=out), out)
    return ds, runs


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
