import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from stitch4d.camera import Camera
from stitch4d.pipeline import PipelineConfig, gen_synthetic_scene

TWO_PLANE_SCENE = """\
resolution 192 128
frames 1
plane point=0,0,4 normal=0,0,-1 color=90,140,200
rect center=0.02,0.01,2 size=0.9,0.7 color=220,60,40 fg
camera view=src center=0,0,0
camera view=tgt center=0.25,0,0 yaw=-2
"""


def random_camera(rng, width=64, height=48) -> Camera:
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    f = rng.uniform(0.5, 2.0) * width
    return Camera(f, f * rng.uniform(0.9, 1.1), rng.uniform(0, width), rng.uniform(0, height), R, rng.normal(size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_cam():
    return Camera(1.0, 1.0, 0.0, 0.0)


@pytest.fixture(scope="session")
def two_plane_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("two_plane")
    spec = gen_synthetic_scene(TWO_PLANE_SCENE, root / "data")
    return root, spec


def make_config(root, tag, **kw) -> PipelineConfig:
    return PipelineConfig(
        data_dir=str(root / "data"), work_dir=str(root / f"work_{tag}"), out_dir=str(root / f"out_{tag}"),
        width=192, height=128, **kw,
    )


def random_scene_text(rng, width=48, height=32) -> str:
    """A tilted background plane with a few fronto-parallel rectangles in front."""
    n = rng.normal(scale=0.2, size=2)
    lines = [
        f"resolution {width} {height}",
        f"plane point=0,0,{rng.uniform(3, 6):.4f} normal={n[0]:.4f},{n[1]:.4f},-1 color=90,140,200",
    ]
    for _ in range(rng.integers(1, 4)):
        c = rng.integers(0, 256, 3)
        lines.append(
            f"rect center={rng.uniform(-1, 1):.4f},{rng.uniform(-0.7, 0.7):.4f},{rng.uniform(1.5, 2.5):.4f} "
            f"size={rng.uniform(0.2, 0.9):.4f},{rng.uniform(0.2, 0.9):.4f} color={c[0]},{c[1]},{c[2]} fg"
        )
    yaw, pitch = rng.uniform(-5, 5, 2)
    lines.append(f"camera view=a center=0,0,0 yaw={yaw:.3f} pitch={pitch:.3f}")
    return "\n".join(lines) + "\n"
