"""Small scenes and cameras shared by the test modules."""

from pathlib import Path

from vfnerf.scene import Camera, Intrinsics, Plane, Scene

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
BOX_SCENE = CONFIGS / "box_room_scene.yaml"
BOX_CAMERAS = CONFIGS / "box_room_cameras.yaml"
BOX_TRAIN = CONFIGS / "box_room_train.yaml"
SMOKE_TRAIN = CONFIGS / "smoke_train.yaml"


def plane_scene(normal=(0.0, 0.0, 1.0), offset=0.0, near=0.05, far=10.0) -> Scene:
    return Scene((Plane(normal, offset),), (-5.0, -5.0, -5.0), (5.0, 5.0, 5.0), near=near, far=far, center=(0.0, 0.0, 1.0))


def small_camera(width=8, height=6, eye=(0.0, 0.0, 1.5), target=(1.0, 0.2, 1.0)) -> Camera:
    return Camera.look_at(Intrinsics(6.0, 6.0, width / 2, height / 2, width, height), eye, target)
