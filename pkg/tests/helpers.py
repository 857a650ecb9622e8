"""Shared builders for tests."""

import numpy as np

from canonface.geometry import Camera, random_rotation


def random_camera(rng, width=8, height=8):
    return Camera(fx=rng.uniform(20, 80), fy=rng.uniform(20, 80),
                  cx=rng.uniform(0, width), cy=rng.uniform(0, height),
                  rotation=random_rotation(rng), center=rng.normal(size=3),
                  width=width, height=height)


def identity_camera(f=1.0, c=0.5, size=1):
    return Camera(f, f, c, c, np.eye(3), np.zeros(3), size, size)
