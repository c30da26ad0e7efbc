"""Flat-shaded perspective renderer for synthetic road scenes.

World frame: intersection centre at the origin, ground plane y = 0, the
approach road runs along -z and the vehicle drives towards +z.  Arms are
axis-aligned strips of width ``road_width``.
"""

from __future__ import annotations

import numpy as np

# arms present per intersection class (1-based): (ahead, left, right)
CLASS_ARMS = {
    1: (True, False, False),
    2: (False, False, True),
    3: (False, True, False),
    4: (True, False, True),
    5: (True, True, False),
    6: (False, True, True),
    7: (True, True, True),
}


class ValueNoise:
    """Smooth multi-octave lattice noise, periodic with the lattice size."""

    def __init__(self, rng: np.random.Generator, size: int = 64, octaves: int = 3):
        self.size = size
        self.octaves = octaves
        self.lattices = [rng.random((size, size)) for _ in range(octaves)]

    def __call__(self, x: np.ndarray, z: np.ndarray, scale: float = 1.0) -> np.ndarray:
        out = np.zeros(np.shape(x))
        amp, total = 1.0, 0.0
        for o, lat in enumerate(self.lattices):
            fx = x * scale * (2**o)
            fz = z * scale * (2**o)
            x0 = np.floor(fx)
            z0 = np.floor(fz)
            tx = fx - x0
            tz = fz - z0
            tx = tx * tx * (3 - 2 * tx)
            tz = tz * tz * (3 - 2 * tz)
            i0 = x0.astype(np.int64) % self.size
            j0 = z0.astype(np.int64) % self.size
            i1 = (i0 + 1) % self.size
            j1 = (j0 + 1) % self.size
            v = ((1 - tx) * ((1 - tz) * lat[i0, j0] + tz * lat[i0, j1])
                 + tx * ((1 - tz) * lat[i1, j0] + tz * lat[i1, j1]))
            out += amp * v
            total += amp
            amp *= 0.5
        return out / total


def camera_rays(height: int, width: int, hfov_deg: float, pitch_deg: float, yaw_deg: float, supersample: int = 1):
    """Unit-free world ray directions (H*ss, W*ss, 3) for a pinhole camera.

    Positive yaw turns the camera to the right (towards +x).
    """
    hs, ws = height * supersample, width * supersample
    f = 0.5 * ws / np.tan(np.radians(hfov_deg) / 2)
    u = (np.arange(ws) + 0.5) - ws / 2
    v = (np.arange(hs) + 0.5) - hs / 2
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu / f, -vv / f, np.ones_like(uu)], axis=-1)
    p = np.radians(pitch_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    y = np.radians(yaw_deg)
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    return d @ (ry @ rx).T


def road_mask(x: np.ndarray, z: np.ndarray, arms: tuple[bool, bool, bool], half: float) -> np.ndarray:
    ahead, left, right = arms
    inside_x = np.abs(x) <= half
    inside_z = np.abs(z) <= half
    m = inside_x & (z <= half)
    if ahead:
        m |= inside_x & (z >= 0)
    if left:
        m |= inside_z & (x <= 0)
    if right:
        m |= inside_z & (x >= 0)
    return m


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    return img.reshape(h, factor, w, factor, -1).mean(axis=(1, 3)).reshape((h, w) + img.shape[2:])


def render_view(
    *,
    size: tuple[int, int],
    cam_pos: tuple[float, float, float],
    yaw_deg: float,
    pitch_deg: float,
    hfov_deg: float,
    arms: tuple[bool, bool, bool],
    road_width: float,
    noise: ValueNoise,
    palette: dict,
    supersample: int = 2,
    fog_distance: float = 80.0,
) -> np.ndarray:
    """Render one RGB view in [0, 1]; sky texture depends only on azimuth."""
    h, w = size
    rays = camera_rays(h, w, hfov_deg, pitch_deg, yaw_deg, supersample)
    cx, cy, cz = cam_pos
    dy = rays[..., 1]
    ground = dy < -1e-6
    t = np.where(ground, cy / np.maximum(-dy, 1e-6), 0.0)
    gx = cx + t * rays[..., 0]
    gz = cz + t * rays[..., 2]
    dist = t * np.linalg.norm(rays, axis=-1)

    tex = noise(gx, gz, scale=palette["texture_scale"])
    on_road = road_mask(gx, gz, arms, road_width / 2)
    grass = np.asarray(palette["ground"])[None, None, :] * (0.6 + 0.8 * tex[..., None])
    road = np.asarray(palette["road"])[None, None, :] * (0.85 + 0.3 * tex[..., None])
    img = np.where(on_road[..., None], road, grass)
    fog = np.clip(dist / fog_distance, 0, 1)[..., None]
    img = img * (1 - fog) + np.asarray(palette["haze"])[None, None, :] * fog

    azimuth = np.arctan2(rays[..., 0], rays[..., 2])
    elev = np.arctan2(dy, np.hypot(rays[..., 0], rays[..., 2]))
    skyline = noise(azimuth * 12.0, np.zeros_like(azimuth) + 7.5, scale=1.0) * 0.35
    building = elev < skyline
    sky = np.asarray(palette["sky"])[None, None, :] * (0.9 + 0.1 * np.clip(elev, 0, 1)[..., None])
    bld_tex = noise(azimuth * 40.0, elev * 40.0, scale=1.0)
    bld = np.asarray(palette["building"])[None, None, :] * (0.5 + 0.8 * bld_tex[..., None])
    upper = np.where(building[..., None], bld, sky)
    img = np.where(ground[..., None], img, upper)
    return np.clip(downsample(img, supersample), 0.0, 1.0)


def random_palette(rng: np.random.Generator, strength: float = 1.0) -> dict:
    j = lambda base, amt: np.clip(np.asarray(base) + strength * amt * (rng.random(3) - 0.5), 0, 1)  # noqa: E731
    return {
        "ground": j((0.35, 0.5, 0.25), 0.25),
        "road": j((0.45, 0.45, 0.47), 0.15),
        "haze": j((0.7, 0.72, 0.75), 0.1),
        "sky": j((0.6, 0.75, 0.95), 0.15),
        "building": j((0.5, 0.42, 0.38), 0.3),
        "texture_scale": 0.6 + 0.4 * rng.random(),
    }
