"""Linear Monte-Carlo transport from sky maps to renderings, as an operator.

A scene is a pinhole camera, an optional infinite ground plane, and a few
spheres with diffuse, mirror, or glossy (Phong-blend) materials, lit purely by
the upper half of an equirectangular environment map. Because single-bounce
light transport is linear in the emitted radiance, tracing once per pixel
yields a sparse matrix of (texel index, weight, rgb tint) rows; rendering any
map is then a deterministic sparse matvec and the exact adjoint is the
transpose. Sampling is seeded per pixel so rebuilding a cache is bit-stable.

Environment maps here are upper crops: a (rows, width, 3) array covering the
sky hemisphere of a full (2*rows, width) equirectangular map.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import yaml

T_EPS = 1e-4

KINDS = ("diffuse", "mirror", "specular")


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float] = (0.0, 1.2, 4.0)
    look_at: tuple[float, float, float] = (0.0, 1.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 45.0
    width: int = 64
    height: int = 64


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)
    kind: str = "diffuse"
    roughness: float = 1.0


@dataclass(frozen=True)
class Plane:
    height: float = 0.0
    albedo: tuple[float, float, float] = (0.8, 0.8, 0.8)
    kind: str = "diffuse"
    roughness: float = 1.0


@dataclass(frozen=True)
class Scene:
    camera: Camera = Camera()
    spheres: tuple[Sphere, ...] = ()
    plane: Plane | None = None


def _vec3(value, what: str) -> tuple[float, float, float]:
    arr = [float(v) for v in value]
    if len(arr) != 3:
        raise ValueError(f"{what} must have 3 components, got {value!r}")
    return (arr[0], arr[1], arr[2])


def _material(data: dict, what: str) -> dict:
    kind = data.get("kind", "diffuse")
    if kind not in KINDS:
        raise ValueError(f"{what}: unknown material kind {kind!r}")
    roughness = float(data.get("roughness", 1.0))
    if not 0.0 <= roughness <= 1.0:
        raise ValueError(f"{what}: roughness {roughness} outside [0, 1]")
    albedo = _vec3(data.get("albedo", (0.8, 0.8, 0.8)), f"{what} albedo")
    if any(a < 0 for a in albedo):
        raise ValueError(f"{what}: negative albedo")
    return {"albedo": albedo, "kind": kind, "roughness": roughness}


def parse_scene(data: dict) -> Scene:
    if not isinstance(data, dict):
        raise ValueError("scene must be a mapping")
    cam_data = data.get("camera", {})
    camera = Camera(
        position=_vec3(cam_data.get("position", (0.0, 1.2, 4.0)), "camera position"),
        look_at=_vec3(cam_data.get("look_at", (0.0, 1.0, 0.0)), "camera look_at"),
        up=_vec3(cam_data.get("up", (0.0, 1.0, 0.0)), "camera up"),
        fov_deg=float(cam_data.get("fov", 45.0)),
        width=int(cam_data.get("width", 64)),
        height=int(cam_data.get("height", 64)),
    )
    if camera.width < 1 or camera.height < 1 or not 0 < camera.fov_deg < 180:
        raise ValueError("bad camera dimensions or field of view")
    plane = None
    if data.get("plane") is not None:
        pdata = data["plane"]
        plane = Plane(height=float(pdata.get("height", 0.0)), **_material(pdata, "plane"))
    spheres = []
    for i, sdata in enumerate(data.get("spheres", []) or []):
        radius = float(sdata.get("radius", 1.0))
        if radius <= 0:
            raise ValueError(f"sphere {i}: radius must be positive")
        spheres.append(
            Sphere(
                center=_vec3(sdata.get("center", (0.0, 1.0, 0.0)), f"sphere {i} center"),
                radius=radius,
                **_material(sdata, f"sphere {i}"),
            )
        )
    return Scene(camera=camera, spheres=tuple(spheres), plane=plane)


def load_scene(path) -> Scene:
    with open(path, "r") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValueError(f"cannot parse scene file {path}: {exc}") from exc
    return parse_scene(data)


def scene_signature(scene: Scene) -> str:
    """Canonical one-line description, used for transport cache keys."""
    cam = scene.camera
    parts = [
        f"cam={cam.position}|{cam.look_at}|{cam.up}|{cam.fov_deg}|{cam.width}x{cam.height}",
        f"plane={None if scene.plane is None else scene.plane}",
    ]
    parts += [f"sphere={s}" for s in scene.spheres]
    return ";".join(parts)


# --- direction/texel mapping ---------------------------------------------


def dir_to_uv(dirs: np.ndarray) -> np.ndarray:
    """Unit directions (n, 3) to equirectangular (u, v) in [0, 1).

    u wraps around the up axis; v = 0 at zenith, 0.5 at the horizon, so the
    upper hemisphere is exactly v < 0.5.
    """
    dirs = np.atleast_2d(dirs)
    u = 0.5 + np.arctan2(dirs[:, 0], -dirs[:, 2]) / (2.0 * np.pi)
    v = np.arccos(np.clip(dirs[:, 1], -1.0, 1.0)) / np.pi
    return np.stack([u % 1.0, v], axis=1)


def uv_to_dir(uv: np.ndarray) -> np.ndarray:
    """Inverse of dir_to_uv (up to the u wrap)."""
    uv = np.atleast_2d(uv)
    phi = (uv[:, 0] - 0.5) * 2.0 * np.pi
    theta = uv[:, 1] * np.pi
    sin_t = np.sin(theta)
    return np.stack([sin_t * np.sin(phi), np.cos(theta), -sin_t * np.cos(phi)], axis=1)


def bilinear_deposit(
    uvs: np.ndarray, env_w: int, env_rows: int
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear texel weights for (n, 2) uv samples on the upper crop.

    Columns wrap; rows above the zenith fold onto row 0; rows at or below the
    horizon are dropped so only upper-crop texels ever receive weight.
    Returns (n, 4) texel indices and weights, dropped entries carrying 0.
    """
    eh_full = 2 * env_rows
    x = uvs[:, 0] * env_w - 0.5
    y = uvs[:, 1] * eh_full - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    c0 = (x0.astype(np.int64)) % env_w
    c1 = (c0 + 1) % env_w
    r0 = np.maximum(y0.astype(np.int64), 0)
    r1 = y0.astype(np.int64) + 1

    cols = np.stack([c0, c1, c0, c1], axis=1)
    rows = np.stack([r0, r0, r1, r1], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    weights = np.where(rows < env_rows, weights, 0.0)
    idx = np.minimum(rows, env_rows - 1) * env_w + cols
    return idx, weights


# --- geometry --------------------------------------------------------------


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def reflect(d: np.ndarray, n: np.ndarray) -> np.ndarray:
    return d - 2.0 * np.dot(d, n) * n


def _onb(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing w to an orthonormal basis."""
    a = np.array([0.0, 1.0, 0.0]) if abs(w[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t = _normalize(np.cross(a, w))
    return t, np.cross(w, t)


def _sphere_roots(oc: np.ndarray, dirs: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Both quadratic roots (nan where the ray misses) for unit-length dirs."""
    b = dirs @ oc
    c0 = oc @ oc - radius * radius
    disc = b * b - c0
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    bad = disc < 0
    t_near = np.where(bad, np.nan, t_near)
    t_far = np.where(bad, np.nan, t_far)
    return t_near, t_far


def occluded(points: np.ndarray, dirs: np.ndarray, scene: Scene) -> np.ndarray:
    """True where a ray from points[i] along dirs[i] hits any geometry."""
    blocked = np.zeros(len(points), dtype=bool)
    for sphere in scene.spheres:
        oc = points - np.asarray(sphere.center)
        b = np.einsum("ij,ij->i", dirs, oc)
        c0 = np.einsum("ij,ij->i", oc, oc) - sphere.radius**2
        disc = b * b - c0
        hit = disc > 0
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b - root
        t_far = -b + root
        blocked |= hit & ((t_near > T_EPS) | (t_far > T_EPS))
    if scene.plane is not None:
        dy = dirs[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.plane.height - points[:, 1]) / dy
        blocked |= (dy != 0) & (t > T_EPS)
    return blocked


def _nearest_hit(origin: np.ndarray, direction: np.ndarray, scene: Scene):
    """Closest surface along one ray: (t, point, normal, material) or None."""
    best_t = np.inf
    best = None
    for sphere in scene.spheres:
        oc = origin - np.asarray(sphere.center)
        t_near, t_far = _sphere_roots(oc, direction[None, :], sphere.radius)
        for t in (float(t_near[0]), float(t_far[0])):
            if np.isfinite(t) and T_EPS < t < best_t:
                best_t = t
                point = origin + t * direction
                normal = (point - np.asarray(sphere.center)) / sphere.radius
                best = (t, point, normal, sphere)
    if scene.plane is not None and direction[1] != 0:
        t = (scene.plane.height - origin[1]) / direction[1]
        if T_EPS < t < best_t:
            point = origin + t * direction
            best = (t, point, np.array([0.0, 1.0, 0.0]), scene.plane)
    return best


def camera_rays(camera: Camera) -> np.ndarray:
    """Unit view directions for every pixel center, row-major (h*w, 3)."""
    fwd = _normalize(np.asarray(camera.look_at, dtype=np.float64) - np.asarray(camera.position))
    right = _normalize(np.cross(fwd, np.asarray(camera.up, dtype=np.float64)))
    up = np.cross(right, fwd)
    tan_half = np.tan(np.radians(camera.fov_deg) / 2.0)
    aspect = camera.width / camera.height
    cols = (2.0 * (np.arange(camera.width) + 0.5) / camera.width - 1.0) * tan_half * aspect
    rows = (1.0 - 2.0 * (np.arange(camera.height) + 0.5) / camera.height) * tan_half
    gx, gy = np.meshgrid(cols, rows)
    dirs = fwd[None, :] + gx.ravel()[:, None] * right[None, :] + gy.ravel()[:, None] * up[None, :]
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


# --- sampling ---------------------------------------------------------------


def _stratified_square(spp: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """spp jittered samples of the unit square on an sx * sy grid."""
    sx = max(int(np.sqrt(spp)), 1)
    while spp % sx:
        sx -= 1
    sy = spp // sx
    ix, iy = np.meshgrid(np.arange(sx), np.arange(sy))
    u1 = (ix.ravel() + rng.random(spp)) / sx
    u2 = (iy.ravel() + rng.random(spp)) / sy
    return u1, u2


def _cosine_dirs(normal: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Cosine-weighted hemisphere directions about `normal` (pdf cos/pi)."""
    t, b = _onb(normal)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - u1, 0.0))], axis=1)
    return local[:, 0:1] * t + local[:, 1:2] * b + local[:, 2:3] * normal


def _phong_dirs(axis: np.ndarray, exponent: float, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Directions from the normalized cos^e lobe around `axis`."""
    t, b = _onb(axis)
    cos_a = u1 ** (1.0 / (exponent + 1.0))
    sin_a = np.sqrt(np.maximum(1.0 - cos_a * cos_a, 0.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([sin_a * np.cos(phi), sin_a * np.sin(phi), cos_a], axis=1)
    return local[:, 0:1] * t + local[:, 1:2] * b + local[:, 2:3] * axis


# --- the operator -----------------------------------------------------------


@dataclass
class TransportOperator:
    """Sparse linear map from upper-crop env texels to rendered pixels.

    Row p of the matrix holds `counts[p]` entries; entry j contributes
    weight[j] * tint[j, k] * E[texel[j], k] to channel k of pixel p.
    """

    render_w: int
    render_h: int
    env_w: int
    env_rows: int
    spp: int
    seed: int
    counts: np.ndarray
    texel: np.ndarray
    weight: np.ndarray
    tint: np.ndarray
    _mats: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_pixels(self) -> int:
        return self.render_w * self.render_h

    @property
    def n_texels(self) -> int:
        return self.env_w * self.env_rows

    def _channel_mats(self, dtype) -> list[sp.csr_matrix]:
        key = np.dtype(dtype).str
        if key not in self._mats:
            indptr = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)
            mats = []
            for k in range(3):
                data = self.weight.astype(dtype) * self.tint[:, k].astype(dtype)
                mats.append(
                    sp.csr_matrix(
                        (data, self.texel.astype(np.int64), indptr),
                        shape=(self.n_pixels, self.n_texels),
                    )
                )
            self._mats[key] = mats
        return self._mats[key]


def render(op: TransportOperator, env: np.ndarray) -> np.ndarray:
    """Apply the operator: (env_rows, env_w, 3) -> (render_h, render_w, 3)."""
    env = np.asarray(env)
    if env.shape != (op.env_rows, op.env_w, 3):
        raise ValueError(f"env shape {env.shape} does not match operator "
                         f"({op.env_rows}, {op.env_w}, 3)")
    flat = env.reshape(-1, 3)
    mats = op._channel_mats(env.dtype)
    out = np.stack([mats[k] @ flat[:, k] for k in range(3)], axis=1)
    return out.reshape(op.render_h, op.render_w, 3)


def adjoint(op: TransportOperator, grad_render: np.ndarray) -> np.ndarray:
    """Exact transpose: pixel-space gradients back to env texels."""
    grad_render = np.asarray(grad_render)
    if grad_render.shape != (op.render_h, op.render_w, 3):
        raise ValueError(f"gradient shape {grad_render.shape} does not match operator "
                         f"({op.render_h}, {op.render_w}, 3)")
    flat = grad_render.reshape(-1, 3)
    mats = op._channel_mats(grad_render.dtype)
    out = np.stack([mats[k].T @ flat[:, k] for k in range(3)], axis=1)
    return out.reshape(op.env_rows, op.env_w, 3)


def build_transport(
    scene: Scene, env_w: int, env_rows: int, spp: int, seed: int
) -> TransportOperator:
    """Trace the scene once and record every pixel's texel weights.

    Primary rays that miss deposit a bilinear env lookup. Diffuse hits gather
    stratified cosine-hemisphere shadow rays (each unoccluded sky sample
    deposits albedo / spp). Mirrors reflect deterministically, following one
    secondary bounce. Glossy surfaces (roughness in (0, 1]) blend a Phong lobe
    with exponent max(0, 2/r^2 - 2) against a Lambertian gather, splitting the
    sample budget by the blend factor. Sample rays that reach the lower
    hemisphere or hit geometry past the recursion depth deposit nothing.
    Every pixel draws from its own (seed, pixel) random stream.
    """
    if env_w < 2 or env_rows < 1:
        raise ValueError(f"bad env grid {env_w} x {env_rows}")
    if spp < 1:
        raise ValueError(f"spp must be >= 1, got {spp}")
    cam = scene.camera
    origin = np.asarray(cam.position, dtype=np.float64)
    dirs = camera_rays(cam)
    n_pixels = cam.width * cam.height

    counts = np.zeros(n_pixels, dtype=np.uint32)
    texel_chunks: list[np.ndarray] = []
    weight_chunks: list[np.ndarray] = []
    tint_chunks: list[np.ndarray] = []

    def deposit(pixel: int, sample_dirs: np.ndarray, per_ray: np.ndarray, tint: np.ndarray):
        """Accumulate bilinear sky lookups for unit rays with weights per_ray."""
        uv = dir_to_uv(sample_dirs)
        upper = uv[:, 1] < 0.5
        if not np.any(upper):
            return
        idx4, w4 = bilinear_deposit(uv[upper], env_w, env_rows)
        flat_w = (w4 * per_ray[upper, None]).ravel()
        flat_idx = idx4.ravel()
        live = flat_w > 0
        if not np.any(live):
            return
        uniq, inverse = np.unique(flat_idx[live], return_inverse=True)
        summed = np.bincount(inverse, weights=flat_w[live])
        counts[pixel] += len(uniq)
        texel_chunks.append(uniq.astype(np.uint32))
        weight_chunks.append(summed.astype(np.float32))
        tint_chunks.append(np.tile(tint.astype(np.float32), (len(uniq), 1)))

    def gather_cosine(pixel, point, normal, tint, albedo, budget, weight_scale, rng):
        if budget < 1:
            return
        u1, u2 = _stratified_square(budget, rng)
        sdirs = _cosine_dirs(normal, u1, u2)
        free = ~occluded(np.broadcast_to(point, sdirs.shape), sdirs, scene)
        if not np.any(free):
            return
        per_ray = np.full(free.sum(), weight_scale / budget)
        deposit(pixel, sdirs[free], per_ray, tint * albedo)

    def gather_phong(pixel, point, normal, axis, exponent, tint, albedo, budget, weight_scale, rng):
        if budget < 1:
            return
        u1, u2 = _stratified_square(budget, rng)
        sdirs = _phong_dirs(axis, exponent, u1, u2)
        above = (sdirs @ normal) > 0
        if not np.any(above):
            return
        sdirs = sdirs[above]
        free = ~occluded(np.broadcast_to(point, sdirs.shape), sdirs, scene)
        if not np.any(free):
            return
        per_ray = np.full(free.sum(), weight_scale / budget)
        deposit(pixel, sdirs[free], per_ray, tint * albedo)

    def shade(pixel, point, normal, direction, material, tint, depth, rng):
        albedo = np.asarray(material.albedo, dtype=np.float64)
        kind = material.kind
        rough = material.roughness
        if kind == "specular" and rough == 0.0:
            kind = "mirror"

        if kind == "mirror":
            rdir = reflect(direction, normal)
            hit = _nearest_hit(point, rdir, scene)
            if hit is None:
                deposit(pixel, rdir[None, :], np.array([1.0]), tint * albedo)
            elif depth < 2:
                _, hpoint, hnormal, hmat = hit
                shade(pixel, hpoint, hnormal, rdir, hmat, tint * albedo, depth + 1, rng)
            return
        if kind == "diffuse":
            gather_cosine(pixel, point, normal, tint, albedo, spp, 1.0, rng)
            return
        # Glossy blend: (1 - r) * Phong lobe + r * Lambertian.
        lobe_budget = int(round((1.0 - rough) * spp))
        diff_budget = spp - lobe_budget
        exponent = max(0.0, 2.0 / (rough * rough) - 2.0)
        rdir = reflect(direction, normal)
        gather_phong(pixel, point, normal, rdir, exponent, tint, albedo,
                     lobe_budget, 1.0 - rough, rng)
        gather_cosine(pixel, point, normal, tint, albedo, diff_budget, rough, rng)

    white = np.ones(3)
    for pixel in range(n_pixels):
        rng = np.random.default_rng((seed, pixel))
        direction = dirs[pixel]
        hit = _nearest_hit(origin, direction, scene)
        if hit is None:
            deposit(pixel, direction[None, :], np.array([1.0]), white)
            continue
        _, point, normal, material = hit
        shade(pixel, point, normal, direction, material, white, 1, rng)

    texel = np.concatenate(texel_chunks) if texel_chunks else np.zeros(0, dtype=np.uint32)
    weight = np.concatenate(weight_chunks) if weight_chunks else np.zeros(0, dtype=np.float32)
    tint = np.concatenate(tint_chunks) if tint_chunks else np.zeros((0, 3), dtype=np.float32)
    return TransportOperator(
        render_w=cam.width, render_h=cam.height, env_w=env_w, env_rows=env_rows,
        spp=spp, seed=seed, counts=counts, texel=texel, weight=weight, tint=tint,
    )


TRANSPORT_MAGIC = b"ENVTRANS"
TRANSPORT_VERSION = 1
_T_HEADER = struct.Struct("<8sIIIIIIQQQ")


def save_transport(path, op: TransportOperator) -> None:
    """Binary cache: header, per-pixel counts, then (texel, weight, tint) arrays."""
    header = _T_HEADER.pack(
        TRANSPORT_MAGIC, TRANSPORT_VERSION,
        op.render_w, op.render_h, op.env_w, op.env_rows, op.spp,
        op.seed, len(op.counts), len(op.texel),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(op.counts.astype("<u4").tobytes())
        fh.write(op.texel.astype("<u4").tobytes())
        fh.write(op.weight.astype("<f4").tobytes())
        fh.write(np.ascontiguousarray(op.tint, dtype="<f4").tobytes())


def load_transport(path) -> TransportOperator:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _T_HEADER.size:
        raise ValueError(f"transport cache too short: {len(blob)} bytes")
    (magic, version, render_w, render_h, env_w, env_rows, spp,
     seed, n_pixels, n_entries) = _T_HEADER.unpack_from(blob)
    if magic != TRANSPORT_MAGIC:
        raise ValueError(f"not a transport cache (magic {magic!r})")
    if version != TRANSPORT_VERSION:
        raise ValueError(f"unsupported transport cache version {version}")
    if n_pixels != render_w * render_h:
        raise ValueError("pixel count does not match render dimensions")
    expect = _T_HEADER.size + 4 * n_pixels + 4 * n_entries + 4 * n_entries + 12 * n_entries
    if len(blob) != expect:
        raise ValueError(f"transport cache has {len(blob)} bytes, expected {expect}")

    offset = _T_HEADER.size
    counts = np.frombuffer(blob, dtype="<u4", count=n_pixels, offset=offset).copy()
    offset += 4 * n_pixels
    texel = np.frombuffer(blob, dtype="<u4", count=n_entries, offset=offset).copy()
    offset += 4 * n_entries
    weight = np.frombuffer(blob, dtype="<f4", count=n_entries, offset=offset).copy()
    offset += 4 * n_entries
    tint = np.frombuffer(blob, dtype="<f4", count=3 * n_entries, offset=offset).reshape(n_entries, 3).copy()
    if int(counts.sum()) != n_entries:
        raise ValueError("per-pixel counts do not sum to the entry count")
    if n_entries and int(texel.max()) >= env_w * env_rows:
        raise ValueError("texel index outside the environment grid")
    return TransportOperator(
        render_w=render_w, render_h=render_h, env_w=env_w, env_rows=env_rows,
        spp=spp, seed=seed, counts=counts, texel=texel, weight=weight, tint=tint,
    )


def transport_cache_key(scene: Scene, env_w: int, env_rows: int, spp: int, seed: int) -> str:
    """Content hash identifying one operator build."""
    text = f"{scene_signature(scene)};env={env_w}x{env_rows};spp={spp};seed={seed}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
