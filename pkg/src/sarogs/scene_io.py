"""Datasets, the synthetic teacher scene, images, and the SARO checkpoint format.

Manifest (``manifest.json``)::

    {
      "format": "saro-manifest", "version": 1,
      "bbox": [[xmin, ymin, zmin], [xmax, ymax, zmax]],
      "background": [r, g, b],
      "cameras": [{"width": W, "height": H, "fx": .., "fy": .., "cx": .., "cy": .., "near": ..}],
      "frames": [{"camera": 0, "time": 0.25, "c2w": [16 floats, row-major],
                  "image": "images/00000.png", "split": "train"}]
    }

``cameras`` holds intrinsics only; every frame carries its own camera-to-world
pose (OpenCV axes), so monocular and multi-view captures share one layout.

Checkpoint (little-endian)::

    b"SARO"  u32 version  u32 section_count
    section table, one entry per section:
        u16 name_len, name (utf-8), u8 kind (0 = float32 array, 1 = raw bytes),
        u8 ndim, ndim * u32 dims, u64 offset, u64 nbytes
    payloads at the recorded absolute offsets

Sections: ``param/<state_dict key>`` for every model tensor (the field stores
level-0 planes only), ``config`` (model config JSON), ``meta`` (JSON with
iteration, seed, profile) and ``rng`` (JSON numpy bit-generator state).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .gaussian4d import GaussianCloud, num_sh_coeffs, rgb_to_sh, write_ply_points
from .model import ModelConfig, SaroModel
from .rasterizer import Camera, look_at, project_splat, rasterize_oracle
from .temporal import DEFAULT_K, TemporalState, state_function

MAGIC = b"SARO"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
TEACHER_NAME = "teacher.json"

_F32, _BYTES = 0, 1


# ---------------------------------------------------------------- images

def write_png(path, image):
    arr = np.asarray(image, dtype=np.float64)
    rgb8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_pfm(path, image):
    """Color PFM, little-endian float32, rows stored bottom to top."""
    arr = np.asarray(image, dtype="<f4")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise ValueError(f"{path}: not a color PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 3 * 4), dtype=dtype)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated PFM payload")
    return data.reshape(h, w, 3)[::-1].astype(np.float32)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)


def write_image(path, image):
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, image)
    else:
        write_png(path, image)


# ---------------------------------------------------------------- dataset

@dataclass
class Frame:
    camera: int
    time: float
    c2w: np.ndarray  # (4, 4)
    image_path: str
    split: str = "train"
    image: torch.Tensor | None = None  # (H, W, 3) float32 in [0, 1]


@dataclass
class Dataset:
    intrinsics: list[dict]
    frames: list[Frame]
    bbox: np.ndarray  # (2, 3)
    background: tuple = (0.0, 0.0, 0.0)
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def camera(self, frame: Frame) -> Camera:
        return Camera.from_c2w(frame.c2w, **self.intrinsics[frame.camera])

    def split(self, name: str) -> list[Frame]:
        return [f for f in self.frames if f.split == name]

    @property
    def cameras(self) -> list[Camera]:
        return [self.camera(f) for f in self.frames]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise KeyError(f"{where}: missing required field '{key}'")
    return obj[key]


def load_dataset(root, load_images: bool = True) -> Dataset:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    man = json.loads(path.read_text())
    bbox = np.asarray(_require(man, "bbox", "manifest"), dtype=np.float64).reshape(2, 3)
    intrinsics = []
    for i, cam in enumerate(_require(man, "cameras", "manifest")):
        where = f"cameras[{i}]"
        entry = {k: _require(cam, k, where) for k in ("width", "height", "fx", "fy", "cx", "cy")}
        entry["width"], entry["height"] = int(entry["width"]), int(entry["height"])
        entry["near"] = cam.get("near", 0.01)
        intrinsics.append(entry)
    frames = []
    for i, fr in enumerate(_require(man, "frames", "manifest")):
        where = f"frames[{i}]"
        cam = int(_require(fr, "camera", where))
        if not 0 <= cam < len(intrinsics):
            raise ValueError(f"{where}: camera index {cam} out of range")
        t = float(_require(fr, "time", where))
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"{where}: time {t} outside [0, 1]")
        c2w = np.asarray(_require(fr, "c2w", where), dtype=np.float64)
        if c2w.size != 16:
            raise ValueError(f"{where}: c2w must have 16 entries, got {c2w.size}")
        split = fr.get("split", "train")
        if split not in ("train", "test"):
            raise ValueError(f"{where}: split must be 'train' or 'test', got {split!r}")
        frame = Frame(cam, t, c2w.reshape(4, 4), str(_require(fr, "image", where)), split)
        if load_images:
            img_path = root / frame.image_path
            if not img_path.exists():
                raise FileNotFoundError(f"{where}: image {img_path} does not exist")
            img = read_image(img_path)
            h, w = intrinsics[cam]["height"], intrinsics[cam]["width"]
            if img.shape[:2] != (h, w):
                raise ValueError(f"{where}: image is {img.shape[1]}x{img.shape[0]}, camera expects {w}x{h}")
            frame.image = torch.from_numpy(np.ascontiguousarray(img))
        frames.append(frame)
    if not frames:
        raise ValueError("manifest has no frames")
    bg = tuple(float(x) for x in man.get("background", (0.0, 0.0, 0.0)))
    return Dataset(intrinsics, frames, bbox, bg, root, man.get("extra", {}))


def write_manifest(ds: Dataset, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    man = {
        "format": "saro-manifest",
        "version": 1,
        "bbox": ds.bbox.tolist(),
        "background": list(ds.background),
        "cameras": [dict(c) for c in ds.intrinsics],
        "frames": [{"camera": f.camera, "time": f.time, "c2w": f.c2w.reshape(-1).tolist(),
                    "image": f.image_path, "split": f.split} for f in ds.frames],
    }
    if ds.extra:
        man["extra"] = ds.extra
    (root / MANIFEST_NAME).write_text(json.dumps(man, indent=1))


def save_dataset(ds: Dataset, root):
    """Write the manifest plus every frame image that is held in memory."""
    root = Path(root)
    for f in ds.frames:
        if f.image is not None:
            p = root / f.image_path
            p.parent.mkdir(parents=True, exist_ok=True)
            write_image(p, f.image.numpy())
    write_manifest(ds, root)
    ds.root = root


def dataset_digest(root) -> str:
    """SHA-256 over the manifest and every referenced image file."""
    root = Path(root)
    h = hashlib.sha256((root / MANIFEST_NAME).read_bytes())
    for fr in json.loads((root / MANIFEST_NAME).read_text())["frames"]:
        h.update((root / fr["image"]).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- teacher scene

@dataclass
class TeacherScene:
    """Ground-truth time-varying Gaussians: trajectory ``p0 + v (t - tau) + a sin(2 pi w t + phi)``."""

    p0: np.ndarray  # (N, 3)
    velocity: np.ndarray  # (N, 3)
    amplitude: np.ndarray  # (N, 3)
    omega: np.ndarray  # (N,)
    phase: np.ndarray  # (N,)
    tau: np.ndarray  # (N,)
    sigma: np.ndarray  # (N,)
    scale: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    dynamic: np.ndarray  # (N,) bool ground-truth label
    k: float = DEFAULT_K

    def position(self, t: float) -> np.ndarray:
        wave = np.sin(2 * math.pi * self.omega * t + self.phase)[:, None]
        return self.p0 + self.velocity * (t - self.tau)[:, None] + self.amplitude * wave

    def gamma(self, t: float) -> np.ndarray:
        ts = TemporalState(torch.from_numpy(self.tau), torch.from_numpy(self.sigma), self.k)
        return state_function(ts, t).numpy()

    def to_json(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in
               ("p0", "velocity", "amplitude", "omega", "phase", "tau", "sigma", "scale",
                "rotation", "opacity", "color", "dynamic")}
        out["k"] = self.k
        return out

    @classmethod
    def from_json(cls, d: dict) -> "TeacherScene":
        kw = {k: np.asarray(v, dtype=bool if k == "dynamic" else np.float64)
              for k, v in d.items() if k != "k"}
        return cls(k=d.get("k", DEFAULT_K), **kw)


def sample_teacher(seed: int, n: int, bbox, dynamic_fraction: float = 0.3) -> TeacherScene:
    """Random static and short-lived moving blobs inside the central 70% of ``bbox``."""
    rs = np.random.default_rng(seed)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    center, half = bbox.mean(0), (bbox[1] - bbox[0]) / 2
    n_dyn = max(1, int(math.ceil(dynamic_fraction * n)))
    dynamic = np.zeros(n, dtype=bool)
    dynamic[rs.permutation(n)[:n_dyn]] = True
    p0 = center + rs.uniform(-0.7, 0.7, size=(n, 3)) * half
    velocity = np.where(dynamic[:, None], rs.normal(0, 0.4, size=(n, 3)), 0.0)
    amplitude = np.where(dynamic[:, None], rs.uniform(-0.08, 0.08, size=(n, 3)), 0.0)
    omega = rs.uniform(0.5, 2.0, size=n)
    phase = rs.uniform(0, 2 * math.pi, size=n)
    # short lifespans keep gamma >= 1e-3 on under 30% of the timeline
    tau = np.where(dynamic, rs.uniform(0.1, 0.9, size=n), rs.uniform(0.0, 1.0, size=n))
    sigma = np.where(dynamic, rs.uniform(0.05, 0.1, size=n), 10.0)
    scale = np.exp(rs.uniform(np.log(0.04), np.log(0.12), size=(n, 3))) * half.mean()
    q = rs.normal(size=(n, 4))
    rotation = q / np.linalg.norm(q, axis=1, keepdims=True)
    opacity = rs.uniform(0.6, 0.95, size=n)
    color = rs.uniform(0.1, 0.95, size=(n, 3))
    return TeacherScene(p0, velocity, amplitude, omega, phase, tau, sigma, scale, rotation,
                        opacity, color, dynamic)


def lifespan_coverage(tau, sigma, k: float = DEFAULT_K, level: float = 1e-3) -> np.ndarray:
    """Fraction of [0, 1] where gamma >= ``level``."""
    half = np.asarray(sigma) * math.sqrt(math.log(1.0 / level) / k)
    lo = np.clip(np.asarray(tau) - half, 0.0, 1.0)
    hi = np.clip(np.asarray(tau) + half, 0.0, 1.0)
    return hi - lo


def render_teacher(teacher: TeacherScene, cam: Camera, t: float, background) -> torch.Tensor:
    pos = torch.from_numpy(teacher.position(t))
    opacity = torch.from_numpy(teacher.opacity * teacher.gamma(t))
    sh = rgb_to_sh(torch.from_numpy(teacher.color)).unsqueeze(-1)
    splats = project_splat(pos, torch.from_numpy(teacher.rotation), torch.from_numpy(teacher.scale),
                           opacity, sh, cam)
    live = splats.opacity >= 1.0 / 255.0
    return rasterize_oracle(splats.subset(live), cam, background).image.to(torch.float32)


def ring_cameras(n: int, bbox, resolution: int, radius_factor: float = 1.5,
                 fov_deg: float = 50.0) -> list[tuple[dict, np.ndarray]]:
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    center = bbox.mean(0)
    radius = radius_factor * np.linalg.norm(bbox[1] - bbox[0]) / 2
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    intr = dict(width=resolution, height=resolution, fx=f, fy=f, cx=resolution / 2,
                cy=resolution / 2, near=0.01)
    out = []
    for i in range(n):
        az = 2 * math.pi * i / n
        el = math.radians(25.0 if i % 2 == 0 else -10.0)
        eye = center + radius * np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el),
                                          math.sin(el)])
        out.append((intr, look_at(eye, center)))
    return out


def generate_teacher_scene(seed: int, n_primitives: int = 300, n_frames: int = 20,
                           n_cameras: int = 8, resolution: int = 48, out_dir=None,
                           image_format: str = "png", background=(0.0, 0.0, 0.0),
                           bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                           dynamic_fraction: float = 0.3) -> tuple[Dataset, TeacherScene]:
    """Render a teacher scene from a ring of cameras.

    At time step ``i`` camera ``i mod n_cameras`` is held out as the test view
    (when there is more than one camera).  With ``out_dir`` the dataset, the
    teacher parameters and a noisy point cloud (``points.ply``) are written.
    """
    if min(n_primitives, n_frames, n_cameras, resolution) < 1:
        raise ValueError("teacher scene sizes must all be >= 1")
    if image_format not in ("png", "pfm"):
        raise ValueError(f"image_format must be png or pfm, got {image_format!r}")
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    teacher = sample_teacher(seed, n_primitives, bbox, dynamic_fraction)
    cams = ring_cameras(n_cameras, bbox, resolution)
    times = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.5])
    frames = []
    for ti, t in enumerate(times):
        for ci, (intr, c2w) in enumerate(cams):
            cam = Camera.from_c2w(c2w, **intr)
            img = render_teacher(teacher, cam, float(t), background)
            split = "test" if n_cameras > 1 and ci == ti % n_cameras else "train"
            frames.append(Frame(ci, float(t), c2w, f"images/t{ti:03d}_c{ci:02d}.{image_format}",
                                split, img))
    intr_list = [dict(cams[0][0])] if cams else []
    for fr in frames:
        fr.camera = 0
    ds = Dataset(intr_list, frames, bbox, tuple(float(x) for x in background),
                 extra={"teacher_seed": seed})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, out)
        (out / TEACHER_NAME).write_text(json.dumps(teacher.to_json()))
        rs = np.random.default_rng(seed + 1)
        pts = teacher.position(0.5) + rs.normal(0, 0.02, size=teacher.p0.shape)
        write_ply_points(out / "points.ply", pts, teacher.color)
        if image_format == "png":
            # reload so in-memory frames carry the quantized pixels training will see
            for fr in ds.frames:
                fr.image = torch.from_numpy(read_png(out / fr.image_path))
    return ds, teacher


def load_teacher(root) -> TeacherScene:
    return TeacherScene.from_json(json.loads((Path(root) / TEACHER_NAME).read_text()))


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def _pack_sections(sections: list[tuple[str, int, tuple, bytes]]) -> bytes:
    entries = [(name.encode("utf-8"), kind, shape, payload) for name, kind, shape, payload in sections]
    table_size = sum(2 + len(nb) + 2 + 4 * len(shape) + 16 for nb, _, shape, _ in entries)
    offset = 12 + table_size
    out_table = bytearray()
    body = bytearray()
    for nb, kind, shape, payload in entries:
        out_table += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, len(shape))
        out_table += struct.pack(f"<{len(shape)}I", *shape)
        out_table += struct.pack("<QQ", offset + len(body), len(payload))
        body += payload
    header = MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    return bytes(header + out_table + body)


def _unpack_sections(blob: bytes) -> dict[str, tuple[int, tuple, bytes]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}: not a SARO checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} is not supported (this build reads version {CHECKPOINT_VERSION})")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            kind, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            off, nbytes = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            if off + nbytes > len(blob):
                raise CheckpointError(f"section {name!r} runs past the end of the file")
            if kind == _F32 and nbytes != 4 * math.prod(shape):
                raise CheckpointError(f"section {name!r}: {nbytes} bytes for shape {shape}")
            out[name] = (kind, tuple(shape), blob[off:off + nbytes])
    except struct.error as exc:
        raise CheckpointError(f"truncated section table: {exc}") from None
    return out


def checkpoint_bytes(model: SaroModel, meta: dict | None = None, rng_state: dict | None = None,
                     arrays: dict | None = None) -> bytes:
    sections = []
    tensors = [(f"param/{k}", t) for k, t in model.state_dict().items()]
    tensors += [(f"extra/{k}", t) for k, t in (arrays or {}).items()]
    for key, t in tensors:
        t = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(t.astype("<f4"))
        sections.append((key, _F32, arr.shape, arr.tobytes()))
    js = lambda d: json.dumps(d, sort_keys=True).encode("utf-8")  # noqa: E731
    sections.append(("config", _BYTES, (), js(model.config.to_dict())))
    sections.append(("meta", _BYTES, (), js(meta or {})))
    sections.append(("rng", _BYTES, (), js(rng_state or {})))
    return _pack_sections(sections)


def save_checkpoint(path, model: SaroModel, meta: dict | None = None, rng_state: dict | None = None,
                    arrays: dict | None = None):
    """Write ``model`` (plus optional named float32 ``arrays``) as a SARO checkpoint."""
    Path(path).write_bytes(checkpoint_bytes(model, meta, rng_state, arrays))


@dataclass
class Checkpoint:
    model: SaroModel
    meta: dict
    rng_state: dict
    arrays: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    secs = _unpack_sections(Path(path).read_bytes())
    for need in ("config", "meta", "rng"):
        if need not in secs:
            raise CheckpointError(f"checkpoint is missing section {need!r}")
    config = ModelConfig(**json.loads(secs["config"][2]))
    params = {name[6:]: torch.from_numpy(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())
              for name, (kind, shape, payload) in secs.items() if name.startswith("param/")}
    n = params["cloud.raw_position"].shape[0]
    k = num_sh_coeffs(config.sh_degree)
    cloud = GaussianCloud(torch.zeros(n, 4), torch.zeros(n, 3), torch.zeros(n, 4), torch.zeros(n),
                          torch.zeros(n, 3, k), bbox=params["cloud.bbox"])
    model = SaroModel(cloud, config)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint is missing arrays: {missing}")
    for key, t in params.items():
        if key not in expected or expected[key].shape != t.shape:
            raise CheckpointError(f"array {key!r} has unexpected shape {tuple(t.shape)}")
    model.load_state_dict(params)
    arrays = {name[6:]: torch.from_numpy(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())
              for name, (kind, shape, payload) in secs.items() if name.startswith("extra/")}
    return Checkpoint(model, json.loads(secs["meta"][2]), json.loads(secs["rng"][2]), arrays)
