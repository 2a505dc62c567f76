"""File formats: scene manifests, meshes, Gaussian PLY, images, target views.

The manifest is JSON and fully defaulted, so a minimal file (prompt plus one
entity) loads into a complete configuration. Gaussian exports use the
de-facto splatting PLY layout (17 float32 vertex properties) so files open
in third-party viewers; entity structure that layout cannot carry rides in a
JSON sidecar next to the PLY. PPM P6 is the bit-exact image format; PNG is a
convenience output.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, CameraRanges, Intrinsics
from .guidance import TargetView, TimestepSchedule
from .initializer import EntityMesh
from .optimizer import LrSchedule, OptimConfig
from .rendering import RenderedImage
from .runtime import default_dtype
from .scene import Aabb3, DEFAULT_BBOX_STD, EntityMeta, GaussianSet, Scene

SH_C0 = 0.28209479177387814  # zeroth spherical-harmonic basis constant

PLY_FIELDS = (
    "x", "y", "z", "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


class ManifestError(ValueError):
    """Manifest file missing, malformed, or inconsistent."""


class MeshFormatError(ValueError):
    """Mesh file unreadable or lacking required attributes."""


@dataclass
class ManifestEntity:
    id: int
    prompt: str
    mesh_path: str
    bbox: Aabb3 | None = None


@dataclass
class GuidanceSpec:
    """Where residuals come from: stored target views or a remote service."""

    mode: str = "photometric"
    target_views_dir: str | None = None
    host: str | None = None
    port: int | None = None
    weight: float = 1.0  # photometric only; remote servers send their own

    def __post_init__(self):
        if self.mode not in ("photometric", "remote"):
            raise ManifestError(f"guidance.mode: expected photometric|remote, got {self.mode!r}")
        if self.mode == "remote" and (self.host is None or self.port is None):
            raise ManifestError("guidance: remote mode needs host and port")
        if not self.weight > 0:
            raise ManifestError(f"guidance.weight: must be > 0, got {self.weight}")


@dataclass
class SceneManifest:
    composition_prompt: str
    entities: list[ManifestEntity]
    bbox_std: Aabb3 = field(default_factory=lambda: Aabb3(*DEFAULT_BBOX_STD))
    optim: OptimConfig = field(default_factory=OptimConfig)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    init_points: int = 1000


def _aabb_to_dict(box: Aabb3) -> dict:
    return {"min": [float(v) for v in box.min], "max": [float(v) for v in box.max]}


def _aabb_from_dict(d: dict, where: str) -> Aabb3:
    try:
        return Aabb3(d["min"], d["max"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{where}: bad box ({exc})") from exc


def _lr_to_list(sched: LrSchedule) -> list[float]:
    return [sched.start] if sched.end is None else [sched.start, sched.end]


def _lr_from_list(values, where: str) -> LrSchedule:
    if not isinstance(values, (list, tuple)) or len(values) not in (1, 2):
        raise ManifestError(f"{where}: expected [start] or [start, end], got {values!r}")
    return LrSchedule(float(values[0]), float(values[1]) if len(values) == 2 else None)


_OPTIM_SCALARS = (
    ("total_iters", int), ("point_budget", int), ("batch_views", int),
    ("bbox_refresh_every", int), ("densify_interval", int), ("densify_start", int),
    ("tau_grad", float), ("tau_size", float), ("tau_prune", float),
    ("clone_jitter", float), ("render_width", int), ("render_height", int),
    ("seed", int),
    ("no_do", bool), ("no_vao", bool), ("random_init", bool), ("vao_positions_only", bool),
    ("mask_by_containment", bool),
)
_OPTIM_LRS = ("lr_position", "lr_scale", "lr_color", "lr_opacity", "lr_rotation")


def _optim_to_dict(cfg: OptimConfig) -> dict:
    out: dict = {name: getattr(cfg, name) for name, _ in _OPTIM_SCALARS}
    for name in _OPTIM_LRS:
        out[name] = _lr_to_list(getattr(cfg, name))
    out["background"] = list(cfg.background)
    out["timesteps"] = {
        "phase1": list(cfg.timesteps.phase1_range),
        "phase2": list(cfg.timesteps.phase2_range),
        "phase_switch_iter": cfg.timesteps.phase_switch_iter,
    }
    return out


def _optim_from_dict(d: dict, cameras: CameraRanges) -> OptimConfig:
    kwargs: dict = {"cameras": cameras}
    for name, conv in _OPTIM_SCALARS:
        if name in d:
            kwargs[name] = conv(d[name])
    for name in _OPTIM_LRS:
        if name in d:
            kwargs[name] = _lr_from_list(d[name], f"optim.{name}")
    if "background" in d:
        kwargs["background"] = tuple(float(v) for v in d["background"])
    if "timesteps" in d:
        ts = d["timesteps"]
        kwargs["timesteps"] = TimestepSchedule(
            phase1_range=tuple(ts.get("phase1", TimestepSchedule().phase1_range)),
            phase2_range=tuple(ts.get("phase2", TimestepSchedule().phase2_range)),
            phase_switch_iter=int(ts.get("phase_switch_iter", TimestepSchedule().phase_switch_iter)),
        )
    unknown = set(d) - {n for n, _ in _OPTIM_SCALARS} - set(_OPTIM_LRS) - {"background", "timesteps"}
    if unknown:
        raise ManifestError(f"optim: unknown field(s) {sorted(unknown)}")
    return OptimConfig(**kwargs)


def _camera_to_dict(ranges: CameraRanges) -> dict:
    return {name: list(getattr(ranges, name)) for name in ("radius", "fov_y", "elevation", "azimuth")}


def _camera_from_dict(d: dict) -> CameraRanges:
    kwargs = {}
    for name in ("radius", "fov_y", "elevation", "azimuth"):
        if name in d:
            pair = d[name]
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ManifestError(f"camera.{name}: expected [lo, hi], got {pair!r}")
            kwargs[name] = (float(pair[0]), float(pair[1]))
    unknown = set(d) - {"radius", "fov_y", "elevation", "azimuth"}
    if unknown:
        raise ManifestError(f"camera: unknown field(s) {sorted(unknown)}")
    return CameraRanges(**kwargs)


def manifest_to_dict(manifest: SceneManifest) -> dict:
    ents = []
    for e in manifest.entities:
        item: dict = {"id": e.id, "prompt": e.prompt, "mesh_path": e.mesh_path}
        if e.bbox is not None:
            item["bbox"] = _aabb_to_dict(e.bbox)
        ents.append(item)
    guidance: dict = {"mode": manifest.guidance.mode}
    if manifest.guidance.target_views_dir is not None:
        guidance["target_views_dir"] = manifest.guidance.target_views_dir
    if manifest.guidance.host is not None:
        guidance["host"] = manifest.guidance.host
        guidance["port"] = manifest.guidance.port
    if manifest.guidance.weight != 1.0:
        guidance["weight"] = manifest.guidance.weight
    return {
        "composition_prompt": manifest.composition_prompt,
        "init_points": manifest.init_points,
        "bbox_std": _aabb_to_dict(manifest.bbox_std),
        "entities": ents,
        "optim": _optim_to_dict(manifest.optim),
        "camera": _camera_to_dict(manifest.optim.cameras),
        "guidance": guidance,
    }


def manifest_from_dict(data: dict, base_dir: str = ".") -> SceneManifest:
    if "composition_prompt" not in data:
        raise ManifestError("composition_prompt: required field missing")
    raw_entities = data.get("entities")
    if not raw_entities:
        raise ManifestError("entities: need at least one entity")

    entities = []
    seen: set[int] = set()
    for i, item in enumerate(raw_entities):
        where = f"entities[{i}]"
        try:
            eid = int(item["id"])
            prompt = str(item.get("prompt", ""))
            mesh_path = str(item["mesh_path"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        if eid in seen:
            raise ManifestError(f"{where}.id: duplicate entity id {eid}")
        seen.add(eid)
        if not os.path.isabs(mesh_path):
            mesh_path = os.path.normpath(os.path.join(base_dir, mesh_path))
        box = _aabb_from_dict(item["bbox"], f"{where}.bbox") if "bbox" in item else None
        entities.append(ManifestEntity(id=eid, prompt=prompt, mesh_path=mesh_path, bbox=box))

    cameras = _camera_from_dict(data.get("camera", {}))
    optim = _optim_from_dict(data.get("optim", {}), cameras)

    graw = dict(data.get("guidance", {"mode": "photometric"}))
    tdir = graw.get("target_views_dir")
    if tdir is not None and not os.path.isabs(tdir):
        graw["target_views_dir"] = os.path.normpath(os.path.join(base_dir, tdir))
    try:
        guidance = GuidanceSpec(**graw)
    except TypeError as exc:
        raise ManifestError(f"guidance: {exc}") from exc

    bbox_std = (
        _aabb_from_dict(data["bbox_std"], "bbox_std")
        if "bbox_std" in data
        else Aabb3(*DEFAULT_BBOX_STD)
    )
    init_points = int(data.get("init_points", 1000))
    if init_points < len(entities):
        raise ManifestError(f"init_points: {init_points} cannot cover {len(entities)} entities")
    return SceneManifest(
        composition_prompt=str(data["composition_prompt"]),
        entities=entities,
        bbox_std=bbox_std,
        optim=optim,
        guidance=guidance,
        init_points=init_points,
    )


def load_manifest(path: str) -> SceneManifest:
    """Parse and validate a manifest; relative paths resolve against its dir."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return manifest_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: SceneManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- meshes ---------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_COLOR_NAMES = {"red": 0, "green": 1, "blue": 2, "r": 0, "g": 1, "b": 2}


def _parse_ply_header(fh) -> tuple[str, int, list[tuple[str, str]], int]:
    """Returns (format, vertex_count, [(name, numpy dtype)], later_elements)."""
    if fh.readline().strip() != b"ply":
        raise MeshFormatError("not a PLY file (missing magic)")
    fmt = None
    vertex_count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    later = 0
    while True:
        line = fh.readline()
        if not line:
            raise MeshFormatError("PLY header ends before end_header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise MeshFormatError(f"unsupported PLY format {tokens[1]!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                vertex_count = int(tokens[2])
                in_vertex = True
            else:
                in_vertex = False
                later += 1
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise MeshFormatError("list properties on vertices are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise MeshFormatError(f"unsupported property type {tokens[1]!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt is None or vertex_count is None:
        raise MeshFormatError("PLY header lacks format or vertex element")
    return fmt, vertex_count, props, later


def _read_ply_vertex_table(path: str) -> tuple[np.ndarray, dict[str, int]]:
    """All vertex property columns as float64, with a name -> column map."""
    with open(path, "rb") as fh:
        fmt, count, props, _ = _parse_ply_header(fh)
        names = {name: j for j, (name, _) in enumerate(props)}
        if fmt == "ascii":
            rows = np.zeros((count, len(props)), dtype=np.float64)
            for i in range(count):
                tokens = fh.readline().split()
                if len(tokens) < len(props):
                    raise MeshFormatError(f"vertex {i}: expected {len(props)} values")
                rows[i] = [float(t) for t in tokens[: len(props)]]
        else:
            rec = np.dtype([(f"c{j}", "<" + dt) for j, (_, dt) in enumerate(props)])
            raw = fh.read(rec.itemsize * count)
            if len(raw) < rec.itemsize * count:
                raise MeshFormatError("PLY payload shorter than the declared vertex count")
            table = np.frombuffer(raw, dtype=rec, count=count)
            rows = np.stack(
                [table[f"c{j}"].astype(np.float64) for j in range(len(props))], axis=1
            ) if props else np.zeros((count, 0))
        # integer-typed color channels are stored 0..255
        for name, j in names.items():
            if name.lower() in _COLOR_NAMES and props[j][1].startswith(("u", "i")):
                rows[:, j] /= 255.0
    return rows, names


def _load_mesh_ply(path: str, entity_id: int, prompt: str) -> EntityMesh:
    rows, names = _read_ply_vertex_table(path)
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MeshFormatError(f"{path}: vertex element lacks {axis!r}")
    color_cols = [None, None, None]
    for name, j in names.items():
        slot = _COLOR_NAMES.get(name.lower())
        if slot is not None and color_cols[slot] is None:
            color_cols[slot] = j
    if any(c is None for c in color_cols):
        raise MeshFormatError(f"{path}: vertex colors missing (need red/green/blue)")
    verts = rows[:, [names["x"], names["y"], names["z"]]]
    colors = np.clip(rows[:, color_cols], 0.0, 1.0)
    return EntityMesh(vertices=verts, vertex_colors=colors, entity_id=entity_id, prompt=prompt)


def _load_mesh_obj(path: str, entity_id: int, prompt: str) -> EntityMesh:
    verts = []
    colors = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens or tokens[0] != "v":
                continue
            if len(tokens) < 7:
                raise MeshFormatError(
                    f"{path}:{lineno}: vertex lacks color columns (need v x y z r g b)"
                )
            verts.append([float(t) for t in tokens[1:4]])
            colors.append([float(t) for t in tokens[4:7]])
    if not verts:
        raise MeshFormatError(f"{path}: no vertices found")
    return EntityMesh(
        vertices=np.asarray(verts),
        vertex_colors=np.clip(np.asarray(colors), 0.0, 1.0),
        entity_id=entity_id,
        prompt=prompt,
    )


def load_mesh(path: str, entity_id: int = 1, prompt: str = "") -> EntityMesh:
    """Colored vertices from PLY (ascii or binary LE) or OBJ with v x y z r g b."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        return _load_mesh_ply(path, entity_id, prompt)
    if ext == ".obj":
        return _load_mesh_obj(path, entity_id, prompt)
    raise MeshFormatError(f"{path}: unsupported mesh format {ext!r} (need .ply or .obj)")


def save_mesh_ply(mesh: EntityMesh, path: str) -> None:
    """Binary little-endian PLY with float positions and uchar colors."""
    n = mesh.vertex_count
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    table = np.zeros(n, dtype=rec)
    v = mesh.vertices.astype(np.float32)
    c = _quantize_unit(mesh.vertex_colors)
    table["x"], table["y"], table["z"] = v[:, 0], v[:, 1], v[:, 2]
    table["red"], table["green"], table["blue"] = c[:, 0], c[:, 1], c[:, 2]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(table.tobytes())


# --- Gaussian PLY ----------------------------------------------------------

def _sidecar_path(path: str) -> str:
    return path + ".meta.json"


def export_gaussians_ply(scene: Scene, path: str) -> None:
    """Standard 17-property splat PLY plus a JSON sidecar for entity data.

    Colors are stored in the DC spherical-harmonic convention, opacity as a
    logit, scales as logs; normals are zeros kept for layout compatibility.
    """
    g = scene.gaussians
    n = g.count
    cols = np.zeros((n, len(PLY_FIELDS)), dtype=np.float32)
    pos = g.positions.astype(np.float64)
    cols[:, 0:3] = pos.astype(np.float32)
    cols[:, 6:9] = ((g.colors.astype(np.float64) - 0.5) / SH_C0).astype(np.float32)
    with np.errstate(divide="ignore"):  # opacity 0 or 1 legitimately maps to +-inf
        alpha = g.opacities.astype(np.float64)
        cols[:, 9] = (np.log(alpha) - np.log1p(-alpha)).astype(np.float32)
    cols[:, 10:13] = g.log_scales.astype(np.float32)
    cols[:, 13:17] = g.rotations.astype(np.float32)

    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {name}" for name in PLY_FIELDS]
    header_lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(cols, dtype="<f4").tobytes())

    sidecar = {
        "entity_tags": g.entity_tags.tolist(),
        "entities": [
            {"id": m.id, "prompt": m.prompt, "frozen": m.frozen, "bbox": _aabb_to_dict(m.bbox)}
            for m in scene.entities
        ],
        "composition_prompt": scene.composition_prompt,
        "bbox_std": _aabb_to_dict(scene.bbox_std),
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_gaussians_ply(path: str, dtype=None) -> Scene:
    """Inverse of export_gaussians_ply.

    Without the sidecar the file still loads as a single-entity scene (id 1,
    empty prompts, bbox from positions), so third-party splat files work.
    """
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    rows, names = _read_ply_vertex_table(path)
    missing = [f for f in PLY_FIELDS if f not in names]
    if missing:
        raise MeshFormatError(f"{path}: not a Gaussian PLY, missing {missing}")
    cols = rows[:, [names[f] for f in PLY_FIELDS]]
    n = cols.shape[0]

    positions = cols[:, 0:3]
    colors = np.clip(cols[:, 6:9] * SH_C0 + 0.5, 0.0, 1.0)
    opacities = 1.0 / (1.0 + np.exp(-cols[:, 9]))
    log_scales = cols[:, 10:13]
    from .scene import normalized_quaternions

    rotations = normalized_quaternions(cols[:, 13:17])

    sidecar_file = _sidecar_path(path)
    if os.path.exists(sidecar_file):
        with open(sidecar_file, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        tags = np.asarray(meta["entity_tags"], dtype=np.int32)
        if tags.shape[0] != n:
            raise MeshFormatError(
                f"{sidecar_file}: {tags.shape[0]} tags for {n} Gaussians"
            )
        entities = [
            EntityMeta(
                id=int(e["id"]),
                prompt=e["prompt"],
                bbox=_aabb_from_dict(e["bbox"], "sidecar bbox"),
                frozen=bool(e.get("frozen", False)),
            )
            for e in meta["entities"]
        ]
        composition_prompt = meta.get("composition_prompt", "")
        bbox_std = _aabb_from_dict(meta.get("bbox_std", _aabb_to_dict(Aabb3(*DEFAULT_BBOX_STD))), "bbox_std")
    else:
        tags = np.ones(n, dtype=np.int32)
        box = Aabb3.from_points(positions) if n else Aabb3(*DEFAULT_BBOX_STD)
        entities = [EntityMeta(id=1, prompt="", bbox=box)]
        composition_prompt = ""
        bbox_std = Aabb3(*DEFAULT_BBOX_STD)

    gaussians = GaussianSet(
        positions=positions.astype(dtype),
        rotations=rotations.astype(dtype),
        log_scales=log_scales.astype(dtype),
        opacities=opacities.astype(dtype),
        colors=colors.astype(dtype),
        entity_tags=tags,
    )
    return Scene(
        gaussians=gaussians,
        entities=entities,
        composition_prompt=composition_prompt,
        bbox_std=bbox_std,
    )


def build_scene_from_manifest(
    manifest: SceneManifest,
    rng: np.random.Generator | None = None,
    random_init: bool | None = None,
    scalar_nn: bool = False,
) -> Scene:
    """Load every entity mesh and initialize the tagged scene.

    random_init=None defers to the manifest's optim flag; passing a bool
    overrides it (the initialization ablation path).
    """
    from .initializer import init_scene

    if rng is None:
        rng = np.random.default_rng(manifest.optim.seed)
    meshes = [
        load_mesh(e.mesh_path, entity_id=e.id, prompt=e.prompt) for e in manifest.entities
    ]
    overrides = {e.id: e.bbox for e in manifest.entities if e.bbox is not None}
    use_random = manifest.optim.random_init if random_init is None else random_init
    return init_scene(
        meshes,
        composition_prompt=manifest.composition_prompt,
        total_points=manifest.init_points,
        rng=rng,
        bbox_std=manifest.bbox_std,
        bbox_overrides=overrides,
        random_init=use_random,
        scalar_nn=scalar_nn,
    )


# --- images ----------------------------------------------------------------

def _quantize_unit(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes, round half up: byte = clip(floor(255 v + 0.5))."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(rgb: np.ndarray, path: str) -> None:
    h, w = rgb.shape[0], rgb.shape[1]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize_unit(rgb).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """P6 payload as (H, W, 3) floats in [0,1] (byte / 255)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment runs to end of line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    out = struct.pack(">I", len(payload)) + tag + payload
    return out + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)


def write_png(rgb: np.ndarray, path: str) -> None:
    """Minimal 8-bit RGB PNG (filter 0 rows, single IDAT)."""
    h, w = rgb.shape[0], rgb.shape[1]
    raw = _quantize_unit(rgb)
    scanlines = b"".join(b"\x00" + raw[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_png_chunk(b"IHDR", ihdr))
        fh.write(_png_chunk(b"IDAT", zlib.compress(scanlines, 9)))
        fh.write(_png_chunk(b"IEND", b""))


def write_image(img: RenderedImage | np.ndarray, path: str) -> None:
    """PPM P6 (bit-exact format) or PNG, chosen by extension."""
    rgb = img.rgb if isinstance(img, RenderedImage) else np.asarray(img)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {rgb.shape}")
    if not np.isfinite(rgb).all():
        raise ValueError("image contains non-finite values")
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        write_png(rgb, path)
    elif ext in (".ppm", ""):
        write_ppm(rgb, path)
    else:
        raise ValueError(f"unsupported image extension {ext!r} (need .ppm or .png)")


# --- stored target views -----------------------------------------------------

def save_target_views(targets: dict[int, list[TargetView]], dir_path: str) -> None:
    """One directory per target set: views.json plus one PPM per view."""
    os.makedirs(dir_path, exist_ok=True)
    index = []
    counter = 0
    for prompt_id in sorted(targets):
        for view in targets[prompt_id]:
            name = f"view_{counter:04d}.ppm"
            write_ppm(np.asarray(view.image, dtype=np.float64), os.path.join(dir_path, name))
            index.append(
                {
                    "prompt_id": prompt_id,
                    "eye": list(view.pose.eye),
                    "look_at": list(view.pose.look_at),
                    "up": list(view.pose.up),
                    "fov_y": view.intrinsics.fov_y,
                    "width": view.intrinsics.width,
                    "height": view.intrinsics.height,
                    "file": name,
                }
            )
            counter += 1
    with open(os.path.join(dir_path, "views.json"), "w", encoding="utf-8") as fh:
        json.dump({"views": index}, fh, indent=2)
        fh.write("\n")


def load_target_views(dir_path: str) -> dict[int, list[TargetView]]:
    index_path = os.path.join(dir_path, "views.json")
    try:
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)["views"]
    except OSError as exc:
        raise ManifestError(f"cannot read target views index {index_path}: {exc}") from exc
    out: dict[int, list[TargetView]] = {}
    for item in index:
        image = read_ppm(os.path.join(dir_path, item["file"]))
        view = TargetView(
            pose=CameraPose(
                eye=tuple(item["eye"]),
                look_at=tuple(item.get("look_at", (0.0, 0.0, 0.0))),
                up=tuple(item.get("up", (0.0, 1.0, 0.0))),
            ),
            intrinsics=Intrinsics(
                fov_y=float(item["fov_y"]), width=int(item["width"]), height=int(item["height"])
            ),
            image=image,
        )
        out.setdefault(int(item["prompt_id"]), []).append(view)
    return out
