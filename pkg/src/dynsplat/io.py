"""Serialization: Gaussian PLY, datasets, checkpoints, trajectories, edit
scripts, and a toy-scene generator.

Binary formats are little-endian float32 behind explicit magic + version
headers; loaders refuse unknown versions and validate byte counts so a
truncated or foreign file fails loudly instead of shearing arrays. The
runtime works in float64, so "bit-exact round trip" means a save/load/save
cycle reproduces the file bytes and a load/save/load cycle reproduces the
arrays.
"""

from __future__ import annotations

import colorsys
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import deform as df
from . import geom
from .pipeline import SceneModel, render_view
from .scene import SH_C0, Camera, Frame, FrameSet, GaussianCloud, sh_degree_from_bands
from .superpoint import SuperpointModel, nearest_superpoints

# -- Gaussian PLY -------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
}


def _cloud_property_names(bands):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (bands - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2"]
    names += [f"rot_{i}" for i in range(4)]
    return names


def save_ply(path, cloud: GaussianCloud):
    """Write the cloud as a binary little-endian PLY in 3D-GS interchange layout.

    Raw parameters go to disk unchanged: opacity as a logit, scales as logs,
    higher spherical-harmonic bands channel-major in ``f_rest_*``. A degree-0
    cloud carries no ``f_rest`` properties at all.
    """
    p, bands = cloud.sh.shape[0], cloud.sh.shape[1]
    names = _cloud_property_names(bands)
    rec = np.zeros(p, dtype=[(n, "<f4") for n in names])
    for i, n in enumerate("xyz"):
        rec[n] = cloud.means[:, i]
    for c in range(3):
        rec[f"f_dc_{c}"] = cloud.sh[:, 0, c]
        for k in range(bands - 1):
            rec[f"f_rest_{c * (bands - 1) + k}"] = cloud.sh[:, k + 1, c]
    rec["opacity"] = cloud.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.quats[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {p}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def _parse_ply_header(blob, path):
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: malformed header")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    count, props, in_vertex = None, [], False
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise ValueError(f"{path}: only binary little-endian PLY is supported")
        elif tok[0] == "element":
            if tok[1] != "vertex" or count is not None:
                raise ValueError(f"{path}: only a single vertex element is supported")
            count = int(tok[2])
            in_vertex = True
        elif tok[0] == "property":
            if not in_vertex or len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: malformed header near {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ValueError(f"{path}: malformed header near {line!r}")
    if count is None or not props:
        raise ValueError(f"{path}: malformed header")
    return count, props, blob[end + len(b"end_header\n") :]


def load_ply(path) -> GaussianCloud:
    """Read a binary little-endian Gaussian PLY back into a cloud."""
    with open(path, "rb") as fh:
        blob = fh.read()
    count, props, payload = _parse_ply_header(blob, path)
    dtype = np.dtype(props)
    if len(payload) != count * dtype.itemsize:
        raise ValueError(f"{path}: wrong element count (header says {count})")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    have = {n for n, _ in props}
    rest = sorted(int(n[len("f_rest_") :]) for n in have if n.startswith("f_rest_"))
    if rest != list(range(len(rest))) or len(rest) % 3:
        raise ValueError(f"{path}: f_rest properties must be f_rest_0..f_rest_{{3B-4}}")
    bands = len(rest) // 3 + 1
    sh_degree_from_bands(bands)  # reject non-square band counts
    needed = _cloud_property_names(bands)
    missing = [n for n in needed if n not in have]
    if missing:
        raise ValueError(f"{path}: missing property {missing[0]}")

    def cols(names):
        return np.stack([rec[n].astype(np.float64) for n in names], axis=1)

    sh = np.zeros((count, bands, 3))
    sh[:, 0, :] = cols([f"f_dc_{c}" for c in range(3)])
    for c in range(3):
        for k in range(bands - 1):
            sh[:, k + 1, c] = rec[f"f_rest_{c * (bands - 1) + k}"].astype(np.float64)
    return GaussianCloud(
        means=cols(["x", "y", "z"]),
        log_scales=cols([f"scale_{i}" for i in range(3)]),
        quats=cols([f"rot_{i}" for i in range(4)]),
        opacity_logits=rec["opacity"].astype(np.float64),
        sh=sh,
    )


# -- images -------------------------------------------------------------------


def save_image(path, image):
    """Quantize a float image in [0, 1] to an 8-bit RGB PNG (round, clamp)."""
    arr = np.asarray(ad.data_of(image), dtype=np.float64)
    byte = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(byte, mode="RGB").save(path)


def load_image(path):
    """Read a PNG as float64 in [0, 1]; alpha composites over white."""
    with Image.open(path) as im:
        if "A" in im.getbands():
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
            alpha = rgba[..., 3:]
            return rgba[..., :3] * alpha + (1.0 - alpha)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# -- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    """Train and test splits sharing one normalized time axis."""

    train: FrameSet
    test: FrameSet


def _resolve_image_path(root, rel):
    rel = rel[2:] if rel.startswith("./") else rel
    for candidate in (os.path.join(root, rel), os.path.join(root, rel) + ".png"):
        if os.path.isfile(candidate):
            return candidate
    raise FileNotFoundError(f"missing files: {rel}")


def load_dataset(root, *, load_images=True) -> Dataset:
    """Load a transforms_{train,test}.json dataset directory.

    Raw frame times are normalized to [0, 1] by (t - t_min) / (t_max - t_min)
    over both splits together so they share one time axis. Camera matrices in
    the JSON are camera-to-world; intrinsics come from ``camera_angle_x`` and
    the image width.
    """
    paths = {s: os.path.join(root, f"transforms_{s}.json") for s in ("train", "test")}
    missing = [os.path.basename(p) for p in paths.values() if not os.path.isfile(p)]
    if missing:
        raise FileNotFoundError(f"missing files: {', '.join(missing)}")
    raw = {}
    for split, p in paths.items():
        with open(p) as fh:
            raw[split] = json.load(fh)

    all_times = [float(fr["time"]) for d in raw.values() for fr in d["frames"]]
    if not all_times:
        raise ValueError("dataset has no frames")
    t_min, t_max = min(all_times), max(all_times)
    span = t_max - t_min

    def build(data):
        angle = float(data["camera_angle_x"])
        width, height = data.get("w"), data.get("h")
        frames = []
        for fr in data["frames"]:
            mat = np.asarray(fr["transform_matrix"], dtype=np.float64)
            if mat.shape != (4, 4) or not np.isfinite(mat).all():
                raise ValueError(f"non-finite or misshapen transform_matrix for {fr.get('file_path')}")
            img = None
            if load_images:
                img = load_image(_resolve_image_path(root, fr["file_path"]))
                height, width = img.shape[:2]
            if width is None or height is None:
                raise ValueError("cannot determine image size: no w/h fields and images not loaded")
            cam = Camera.from_camera_angle(angle, int(width), int(height), mat)
            t = 0.0 if span == 0.0 else (float(fr["time"]) - t_min) / span
            frames.append(Frame(cam, t, img, name=os.path.basename(fr["file_path"])))
        return FrameSet(frames, background=np.ones(3))

    return Dataset(train=build(raw["train"]), test=build(raw["test"]))


# -- checkpoints --------------------------------------------------------------

_CKPT_MAGIC = b"SPGS"
_TRAJ_MAGIC = b"SPTJ"
_VERSION = 1
_HAS_NONRIGID, _HAS_CACHE, _HAS_NET = 1, 2, 4


class _Writer:
    def __init__(self, magic):
        self.parts = [magic, struct.pack("<I", _VERSION)]

    def u32(self, *vals):
        self.parts.append(struct.pack(f"<{len(vals)}I", *[int(v) for v in vals]))

    def array(self, arr, dtype="<f4"):
        self.parts.append(np.ascontiguousarray(arr).astype(dtype).tobytes())

    def write(self, path):
        with open(path, "wb") as fh:
            fh.write(b"".join(self.parts))


class _Reader:
    def __init__(self, path, magic, kind):
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.path, self.off = path, 0
        if self.buf[:4] != magic:
            raise ValueError(f"{path}: not a {kind} file (bad magic)")
        self.off = 4
        version = self.u32()
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported {kind} version {version}")

    def u32(self, n=None):
        count = 1 if n is None else n
        vals = struct.unpack_from(f"<{count}I", self.buf, self.off)
        self.off += 4 * count
        return vals[0] if n is None else vals

    def array(self, shape, dtype="<f4", out=np.float64):
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        if self.off + nbytes > len(self.buf):
            raise ValueError(f"{self.path}: truncated file")
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.off)
        self.off += nbytes
        return arr.astype(out).reshape(shape)

    def done(self):
        if self.off != len(self.buf):
            raise ValueError(f"{self.path}: trailing bytes")


def _net_dims(net):
    if net is None:
        return (0, 0, 0, 0)
    return (len(net.hidden), net.hidden[-1][0].data.shape[1], net.pos_freqs, net.time_freqs)


def _write_net(w, net):
    for _, tensor in df.net_parameters(net):
        w.array(tensor.data)


def _read_net(r, dims):
    depth, width, pos_freqs, time_freqs = dims
    net = df.init_deform_net(
        np.random.default_rng(0), depth=depth, width=width, pos_freqs=pos_freqs, time_freqs=time_freqs
    )
    for _, tensor in df.net_parameters(net):
        tensor.data = r.array(tensor.data.shape)
    return net


def save_checkpoint(path, model: SceneModel):
    """Serialize a scene model: magic, version, counts, then raw f32 arrays."""
    cloud, sp = model.cloud, model.superpoints
    p, m, k = cloud.means.shape[0], sp.num_superpoints, sp.k
    degree = sh_degree_from_bands(cloud.sh.shape[1])
    times = np.asarray(model.train_times, dtype=np.float64).reshape(-1)
    flags = 0
    flags |= _HAS_NET if model.net is not None else 0
    flags |= _HAS_NONRIGID if model.nonrigid is not None else 0
    flags |= _HAS_CACHE if model.cache is not None else 0
    w = _Writer(_CKPT_MAGIC)
    w.u32(flags, p, m, k, degree, len(times))
    w.u32(*_net_dims(model.net))
    w.u32(*_net_dims(model.nonrigid))
    w.u32(0 if model.cache is None else len(model.cache.times))
    w.array(cloud.means)
    w.array(cloud.log_scales)
    w.array(cloud.quats)
    w.array(cloud.opacity_logits)
    w.array(cloud.sh)
    w.array(sp.positions)
    w.array(sp.neighbors, dtype="<i4")
    w.array(sp.logits)
    if model.net is not None:
        _write_net(w, model.net)
    if model.nonrigid is not None:
        _write_net(w, model.nonrigid)
    w.array(times)
    if model.cache is not None:
        w.array(model.cache.times)
        w.array(model.cache.omegas)
        w.array(model.cache.trans)
    w.write(path)


def load_checkpoint(path) -> SceneModel:
    r = _Reader(path, _CKPT_MAGIC, "checkpoint")
    flags, p, m, k, degree, n_times = r.u32(6)
    f_dims = r.u32(4)
    g_dims = r.u32(4)
    cache_t = r.u32()
    bands = (degree + 1) ** 2
    cloud = GaussianCloud(
        means=r.array((p, 3)),
        log_scales=r.array((p, 3)),
        quats=r.array((p, 4)),
        opacity_logits=r.array((p,)),
        sh=r.array((p, bands, 3)),
    )
    positions = r.array((m, 3))
    neighbors = r.array((p, k), dtype="<i4", out=np.int64)
    logits = r.array((p, k))
    sp = SuperpointModel(positions, neighbors, logits).validate()
    net = _read_net(r, f_dims) if flags & _HAS_NET else None
    nonrigid = _read_net(r, g_dims) if flags & _HAS_NONRIGID else None
    times = r.array((n_times,))
    cache = None
    if flags & _HAS_CACHE:
        cache = df.DeformationCache(
            times=r.array((cache_t,)),
            omegas=r.array((cache_t, m, 3)),
            trans=r.array((cache_t, m, 3)),
        ).validate()
    r.done()
    return SceneModel(cloud, sp, net, times, nonrigid=nonrigid, cache=cache)


# -- teacher trajectories -----------------------------------------------------


def save_trajectories(path, times, means, quats):
    """Write per-timestep per-Gaussian centers and unit quaternions.

    Quaternion rows more than 1e-6 from unit length are normalized before the
    f32 cast; rows already unit to f32 precision are written unchanged, which
    keeps save/load cycles byte-stable.
    """
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    means = np.asarray(means, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    t = times.shape[0]
    if means.ndim != 3 or quats.ndim != 3 or means.shape[2] != 3 or quats.shape[2] != 4:
        raise ValueError("trajectory arrays must be (T, P, 3) and (T, P, 4)")
    if means.shape[0] != t or quats.shape[0] != t or means.shape[1] != quats.shape[1]:
        raise ValueError("trajectory count mismatch between times, means, and quaternions")
    norms = np.linalg.norm(quats, axis=-1)
    if not np.isfinite(quats).all() or np.any(norms == 0.0):
        raise ValueError("degenerate quaternion rows")
    off = np.abs(norms - 1.0) > 1e-6
    if off.any():
        quats = np.where(off[..., None], quats / norms[..., None], quats)
    w = _Writer(_TRAJ_MAGIC)
    w.u32(means.shape[1], t)
    w.array(times)
    for ti in range(t):
        w.array(np.concatenate([means[ti], quats[ti]], axis=1))
    w.write(path)


def load_trajectories(path):
    """Read (times (T,), means (T, P, 3), quats (T, P, 4)), all float64."""
    r = _Reader(path, _TRAJ_MAGIC, "trajectory")
    p, t = r.u32(2)
    times = r.array((t,))
    rows = r.array((t, p, 7))
    r.done()
    means, quats = rows[:, :, :3], rows[:, :, 3:]
    if not np.isfinite(rows).all():
        raise ValueError(f"{path}: non-finite trajectory entries")
    if np.any(np.abs(np.linalg.norm(quats, axis=-1) - 1.0) > 1e-4):
        raise ValueError(f"{path}: quaternion rows must be unit length")
    return times, np.ascontiguousarray(means), np.ascontiguousarray(quats)


# -- edit scripts -------------------------------------------------------------

_EDIT_TAGS = ("delete", "transform", "merge-scene")


def _check_vec3(op, key, default=None):
    if key not in op:
        if default is None:
            raise ValueError(f"edit operation {op['op']!r} needs a {key!r} 3-vector")
        return np.asarray(default, dtype=np.float64)
    vec = np.asarray(op[key], dtype=np.float64)
    if vec.shape != (3,) or not np.isfinite(vec).all():
        raise ValueError(f"edit operation {op['op']!r}: {key!r} must be a finite 3-vector")
    return vec


def load_edit_script(path):
    """Parse and structurally validate a JSON edit script."""
    with open(path) as fh:
        ops = json.load(fh)
    if not isinstance(ops, list):
        raise ValueError("edit script must be a JSON array of operations")
    for op in ops:
        if not isinstance(op, dict) or op.get("op") not in _EDIT_TAGS:
            raise ValueError(f"unknown edit operation {op.get('op') if isinstance(op, dict) else op!r}")
        if op["op"] in ("delete", "transform"):
            ids = op.get("ids")
            if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
                raise ValueError(f"edit operation {op['op']!r} needs an integer id list")
        if op["op"] == "transform":
            _check_vec3(op, "omega")
            _check_vec3(op, "t")
        if op["op"] == "merge-scene" and not isinstance(op.get("path"), str):
            raise ValueError("merge-scene needs a checkpoint path")
    return ops


def _copy_model(model: SceneModel) -> SceneModel:
    c, s = model.cloud, model.superpoints
    cache = None
    if model.cache is not None:
        cache = df.DeformationCache(
            model.cache.times.copy(), model.cache.omegas.copy(), model.cache.trans.copy()
        )
    return SceneModel(
        GaussianCloud(c.means.copy(), c.log_scales.copy(), c.quats.copy(), c.opacity_logits.copy(), c.sh.copy()),
        SuperpointModel(s.positions.copy(), s.neighbors.copy(), s.logits.copy()),
        model.net,
        np.asarray(model.train_times, dtype=np.float64).copy(),
        nonrigid=model.nonrigid,
        cache=cache,
    )


def _checked_ids(ids, m):
    out = np.asarray(sorted(set(int(i) for i in ids)), dtype=np.int64)
    if out.size and (out[0] < 0 or out[-1] >= m):
        bad = out[0] if out[0] < 0 else out[-1]
        raise ValueError(f"unknown superpoint id {bad}")
    return out


def _transform_rows(means, quats, omega, tvec):
    rot = geom.so3_exp_many(omega[None])[0]
    dq = geom.axis_angle_to_quat(omega[None])[0]
    new_means = means @ rot.T + tvec
    new_quats = geom.quat_multiply(np.broadcast_to(dq, quats.shape), quats)
    return new_means, new_quats


def _edit_transform(model, ids, omega, tvec):
    sp = model.superpoints
    ids = _checked_ids(ids, sp.num_superpoints)
    member = np.isin(model.assignment(), ids)
    cloud = model.cloud
    cloud.means[member], cloud.quats[member] = _transform_rows(
        cloud.means[member], cloud.quats[member], omega, tvec
    )
    rot = geom.so3_exp_many(omega[None])[0]
    sp.positions[ids] = sp.positions[ids] @ rot.T + tvec


def _edit_delete(model, ids):
    sp = model.superpoints
    m = sp.num_superpoints
    ids = _checked_ids(ids, m)
    if ids.size == 0:
        return
    keep_sp = np.ones(m, dtype=bool)
    keep_sp[ids] = False
    if not keep_sp.any():
        raise ValueError("empty scene: every superpoint was deleted")
    keep_g = keep_sp[model.assignment()]
    if not keep_g.any():
        raise ValueError("empty scene: every Gaussian was deleted")

    sp_map = np.full(m, -1, dtype=np.int64)
    sp_map[keep_sp] = np.arange(int(keep_sp.sum()))
    c = model.cloud
    model.cloud = GaussianCloud(
        c.means[keep_g], c.log_scales[keep_g], c.quats[keep_g], c.opacity_logits[keep_g], c.sh[keep_g]
    )
    new_pos = sp.positions[keep_sp]
    k_new = min(sp.k, new_pos.shape[0])
    mapped = sp_map[sp.neighbors[keep_g]]  # -1 marks slots whose superpoint died
    old_logits = sp.logits[keep_g]
    fills = nearest_superpoints(model.cloud.means, new_pos, k_new)
    nb = np.empty((mapped.shape[0], k_new), dtype=np.int64)
    lg = np.empty((mapped.shape[0], k_new))
    for row in range(mapped.shape[0]):
        slots = [(int(j), float(l)) for j, l in zip(mapped[row], old_logits[row]) if j >= 0]
        slots = slots[:k_new]
        have = {j for j, _ in slots}
        cold = min(l for _, l in slots) - 10.0  # fills must never win the argmax
        for cand in fills[row]:
            if len(slots) == k_new:
                break
            if int(cand) not in have:
                slots.append((int(cand), cold))
                have.add(int(cand))
        nb[row] = [j for j, _ in slots]
        lg[row] = [l for _, l in slots]
    model.superpoints = SuperpointModel(new_pos, nb, lg).validate()
    if model.cache is not None:
        model.cache = df.DeformationCache(
            model.cache.times, model.cache.omegas[:, keep_sp], model.cache.trans[:, keep_sp]
        ).validate()


def _required_cache(model):
    if model.cache is None and model.net is not None:
        model.ensure_cache()
    if model.cache is None:
        raise ValueError("model has no deformation cache to merge")
    return model.cache


def _edit_merge(model, op, base_dir):
    path = op["path"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    other = load_checkpoint(path)
    omega = _check_vec3(op, "omega", default=(0.0, 0.0, 0.0))
    tvec = _check_vec3(op, "t", default=(0.0, 0.0, 0.0))
    if np.any(omega) or np.any(tvec):
        _edit_transform(other, list(range(other.superpoints.num_superpoints)), omega, tvec)

    if model.cloud.sh.shape[1] != other.cloud.sh.shape[1]:
        raise ValueError("merge requires matching spherical-harmonics degrees")
    if model.superpoints.k != other.superpoints.k:
        raise ValueError("merge requires matching association widths")
    if not np.array_equal(model.train_times, other.train_times):
        raise ValueError("merge requires matching train timesteps")
    base_cache, other_cache = _required_cache(model), _required_cache(other)
    if not np.array_equal(base_cache.times, other_cache.times):
        raise ValueError("merge requires matching cache timesteps")

    a, b = model.cloud, other.cloud
    model.cloud = GaussianCloud(
        np.concatenate([a.means, b.means]),
        np.concatenate([a.log_scales, b.log_scales]),
        np.concatenate([a.quats, b.quats]),
        np.concatenate([a.opacity_logits, b.opacity_logits]),
        np.concatenate([a.sh, b.sh]),
    )
    sa, sb = model.superpoints, other.superpoints
    model.superpoints = SuperpointModel(
        np.concatenate([sa.positions, sb.positions]),
        np.concatenate([sa.neighbors, sb.neighbors + sa.num_superpoints]),
        np.concatenate([sa.logits, sb.logits]),
    ).validate()
    model.cache = df.DeformationCache(
        base_cache.times,
        np.concatenate([base_cache.omegas, other_cache.omegas], axis=1),
        np.concatenate([base_cache.trans, other_cache.trans], axis=1),
    ).validate()
    # no single network reproduces both scenes; the merged cache replays them
    model.net = None
    model.nonrigid = None


def apply_edit_script(model: SceneModel, script, *, base_dir="") -> SceneModel:
    """Apply an ordered list of edit operations to a copy of the model.

    delete: drop superpoints and every Gaussian assigned to them.
    transform: pre-compose a rigid (omega, t) onto the canonical centers and
    orientations of member Gaussians and the superpoint positions; stored
    per-superpoint motion then replays at the new location. Rendering an
    edited model uses the interpolation path (superpoint positions moved away
    from what the network was trained on).
    merge-scene: concatenate another checkpoint, its superpoint ids offset
    past this model's.
    """
    work = _copy_model(model)
    if work.net is not None:
        work.ensure_cache()
    for op in script:
        tag = op.get("op") if isinstance(op, dict) else None
        if tag == "delete":
            _edit_delete(work, op["ids"])
        elif tag == "transform":
            _edit_transform(work, op["ids"], _check_vec3(op, "omega"), _check_vec3(op, "t"))
        elif tag == "merge-scene":
            _edit_merge(work, op, base_dir)
        else:
            raise ValueError(f"unknown edit operation {tag!r}")
    return work


# -- superpoint-tinted export ---------------------------------------------------


def superpoint_colors(m, seed=0):
    """(M, 3) visually spread colors, deterministic for a given seed."""
    golden = 0.6180339887498949
    out = np.empty((m, 3))
    for i in range(m):
        hue = (seed * 0.1031 + i * golden) % 1.0
        value = 0.95 if i % 2 else 0.78
        out[i] = colorsys.hsv_to_rgb(hue, 0.68, value)
    return out


def export_superpoint_ply(path, model: SceneModel, seed=0):
    """Write the cloud tinted by hard superpoint assignment (degree-0 PLY)."""
    colors = superpoint_colors(model.superpoints.num_superpoints, seed)
    tint = colors[model.assignment()]
    c = model.cloud
    flat = GaussianCloud(
        c.means, c.log_scales, c.quats, c.opacity_logits, ((tint - 0.5) / SH_C0)[:, None, :]
    )
    save_ply(path, flat)
    return colors


# -- toy scenes ----------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    """Parameters of a generated dynamic scene with known rigid motion."""

    clusters: int = 2
    per_cluster: int = 100
    motion: str = "translate"  # translate | rotate | hinge | mixed
    timesteps: int = 20
    cameras: int = 8
    test_cameras: int = 2
    size: int = 64
    seed: int = 0
    camera_distance: float = 4.0
    camera_angle_x: float = 0.9

    def __post_init__(self):
        if self.motion not in ("translate", "rotate", "hinge", "mixed"):
            raise ValueError(f"unknown motion type {self.motion!r}")
        if self.clusters < 1 or self.per_cluster < 1 or self.timesteps < 2:
            raise ValueError("need at least 1 cluster, 1 Gaussian, and 2 timesteps")


def _cluster_centers(n):
    xs = (np.arange(n) - (n - 1) / 2.0) * 1.4
    return np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)


def toy_cloud(spec: ToySpec):
    """Canonical cloud and per-Gaussian cluster ids, deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    centers = _cluster_centers(spec.clusters)
    cluster_ids = np.repeat(np.arange(spec.clusters), spec.per_cluster)
    n = cluster_ids.shape[0]
    means = centers[cluster_ids] + rng.normal(0.0, 0.22, (n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    palette = superpoint_colors(spec.clusters, seed=spec.seed)
    colors = np.clip(palette[cluster_ids] * rng.uniform(0.7, 1.0, (n, 1)), 0.0, 1.0)
    cloud = GaussianCloud(
        means=means,
        log_scales=np.log(rng.uniform(0.04, 0.09, (n, 3))),
        quats=quats,
        opacity_logits=rng.uniform(1.2, 2.2, n),
        sh=((colors - 0.5) / SH_C0)[:, None, :],
    )
    return cloud, cluster_ids


def toy_motion(spec: ToySpec, t):
    """Ground-truth per-cluster world-frame (omega, trans) at time t.

    Every motion type is the identity at t = 0, so the canonical cloud is the
    scene's first frame.
    """
    t = float(t)
    n = spec.clusters
    centers = _cluster_centers(n)
    omega = np.zeros((n, 3))
    trans = np.zeros((n, 3))
    y = np.array([0.0, 1.0, 0.0])
    for i in range(n):
        sign = 1.0 if i % 2 == 0 else -1.0
        if spec.motion == "translate":
            trans[i] = t * 0.5 * sign * y
        elif spec.motion == "rotate":
            omega[i] = t * 1.1 * sign * y
            rot = geom.so3_exp_many(omega[i][None])[0]
            trans[i] = centers[i] - rot @ centers[i]  # pivot on the cluster center
        elif spec.motion == "hinge" and i > 0:
            omega[i] = t * 1.2 * sign * y  # swings about the world y axis
        elif spec.motion == "mixed":
            if i % 2 == 0:
                trans[i] = t * 0.5 * y
            else:
                omega[i] = t * 1.1 * y
                rot = geom.so3_exp_many(omega[i][None])[0]
                trans[i] = centers[i] - rot @ centers[i]
    return omega, trans


def _deformed_toy_params(cloud, cluster_ids, omega, trans):
    om = omega[cluster_ids]
    rot = geom.so3_exp_many(om)
    means = np.einsum("pij,pj->pi", rot, cloud.means) + trans[cluster_ids]
    quats = geom.quat_multiply(geom.axis_angle_to_quat(om), cloud.quats)
    return {
        "means": means,
        "log_scales": cloud.log_scales,
        "quats": quats,
        "opacity_logits": cloud.opacity_logits,
        "sh": cloud.sh,
    }


def _look_at(pos, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    pos = np.asarray(pos, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=np.float64), fwd)
    right /= np.linalg.norm(right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, np.cross(fwd, right), fwd, pos
    return c2w


def _toy_cameras(spec: ToySpec):
    train, test = [], []
    for i in range(spec.cameras):
        azim = 2.0 * np.pi * i / spec.cameras
        elev = 0.32 if i % 2 == 0 else -0.12
        train.append(_sphere_camera(spec, azim, elev))
    for i in range(spec.test_cameras):
        azim = 2.0 * np.pi * i / max(spec.test_cameras, 1) + np.pi / spec.cameras
        test.append(_sphere_camera(spec, azim, 0.12))
    return train, test


def _sphere_camera(spec, azim, elev):
    pos = spec.camera_distance * np.array(
        [np.cos(elev) * np.sin(azim), np.sin(elev), -np.cos(elev) * np.cos(azim)]
    )
    return Camera.from_camera_angle(spec.camera_angle_x, spec.size, spec.size, _look_at(pos))


def generate_toy_scene(spec: ToySpec, out_dir):
    """Render a dataset with known per-cluster rigid motion to ``out_dir``.

    Writes transforms_{train,test}.json, the PNG frames (this engine's own
    renders), the canonical cloud as canonical.ply, and motion_gt.json with
    the exact per-cluster transforms for oracle checks.
    """
    cloud, cluster_ids = toy_cloud(spec)
    times = np.linspace(0.0, 1.0, spec.timesteps)
    train_cams, test_cams = _toy_cameras(spec)
    background = np.ones(3)
    os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "test"), exist_ok=True)

    def render_split(split, cams):
        frames = []
        for ti, t in enumerate(times):
            omega, trans = toy_motion(spec, t)
            params = _deformed_toy_params(cloud, cluster_ids, omega, trans)
            for ci, cam in enumerate(cams):
                rel = f"{split}/r_{ci:02d}_t{ti:03d}"
                with ad.no_grad():
                    out = render_view(params, cam, background)
                save_image(os.path.join(out_dir, rel + ".png"), ad.data_of(out.image))
                frames.append(
                    {
                        "file_path": "./" + rel,
                        "time": float(t),
                        "transform_matrix": cam.camera_to_world().tolist(),
                    }
                )
        doc = {
            "camera_angle_x": spec.camera_angle_x,
            "w": spec.size,
            "h": spec.size,
            "frames": frames,
        }
        path = os.path.join(out_dir, f"transforms_{split}.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        return path

    paths = {
        "dir": out_dir,
        "train_json": render_split("train", train_cams),
        "test_json": render_split("test", test_cams),
        "ply": os.path.join(out_dir, "canonical.ply"),
        "motion": os.path.join(out_dir, "motion_gt.json"),
    }
    save_ply(paths["ply"], cloud)
    per_time = [toy_motion(spec, t) for t in times]
    span = cloud.means.max(axis=0) - cloud.means.min(axis=0)
    gt = {
        "motion": spec.motion,
        "times": times.tolist(),
        "extent": float(np.linalg.norm(span)),
        "cluster_ids": cluster_ids.tolist(),
        "omegas": [[per_time[ti][0][c].tolist() for ti in range(len(times))] for c in range(spec.clusters)],
        "trans": [[per_time[ti][1][c].tolist() for ti in range(len(times))] for c in range(spec.clusters)],
    }
    with open(paths["motion"], "w") as fh:
        json.dump(gt, fh, indent=2, sort_keys=True)
    return paths
