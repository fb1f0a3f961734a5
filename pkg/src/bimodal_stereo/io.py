"""File formats: PFM, CSV depth, PPM/PNG shading, ASCII PLY, JSON poses and traces.

PFM stores rows bottom to top and little-endian float32 (negative scale
in the header); NaN marks a hole.  Every writer is deterministic, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import re

import numpy as np

from .core import LOG_FLOOR, DepthGrid, LogShadingImage, NormalField, PointCloud, SimilarityPose


class FormatError(ValueError):
    pass


def write_pfm(path, data):
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        kind = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) arrays")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    """Array of shape ``(H, W)`` or ``(H, W, 3)``, top row first, as float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    # three whitespace-separated header tokens after the magic
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: malformed PFM header")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM scale") from exc
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    n = w * h * channels
    if len(body) != 4 * n:
        raise FormatError(f"{path}: expected {n} floats, found {len(body) // 4}")
    a = np.frombuffer(body, dtype=dtype).astype(np.float64)
    a = a.reshape((h, w, 3) if channels == 3 else (h, w))
    return a[::-1].copy()


def load_depth(path, pitch=(1.0, 1.0)):
    """Depth from PFM or CSV; non-finite cells are holes."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        z = read_pfm(path)
        if z.ndim != 2:
            raise FormatError(f"{path}: depth PFM must have one channel")
    else:
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append([float(v) for v in line.replace(";", ",").split(",")])
        if not rows:
            raise FormatError(f"{path}: empty depth grid")
        if len({len(r) for r in rows}) != 1:
            raise FormatError(f"{path}: rows have different lengths")
        z = np.array(rows, dtype=float)
    return DepthGrid(z, np.isfinite(z), pitch)


def save_depth(path, depth):
    z = np.where(depth.mask, depth.z, np.nan)
    if os.path.splitext(str(path))[1].lower() == ".pfm":
        write_pfm(path, z)
    else:
        with open(path, "w") as fh:
            for row in z:
                fh.write(",".join("NaN" if not np.isfinite(v) else repr(float(v)) for v in row) + "\n")


def _read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: malformed PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P6", b"P3"):
        raise FormatError(f"{path}: only colour PPM (P6/P3) is supported")
    if not 0 < maxval <= 65535:
        raise FormatError(f"{path}: unsupported PPM bit depth (maxval {maxval})")
    if magic == b"P3":
        vals = np.array(raw[pos:].split(), dtype=float)
    else:
        body = raw[pos + 1:]
        dtype = np.uint8 if maxval < 256 else ">u2"
        vals = np.frombuffer(body, dtype=dtype).astype(float)
    if vals.size != w * h * 3:
        raise FormatError(f"{path}: PPM pixel count does not match header")
    return vals.reshape(h, w, 3), float(maxval), None


def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        if mode == "RGB":
            a, maxval, alpha = np.asarray(im, dtype=float), 255.0, None
        elif mode == "RGBA":
            rgba = np.asarray(im, dtype=float)
            a, maxval, alpha = rgba[..., :3], 255.0, rgba[..., 3] > 0
        else:
            raise FormatError(f"{path}: unsupported image mode {mode} (need 8-bit RGB or RGBA)")
    return a, maxval, alpha


def load_shading(path, normalize=True):
    """Log shading from a 3-channel PFM (already log) or a linear PPM/PNG.

    Image intensities are divided by the format's maximum value when
    ``normalize`` is set, clamped to a small floor and logged.  Only a PNG
    alpha of zero or a non-finite PFM value marks a hole.
    """
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        v = read_pfm(path)
        if v.ndim != 3:
            raise FormatError(f"{path}: shading PFM must have three channels")
        mask = np.all(np.isfinite(v), axis=2)
        return LogShadingImage(v, mask)
    if ext in (".ppm", ".pnm"):
        a, maxval, alpha = _read_ppm(path)
    elif ext == ".png":
        a, maxval, alpha = _read_png(path)
    else:
        raise FormatError(f"{path}: unknown shading format {ext!r}")
    if normalize:
        a = a / maxval
    return LogShadingImage.from_intensity(a, alpha)


def save_shading(path, shading):
    write_pfm(path, np.where(shading.mask[..., None], shading.values, np.nan))


def write_ppm(path, intensity, maxval=255):
    """Linear intensities in ``[0, 1]`` as a binary PPM."""
    a = np.clip(np.asarray(intensity, dtype=float), 0.0, 1.0)
    q = np.rint(a * maxval)
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n{maxval}\n".encode())
        fh.write(q.astype(np.uint8 if maxval < 256 else ">u2").tobytes())


def save_normals(path, normals):
    write_pfm(path, np.where(normals.mask[..., None], normals.n, np.nan))


def load_normals(path):
    n = read_pfm(path)
    if n.ndim != 3:
        raise FormatError(f"{path}: normal PFM must have three channels")
    mask = np.all(np.isfinite(n), axis=2)
    # float32 storage loses the last digits of unit length
    v = np.where(mask[..., None], n, 0.0)
    norm = np.linalg.norm(v, axis=2, keepdims=True)
    v = np.where(mask[..., None], v / np.where(norm > 0, norm, 1.0), np.nan)
    return NormalField(v, mask)


def save_normal_map(path, normals):
    """Normals as an 8-bit PNG with ``(n + 1) / 2`` per channel; holes are black."""
    from PIL import Image

    rgb = np.where(normals.mask[..., None], (np.nan_to_num(normals.n) + 1.0) / 2.0, 0.0)
    Image.fromarray(np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def write_ply(path, cloud):
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {pts.shape[0]}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts:
            fh.write(" ".join(repr(float(v)) for v in p) + "\n")


def read_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count = None
    for k, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"] or parts[:2] == ["format", "binary_big_endian"]:
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        if line.strip() == "end_header":
            body = lines[k + 1:k + 1 + (count or 0)]
            break
    else:
        raise FormatError(f"{path}: PLY header has no end_header")
    if count is None or len(body) != count:
        raise FormatError(f"{path}: PLY vertex count does not match")
    pts = np.array([[float(v) for v in line.split()[:3]] for line in body], dtype=float).reshape(-1, 3)
    return PointCloud(pts)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_pose(path, pose):
    write_json(path, pose.to_dict())


def load_pose(path):
    return SimilarityPose.from_dict(read_json(path))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, names, extra=None):
    """``manifest.json`` listing each file under ``out_dir`` with its SHA-256."""
    files = {name: sha256_file(os.path.join(out_dir, name)) for name in sorted(names)}
    doc = {"files": files}
    if extra:
        doc.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, doc)
    return path


def write_sweep_csv(path, result):
    """Rows are rotation angles, columns overlap fractions; failed cells read ``FAIL``."""
    with open(path, "w") as fh:
        fh.write("beta_deg," + ",".join(f"{p:g}" for p in result.overlaps) + "\n")
        for i, b in enumerate(result.betas):
            cells = ["FAIL" if result.failed[i, j] else f"{result.errors[i, j]:.6f}"
                     for j in range(len(result.overlaps))]
            fh.write(f"{b:g}," + ",".join(cells) + "\n")


def read_sweep_csv(path):
    """``(betas, overlaps, errors)`` with NaN for failed cells."""
    with open(path) as fh:
        rows = [line.strip().split(",") for line in fh if line.strip()]
    overlaps = [float(v) for v in rows[0][1:]]
    betas = [float(r[0]) for r in rows[1:]]
    errors = np.array([[np.nan if v == "FAIL" else float(v) for v in r[1:]] for r in rows[1:]])
    return betas, overlaps, errors


def log_floor():
    return float(np.log(LOG_FLOOR))
