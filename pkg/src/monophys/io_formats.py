"""File formats for scene bundles and run directories.

Everything is either a standard interchange format (PNG via Pillow, the
Middlebury ``.flo`` layout for optical flow, ASCII PLY for point clouds)
or raw little-endian float32 (per-pixel sigma maps).  All writers are
deterministic: identical inputs produce byte-identical files, so bundle
and run artifacts can be compared by checksum.

Conventions:

* PLY files are ASCII with ``x y z vx vy vz`` float properties, one
  vertex element; floats are written with ``%.17g`` so float64 values
  round-trip exactly.
* ``.flo`` files use the standard magic 202021.25 ("PIEH"), then int32
  width/height, then row-major (v is the second channel) float32 pairs.
* ``.raw`` maps are bare little-endian float32, row-major, with the
  shape implied by the camera (height x width).
* PNGs are 8-bit; images are clipped to [0,1] and rounded.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

FLO_MAGIC = 202021.25  # spells "PIEH" when read as little-endian bytes


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

_PLY_PROPS = ("x", "y", "z", "vx", "vy", "vz")


def write_ply(path, positions, velocities=None) -> None:
    """Write an ASCII PLY with positions and per-point velocities.

    Args:
        path: output file.
        positions: (n,3) array-like [m].
        velocities: (n,3) array-like [m/s]; zeros when omitted.
    """
    pos = np.asarray(_to_numpy(positions), dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (n,3), got {pos.shape}")
    vel = (np.zeros_like(pos) if velocities is None
           else np.asarray(_to_numpy(velocities), dtype=np.float64))
    if vel.shape != pos.shape:
        raise ValueError(f"velocities shape {vel.shape} != positions {pos.shape}")
    n = pos.shape[0]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property float64 {p}" for p in _PLY_PROPS]
    lines.append("end_header")
    rows = np.concatenate([pos, vel], axis=1)
    for row in rows:
        lines.append(" ".join("%.17g" % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[torch.Tensor, torch.Tensor]:
    """Read an ASCII PLY written by :func:`write_ply`.

    Returns:
        (positions (n,3), velocities (n,3)) float64 tensors.
    """
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props: list[str] = []
    body_at = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element" and tok[1] == "vertex":
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    if tuple(props) != _PLY_PROPS:
        raise ValueError(f"{path}: expected properties {_PLY_PROPS}, got {tuple(props)}")
    rows = np.array([[float(v) for v in text[body_at + j].split()] for j in range(n)],
                    dtype=np.float64).reshape(n, 6)
    return (torch.from_numpy(rows[:, :3].copy()),
            torch.from_numpy(rows[:, 3:].copy()))


# ---------------------------------------------------------------------------
# Middlebury .flo optical flow
# ---------------------------------------------------------------------------

def write_flo(path, flow) -> None:
    """Write a (H,W,2) flow field in the Middlebury ``.flo`` layout."""
    arr = np.asarray(_to_numpy(flow), dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"flow must be (H,W,2), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(arr.astype("<f4").tobytes())


def read_flo(path) -> torch.Tensor:
    """Read a ``.flo`` file into a (H,W,2) float32 tensor."""
    data = Path(path).read_bytes()
    magic, = struct.unpack_from("<f", data, 0)
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise ValueError(f"{path}: bad flow magic {magic}")
    w, h = struct.unpack_from("<ii", data, 4)
    arr = np.frombuffer(data, dtype="<f4", offset=12, count=h * w * 2)
    return torch.from_numpy(arr.reshape(h, w, 2).copy())


# ---------------------------------------------------------------------------
# Raw float32 maps (per-pixel sigma)
# ---------------------------------------------------------------------------

def write_raw_map(path, values) -> None:
    """Write a (H,W) map as bare little-endian float32."""
    arr = np.asarray(_to_numpy(values), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"raw map must be (H,W), got {arr.shape}")
    Path(path).write_bytes(arr.tobytes())


def read_raw_map(path, height: int, width: int) -> torch.Tensor:
    """Read a bare float32 map with the given shape."""
    data = Path(path).read_bytes()
    expect = height * width * 4
    if len(data) != expect:
        raise ValueError(f"{path}: expected {expect} bytes for "
                         f"{height}x{width} float32, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4").reshape(height, width)
    return torch.from_numpy(arr.copy())


# ---------------------------------------------------------------------------
# PNG images
# ---------------------------------------------------------------------------

def write_png(path, image, bits: int = 8) -> None:
    """Write an image as PNG.

    Args:
        path: output file.
        image: (H,W,3) RGB or (H,W) grayscale, values in [0,1].
        bits: 8, or 16 for single-channel images (finer alpha mattes).
    """
    arr = np.asarray(_to_numpy(image), dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"image must be (H,W) or (H,W,3), got {arr.shape}")
    if bits == 16:
        if arr.ndim != 2:
            raise ValueError("16-bit PNG supported for grayscale only")
        u16 = np.clip(np.rint(arr * 65535.0), 0, 65535).astype(np.uint16)
        Image.fromarray(u16, mode="I;16").save(path, format="PNG")
        return
    if bits != 8:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if u8.ndim == 2 else "RGB"
    Image.fromarray(u8, mode=mode).save(path, format="PNG")


def read_png(path) -> torch.Tensor:
    """Read a PNG into a float64 tensor in [0,1]: (H,W,3) RGB or (H,W) gray."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    return torch.from_numpy(arr.copy())


def _to_numpy(x):
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return x
