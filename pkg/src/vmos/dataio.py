"""On-disk formats: PPM/PGM rasters, video manifests, and parameter files.

Everything is bit-exact and language-neutral.  Frames are 8-bit binary
PPM (P6), instance labelings 8-bit binary PGM (P5) with the gray level
equal to the instance id, and a video directory carries a `manifest.json`
naming its frame files in order plus the id-to-track mapping.  Learned
parameters serialize as a single-line JSON header describing tensor
names and shapes followed by the raw little-endian float64 payload.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ContractError, DataError
from .features import Frame
from .heads import HeadParams
from .mask import InstanceMask
from .metrics import TrackSet
from .sgm import SgmParams
from .tensor import ConvKernel

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# netpbm rasters

def _write_netpbm(path, magic: bytes, payload: np.ndarray) -> None:
    h, w = payload.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed; pixel data starts after the single
    # whitespace byte that terminates the maxval token.
    if not blob.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    pos, tokens = len(magic), []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(blob[start:pos])
    pos += 1  # the single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: bad header tokens {tokens}") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit rasters supported, maxval {maxval}")
    depth = 3 if magic == b"P6" else 1
    data = blob[pos:pos + w * h * depth]
    if len(data) != w * h * depth:
        raise DataError(f"{path}: expected {w * h * depth} pixel bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape((h, w, 3) if depth == 3 else (h, w))


def write_ppm(path, frame: Frame) -> None:
    """Store a frame as binary PPM; values are rounded to 8 bits."""
    payload = np.clip(np.round(frame.rgb * 255.0), 0, 255).astype(np.uint8)
    _write_netpbm(path, b"P6", payload)


def read_ppm(path) -> Frame:
    return Frame(_read_netpbm(path, b"P6").astype(np.float64) / 255.0)


def write_pgm(path, mask: InstanceMask) -> None:
    """Store an instance labeling as binary PGM, gray level = instance id."""
    if mask.labels.size and mask.labels.max() > 255:
        raise DataError(f"instance ids above 255 do not fit 8-bit PGM: {mask.labels.max()}")
    _write_netpbm(path, b"P5", mask.labels.astype(np.uint8))


def read_pgm(path) -> InstanceMask:
    return InstanceMask(_read_netpbm(path, b"P5").astype(np.int32))


# ---------------------------------------------------------------------------
# video directories

def _frame_name(i: int) -> str:
    return f"frame_{i:05d}.ppm"


def _mask_name(i: int) -> str:
    return f"mask_{i:05d}.pgm"


def write_video(out_dir, frames, masks=None, tracks=None) -> None:
    """Write a video directory: frames, optional labelings, manifest.

    `tracks` maps instance id -> track id; identity for our own outputs,
    but kept explicit so the format stands alone.
    """
    frames = list(frames)
    if masks is not None:
        masks = list(masks)
        if len(masks) != len(frames):
            raise ContractError(f"{len(frames)} frames but {len(masks)} masks")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, frame in enumerate(frames):
        write_ppm(os.path.join(out_dir, _frame_name(i)), frame)
        entry = {"image": _frame_name(i)}
        if masks is not None:
            write_pgm(os.path.join(out_dir, _mask_name(i)), masks[i])
            entry["mask"] = _mask_name(i)
        entries.append(entry)
    if tracks is None and masks is not None:
        ids = set()
        for m in masks:
            ids.update(m.ids())
        tracks = {i: i for i in sorted(ids)}
    manifest = {
        "height": frames[0].height if frames else 0,
        "width": frames[0].width if frames else 0,
        "frames": entries,
        "tracks": {str(k): v for k, v in (tracks or {}).items()},
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(video_dir) -> dict:
    path = os.path.join(video_dir, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict) or "frames" not in manifest:
        raise DataError(f"manifest {path} lacks a frames list")
    return manifest


def read_video(video_dir, with_masks: bool = True):
    """Load a video directory -> (frames, TrackSet or None, manifest)."""
    manifest = read_manifest(video_dir)
    frames, masks = [], []
    for entry in manifest["frames"]:
        frames.append(read_ppm(os.path.join(video_dir, entry["image"])))
        if with_masks and "mask" in entry:
            masks.append(read_pgm(os.path.join(video_dir, entry["mask"])))
    if masks and len(masks) != len(frames):
        raise DataError(f"{video_dir}: {len(frames)} frames but {len(masks)} masks")
    gt = TrackSet(masks) if masks else None
    return frames, gt, manifest


# ---------------------------------------------------------------------------
# parameter files

def save_params(path, tensors: dict) -> None:
    """Write named arrays: one JSON header line, then raw '<f8' payloads."""
    meta = []
    payloads = []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64, order="C")
        meta.append({"name": str(name), "shape": list(a.shape)})
        payloads.append(a.astype("<f8").tobytes())
    header = json.dumps({"tensors": meta}, sort_keys=True)
    if "\n" in header:
        raise ContractError("parameter header must be a single line")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8") + b"\n")
            for blob in payloads:
                fh.write(blob)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: missing header line")
    try:
        meta = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(meta, dict) or not isinstance(meta.get("tensors"), list):
        raise DataError(f"{path}: header lacks a tensor list")
    out, pos = {}, newline + 1
    for entry in meta["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        chunk = blob[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: payload for {entry['name']} truncated")
        out[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def save_head_params(path, params: HeadParams) -> None:
    tensors = {}
    for branch, kernels in (("sal", params.sal), ("ins", params.ins)):
        for i, k in enumerate(kernels):
            tensors[f"{branch}{i}.weights"] = k.weights
            tensors[f"{branch}{i}.bias"] = k.bias
    save_params(path, tensors)


def load_head_params(path) -> HeadParams:
    tensors = load_params(path)

    def kernels(branch):
        out = []
        for i in range(4):
            try:
                w = tensors[f"{branch}{i}.weights"]
                b = tensors[f"{branch}{i}.bias"]
            except KeyError as exc:
                raise DataError(f"{path}: missing tensor {exc}") from exc
            out.append(ConvKernel(w, b))
        return tuple(out)

    return HeadParams(sal=kernels("sal"), ins=kernels("ins"))


def save_run_params(path, heads: HeadParams, sgm: dict) -> None:
    """Bundle decoder kernels and fusion weights into one parameter file."""
    tensors = {}
    for branch, kernels in (("sal", heads.sal), ("ins", heads.ins)):
        for i, k in enumerate(kernels):
            tensors[f"{branch}{i}.weights"] = k.weights
            tensors[f"{branch}{i}.bias"] = k.bias
    for branch in sorted(sgm):
        p = sgm[branch]
        for name in ("w1", "b1", "w2", "b2"):
            tensors[f"sgm.{branch}.{name}"] = getattr(p, name)
    save_params(path, tensors)


def load_run_params(path):
    """Inverse of save_run_params -> (HeadParams, {branch: SgmParams})."""
    heads = load_head_params(path)
    tensors = load_params(path)
    branches = sorted({name.split(".")[1] for name in tensors
                       if name.startswith("sgm.")})
    sgm = {}
    for branch in branches:
        try:
            sgm[branch] = SgmParams(*(tensors[f"sgm.{branch}.{n}"]
                                      for n in ("w1", "b1", "w2", "b2")))
        except KeyError as exc:
            raise DataError(f"{path}: missing tensor {exc}") from exc
    return heads, sgm
