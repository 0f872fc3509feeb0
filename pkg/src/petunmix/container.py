"""On-disk container: a canonical JSON header plus raw float32 sections.

Layout: the 5-byte magic b"PUXC\\n", an 8-byte little-endian section giving
the header length, the UTF-8 JSON header, then the concatenated payload
sections in header order.  Image payloads are little-endian 32-bit floats in
frame-major order, voxels flattened x, then y, then z (C order of an
(nx, ny, nz) volume).  The header always carries the format version, the
geometry, the frame times and the provenance map; writes are atomic
(temp file + rename) and the canonical JSON encoding makes a
write -> read -> write round trip byte-identical.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DataError
from .model import DynamicImage, ImageGeometry

MAGIC = b"PUXC\n"
FORMAT_VERSION = "1"


def _canonical_header_bytes(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, header, sections):
    """Writes named float32 sections with the given header metadata.

    `sections` maps name -> array; shapes and the section order are recorded
    in the header.  Any existing 'sections' key in `header` is replaced.
    """
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    meta = []
    payloads = []
    for name, arr in sections.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        meta.append({"name": name, "shape": list(arr32.shape), "dtype": "<f4"})
        payloads.append(arr32.tobytes())
    header["sections"] = meta
    blob = _canonical_header_bytes(header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)
    os.replace(tmp, path)


def read_container(path):
    """Returns (header, sections) with sections as float32 arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a container file (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt header ({exc})") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version "
                            f"{header.get('format_version')!r}")
        sections = {}
        for meta in header.get("sections", []):
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise DataError(f"{path}: truncated section {meta['name']!r}")
            sections[meta["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after declared sections")
    return header, sections


def geometry_header(geometry: ImageGeometry):
    return {
        "nx": geometry.nx, "ny": geometry.ny, "nz": geometry.nz,
        "voxel_size_mm": geometry.voxel_size_mm,
        "frame_times_s": [[float(a), float(b)] for a, b in geometry.frame_times],
    }


def geometry_from_header(header):
    try:
        geo = header["geometry"]
        return ImageGeometry(int(geo["nx"]), int(geo["ny"]), int(geo["nz"]),
                             float(geo["voxel_size_mm"]),
                             np.asarray(geo["frame_times_s"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid geometry header: {exc}") from exc


def image_from_sections(header, sections, name):
    if name not in sections:
        raise DataError(f"container has no section {name!r}")
    geometry = geometry_from_header(header)
    return DynamicImage(geometry, np.asarray(sections[name], dtype=float))


def container_from_csv(csv_path, geometry: ImageGeometry, out_path,
                       provenance=None):
    """Import shim: wraps a plain L x N CSV matrix of TACs as a container."""
    data = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    image = DynamicImage(geometry, data)
    header = {"kind": "image", "geometry": geometry_header(geometry),
              "provenance": provenance or {"source_csv": os.path.basename(csv_path)}}
    write_container(out_path, header, {"Y": image.data})
    return out_path


def write_pgm(path, values, maxval=255):
    """Lossless 8-bit portable graymap of a 2-D array already in [0, 1]."""
    img = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    if img.ndim != 2:
        raise DataError("PGM export needs a 2-D slice")
    pixels = np.rint(img * maxval).astype(np.uint8)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(pixels.tobytes())
    os.replace(tmp, path)
