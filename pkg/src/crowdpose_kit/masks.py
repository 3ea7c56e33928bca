"""Binary segmentation masks, cutout extraction and alpha compositing.

Masks decode from polygons (even-odd rule at pixel centers) or from
column-major run-length counts. Cutouts are tight RGBA crops with binary
alpha; compositing uses nearest-neighbor scaling with floor rounding so
results are bit-exact across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .annotations import BBox, Keypoint, SegmentMask
from .errors import GeometryError, MaskDecodeError


@dataclass
class RasterImage:
    """Row-major RGBA pixel buffer, 8 bits per channel."""

    width: int
    height: int
    pixels: np.ndarray  # (height, width, 4) uint8

    @classmethod
    def filled(cls, width: int, height: int, rgba=(0, 0, 0, 255)) -> "RasterImage":
        px = np.empty((height, width, 4), dtype=np.uint8)
        px[:, :] = np.asarray(rgba, dtype=np.uint8)
        return cls(width, height, px)

    def copy(self) -> "RasterImage":
        return RasterImage(self.width, self.height, self.pixels.copy())


CUTOUT_OBJECT = "object"
CUTOUT_BODY_PART = "body_part"
CUTOUT_FULL_BODY = "full_body"


@dataclass
class Cutout:
    """Alpha-masked patch extracted from a source image.

    Alpha is binary (0 or 255) and src_bbox is the tight bounding box of the
    nonzero alpha in the source image. Keypoints, when present, are in
    cutout-local coordinates.
    """

    raster: RasterImage
    src_bbox: BBox
    kind: str
    keypoints: Optional[tuple[Keypoint, ...]] = None


def decode_polygon(poly_mask: SegmentMask, w: int, h: int) -> np.ndarray:
    """Rasterize polygons to an (h, w) bool mask.

    A pixel is foreground iff its center lies inside any polygon under the
    even-odd rule; multiple polygons are unioned.
    """
    if poly_mask.kind != "polygons":
        raise GeometryError(f"expected polygon mask, got {poly_mask.kind!r}")
    out = np.zeros((h, w), dtype=bool)
    cy = np.arange(h, dtype=np.float64) + 0.5
    cx = np.arange(w, dtype=np.float64) + 0.5
    for poly in poly_mask.polygons:
        if len(poly) < 3:
            raise GeometryError(f"polygon needs >= 3 vertices, got {len(poly)}")
        crossings = np.zeros((h, w), dtype=np.int64)
        n = len(poly)
        for i in range(n):
            x0, y0 = poly[i]
            x1, y1 = poly[(i + 1) % n]
            if y0 == y1:
                continue
            ymin, ymax = (y0, y1) if y0 < y1 else (y1, y0)
            rows = np.nonzero((cy >= ymin) & (cy < ymax))[0]
            if rows.size == 0:
                continue
            t = (cy[rows] - y0) / (y1 - y0)
            xint = x0 + t * (x1 - x0)
            crossings[rows] += cx[None, :] < xint[:, None]
        out |= (crossings & 1).astype(bool)
    return out


def decode_rle(rle_mask: SegmentMask) -> np.ndarray:
    """Decode column-major run lengths (first run is background) to a bool mask."""
    if rle_mask.kind != "rle":
        raise MaskDecodeError(f"expected RLE mask, got {rle_mask.kind!r}")
    h, w = rle_mask.rle_size
    counts = rle_mask.rle_counts
    total = int(sum(counts))
    if total != h * w:
        raise MaskDecodeError(f"RLE runs sum to {total}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T


def encode_rle(mask: np.ndarray) -> SegmentMask:
    """Encode a bool mask to column-major run lengths starting with background."""
    h, w = mask.shape
    flat = np.asarray(mask, dtype=bool).T.reshape(-1)
    if flat.size == 0:
        raise MaskDecodeError("cannot encode an empty mask")
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return SegmentMask(kind="rle", rle_size=(h, w), rle_counts=tuple(int(c) for c in counts))


def extract_cutout(image: RasterImage, mask: np.ndarray, kind: str,
                   keypoints: Optional[tuple[Keypoint, ...]] = None) -> Cutout:
    """Crop the tight bounding region of the mask; alpha 255 on foreground."""
    if mask.shape != (image.height, image.width):
        raise GeometryError(f"mask shape {mask.shape} does not match image "
                            f"{image.height}x{image.width}")
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise MaskDecodeError("cannot extract a cutout from an empty mask")
    y0, y1 = np.nonzero(rows)[0][[0, -1]]
    x0, x1 = np.nonzero(cols)[0][[0, -1]]
    crop = image.pixels[y0:y1 + 1, x0:x1 + 1].copy()
    crop[:, :, 3] = np.where(mask[y0:y1 + 1, x0:x1 + 1], 255, 0)
    raster = RasterImage(int(x1 - x0 + 1), int(y1 - y0 + 1), crop)
    local_kps = None
    if keypoints is not None:
        local_kps = tuple(Keypoint(k.x - float(x0), k.y - float(y0), k.vis)
                          for k in keypoints)
    return Cutout(raster=raster, kind=kind,
                  src_bbox=BBox(float(x0), float(y0), float(x1 - x0 + 1),
                                float(y1 - y0 + 1)),
                  keypoints=local_kps)


def scale_nearest(raster: RasterImage, dst_w: int, dst_h: int) -> RasterImage:
    """Nearest-neighbor resize with floor rounding of the source index."""
    if dst_w < 1 or dst_h < 1:
        raise GeometryError(f"target size must be >= 1, got {dst_w}x{dst_h}")
    src_x = (np.arange(dst_w) * raster.width) // dst_w
    src_y = (np.arange(dst_h) * raster.height) // dst_h
    return RasterImage(dst_w, dst_h, raster.pixels[np.ix_(src_y, src_x)])


def composite(target: RasterImage, cutout: Cutout, dst_x: int, dst_y: int,
              dst_w: int, dst_h: int) -> RasterImage:
    """Paste a scaled cutout over the target; returns a new raster.

    The cutout is scaled to (dst_w, dst_h), foreground pixels replace the
    target, and anything falling outside the target is clipped.
    """
    out, _ = composite_with_mask(target, cutout, dst_x, dst_y, dst_w, dst_h)
    return out


def composite_with_mask(target: RasterImage, cutout: Cutout, dst_x: int, dst_y: int,
                        dst_w: int, dst_h: int) -> tuple[RasterImage, np.ndarray]:
    """Like composite, additionally returning the bool mask of painted pixels."""
    scaled = scale_nearest(cutout.raster, int(dst_w), int(dst_h))
    out = target.copy()
    painted = np.zeros((target.height, target.width), dtype=bool)

    tx0 = max(int(dst_x), 0)
    ty0 = max(int(dst_y), 0)
    tx1 = min(int(dst_x) + int(dst_w), target.width)
    ty1 = min(int(dst_y) + int(dst_h), target.height)
    if tx0 >= tx1 or ty0 >= ty1:
        return out, painted

    sx0 = tx0 - int(dst_x)
    sy0 = ty0 - int(dst_y)
    patch = scaled.pixels[sy0:sy0 + (ty1 - ty0), sx0:sx0 + (tx1 - tx0)]
    opaque = patch[:, :, 3] > 0
    region = out.pixels[ty0:ty1, tx0:tx1]
    region[opaque] = patch[opaque]
    painted[ty0:ty1, tx0:tx1] = opaque
    return out, painted


# --- raster I/O: binary PPM (P6) for RGB, PAM (P7) for RGBA and 16-bit depth ---

def write_ppm(raster: RasterImage) -> bytes:
    header = f"P6\n{raster.width} {raster.height}\n255\n".encode("ascii")
    return header + raster.pixels[:, :, :3].tobytes()


def write_pam(raster: RasterImage) -> bytes:
    header = (f"P7\nWIDTH {raster.width}\nHEIGHT {raster.height}\nDEPTH 4\n"
              f"MAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n").encode("ascii")
    return header + raster.pixels.tobytes()


def write_depth_pam(depth: np.ndarray) -> bytes:
    """16-bit grayscale PAM; depth values expected in [0, 1], big-endian samples."""
    h, w = depth.shape
    samples = np.clip(np.round(np.asarray(depth, dtype=np.float64) * 65535.0),
                      0, 65535).astype(">u2")
    header = (f"P7\nWIDTH {w}\nHEIGHT {h}\nDEPTH 1\nMAXVAL 65535\n"
              f"TUPLTYPE GRAYSCALE\nENDHDR\n").encode("ascii")
    return header + samples.tobytes()


def _parse_pam_header(data: bytes) -> tuple[dict, int]:
    end = data.find(b"ENDHDR\n")
    if not data.startswith(b"P7\n") or end < 0:
        raise MaskDecodeError("not a PAM stream")
    fields = {}
    for line in data[3:end].decode("ascii").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition(" ")
        fields[key] = value.strip()
    return fields, end + len(b"ENDHDR\n")


def read_pam(data: bytes) -> RasterImage:
    fields, offset = _parse_pam_header(data)
    w, h = int(fields["WIDTH"]), int(fields["HEIGHT"])
    if int(fields["DEPTH"]) != 4 or int(fields["MAXVAL"]) != 255:
        raise MaskDecodeError("expected an 8-bit RGBA PAM")
    px = np.frombuffer(data[offset:offset + w * h * 4], dtype=np.uint8)
    if px.size != w * h * 4:
        raise MaskDecodeError("truncated PAM payload")
    return RasterImage(w, h, px.reshape((h, w, 4)).copy())


def read_depth_pam(data: bytes) -> np.ndarray:
    fields, offset = _parse_pam_header(data)
    w, h = int(fields["WIDTH"]), int(fields["HEIGHT"])
    if int(fields["DEPTH"]) != 1 or int(fields["MAXVAL"]) != 65535:
        raise MaskDecodeError("expected a 16-bit grayscale PAM")
    raw = np.frombuffer(data[offset:offset + w * h * 2], dtype=">u2")
    if raw.size != w * h:
        raise MaskDecodeError("truncated PAM payload")
    return raw.reshape((h, w)).astype(np.float64) / 65535.0


def read_ppm(data: bytes) -> RasterImage:
    if not data.startswith(b"P6"):
        raise MaskDecodeError("not a binary PPM stream")
    # Scan the three header integers; exactly one whitespace byte separates
    # the maxval from the payload, and payload bytes may look like whitespace.
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        values.append(int(data[start:pos]))
    pos += 1  # the single whitespace byte after maxval
    w, h, maxval = values
    if maxval != 255:
        raise MaskDecodeError("expected an 8-bit PPM")
    rgb = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if rgb.size != w * h * 3:
        raise MaskDecodeError("truncated PPM payload")
    px = np.empty((h, w, 4), dtype=np.uint8)
    px[:, :, :3] = rgb.reshape((h, w, 3))
    px[:, :, 3] = 255
    return RasterImage(w, h, px)
