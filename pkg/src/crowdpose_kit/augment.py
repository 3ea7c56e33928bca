"""Synthetic occlusion augmentation with cutout pastes.

Three paste flavors: random objects, person body parts, and full bodies.
Object and full-body cutouts are scaled to a uniform area fraction (default
8% to 70%) of the target person's box; full-body pastes keep their center
out of the box's central region so a second complete person never sits in
the middle of the crop. Combination policies apply two flavors at once
("and") or exactly one ("or"). Keypoints of any person landing under a
pasted pixel get their flag moved to occluded; coordinates never change.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .annotations import BBox, ImageRecord, Keypoint, Visibility
from .errors import ConfigError, InventoryError
from .masks import (CUTOUT_BODY_PART, CUTOUT_FULL_BODY, CUTOUT_OBJECT, Cutout,
                    RasterImage, composite_with_mask, read_pam, write_pam)

METHOD_OBJECTS = "objects"
METHOD_BODY_PARTS = "body_parts"
METHOD_FULL_BODY = "full_body"
METHOD_PARTS_AND_OBJECTS = "parts_and_objects"
METHOD_FULL_AND_OBJECTS = "full_and_objects"
METHOD_PARTS_OR_OBJECTS = "parts_or_objects"
METHOD_FULL_OR_OBJECTS = "full_or_objects"
METHOD_NONE = "none"

METHODS = (METHOD_OBJECTS, METHOD_BODY_PARTS, METHOD_FULL_BODY,
           METHOD_PARTS_AND_OBJECTS, METHOD_FULL_AND_OBJECTS,
           METHOD_PARTS_OR_OBJECTS, METHOD_FULL_OR_OBJECTS, METHOD_NONE)

FRAC_AREA = "area"      # 8-70% read as an area fraction of the person box
FRAC_LINEAR = "linear"  # 8-70% read as a linear size fraction (area = f^2)


@dataclass(frozen=True)
class AugmentConfig:
    method: str = METHOD_OBJECTS
    area_frac_min: float = 0.08
    area_frac_max: float = 0.70
    frac_mode: str = FRAC_AREA
    part_frac_min: float = 0.20
    part_frac_max: float = 0.60
    or_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not 0.0 < self.area_frac_min <= self.area_frac_max <= 1.0:
            raise ConfigError("need 0 < area_frac_min <= area_frac_max <= 1")
        if self.frac_mode not in (FRAC_AREA, FRAC_LINEAR):
            raise ConfigError(f"unknown frac mode {self.frac_mode!r}")
        if not 0.0 <= self.or_probability <= 1.0:
            raise ConfigError("or_probability outside [0, 1]")

    def area_band(self, box_area: float) -> tuple[float, float]:
        """Admissible pasted-pixel area range for a person box."""
        lo, hi = self.area_frac_min, self.area_frac_max
        if self.frac_mode == FRAC_LINEAR:
            lo, hi = lo * lo, hi * hi
        return lo * box_area, hi * box_area

    def draw_area(self, rng: np.random.Generator, box_area: float) -> float:
        frac = rng.uniform(self.area_frac_min, self.area_frac_max)
        if self.frac_mode == FRAC_LINEAR:
            frac *= frac
        return frac * box_area


@dataclass
class CutoutInventory:
    objects: list[Cutout] = field(default_factory=list)
    persons: list[Cutout] = field(default_factory=list)


@dataclass(frozen=True)
class Placement:
    """A planned paste: which cutout, where, and at what size.

    src_rect (cutout-local x, y, w, h) is set for body-part pastes only and
    names the sub-rectangle of the source person cutout being pasted; it is
    recorded so logs replay exactly.
    """

    cutout_index: int
    kind: str
    dst_x: int
    dst_y: int
    dst_w: int
    dst_h: int
    src_rect: Optional[tuple[int, int, int, int]] = None

    def to_json(self) -> dict:
        return {
            "cutout_index": self.cutout_index, "kind": self.kind,
            "dst_x": self.dst_x, "dst_y": self.dst_y,
            "dst_w": self.dst_w, "dst_h": self.dst_h,
            "src_rect": None if self.src_rect is None else list(self.src_rect),
        }


def _snap_dims(target_area: float, ref_w: float, ref_h: float,
               lo: float, hi: float,
               max_w: Optional[int] = None, max_h: Optional[int] = None) -> tuple[int, int]:
    """Integer (w, h) with w*h inside [lo, hi], aspect close to ref_w:ref_h.

    Rounding alone can push a boundary draw outside the fraction bounds, so
    the height is chosen from the valid integer range nearest the exact
    area. Degenerate caps fall back to the nearest representable size.
    """
    s = math.sqrt(target_area / (ref_w * ref_h))
    w = max(1, int(math.floor(ref_w * s + 0.5)))
    if max_w is not None:
        w = min(w, max_w)
    h_lo = max(1, int(math.ceil(lo / w - 1e-9)))
    h_hi = int(math.floor(hi / w + 1e-9))
    if max_h is not None:
        h_hi = min(h_hi, max_h)
    h = int(math.floor(target_area / w + 0.5))
    if h_lo <= h_hi:
        h = min(max(h, h_lo), h_hi)
    else:
        h = max(1, h if max_h is None else min(h, max_h))
    return w, h


def _sample_center_roundtrip(rng: np.random.Generator, bbox: BBox,
                             dst_w: int, dst_h: int,
                             exclude_central: bool) -> tuple[int, int]:
    """Sample integer top-left so the realized paste center obeys the rules.

    The center (dst_x + w/2, dst_y + h/2) must land inside the box; with
    exclude_central it must also avoid the middle 50%-per-axis region.
    Rounding is re-checked against the realized center, not the drawn one.
    """
    x_lo, x_hi = bbox.x + 0.25 * bbox.w, bbox.x + 0.75 * bbox.w
    y_lo, y_hi = bbox.y + 0.25 * bbox.h, bbox.y + 0.75 * bbox.h
    for _ in range(256):
        cx = rng.uniform(bbox.x, bbox.x + bbox.w)
        cy = rng.uniform(bbox.y, bbox.y + bbox.h)
        dst_x = int(math.floor(cx - dst_w / 2.0 + 0.5))
        dst_y = int(math.floor(cy - dst_h / 2.0 + 0.5))
        rx = dst_x + dst_w / 2.0
        ry = dst_y + dst_h / 2.0
        if not bbox.contains(rx, ry):
            continue
        if exclude_central and (x_lo <= rx <= x_hi and y_lo <= ry <= y_hi):
            continue
        return dst_x, dst_y
    raise ConfigError(f"could not place a {dst_w}x{dst_h} cutout on bbox "
                      f"{bbox.w}x{bbox.h}")


def plan_object_cutout(rng: np.random.Generator, person: BBox,
                       inventory: CutoutInventory,
                       cfg: AugmentConfig = AugmentConfig()) -> Placement:
    """Plan one object paste: area a uniform fraction of the person box,
    cutout aspect preserved, center uniform inside the box."""
    if not inventory.objects:
        raise InventoryError("inventory has no object cutouts")
    idx = int(rng.integers(len(inventory.objects)))
    cut = inventory.objects[idx]
    target = cfg.draw_area(rng, person.area)
    lo, hi = cfg.area_band(person.area)
    dst_w, dst_h = _snap_dims(target, cut.raster.width, cut.raster.height, lo, hi)
    dst_x, dst_y = _sample_center_roundtrip(rng, person, dst_w, dst_h, False)
    return Placement(idx, CUTOUT_OBJECT, dst_x, dst_y, dst_w, dst_h)


def plan_body_part_cutout(rng: np.random.Generator, person: BBox,
                          inventory: CutoutInventory,
                          cfg: AugmentConfig = AugmentConfig()) -> Placement:
    """Plan a body-part paste: a sub-rectangle (20-60% of the source person
    cutout's area) placed like an object cutout, position unrestricted."""
    if not inventory.persons:
        raise InventoryError("inventory has no person cutouts")
    idx = int(rng.integers(len(inventory.persons)))
    cut = inventory.persons[idx]
    cw, ch = cut.raster.width, cut.raster.height
    part_frac = rng.uniform(cfg.part_frac_min, cfg.part_frac_max)
    p_lo = cfg.part_frac_min * cw * ch
    p_hi = cfg.part_frac_max * cw * ch
    pw, ph = _snap_dims(part_frac * cw * ch, cw, ch, p_lo, p_hi, max_w=cw, max_h=ch)
    alpha = cut.raster.pixels[:, :, 3]
    px = py = 0
    for _ in range(16):
        px = int(rng.integers(0, cw - pw + 1))
        py = int(rng.integers(0, ch - ph + 1))
        if np.any(alpha[py:py + ph, px:px + pw]):
            break
    target = cfg.draw_area(rng, person.area)
    lo, hi = cfg.area_band(person.area)
    dst_w, dst_h = _snap_dims(target, pw, ph, lo, hi)
    dst_x, dst_y = _sample_center_roundtrip(rng, person, dst_w, dst_h, False)
    return Placement(idx, CUTOUT_BODY_PART, dst_x, dst_y, dst_w, dst_h,
                     src_rect=(px, py, pw, ph))


def plan_full_body_cutout(rng: np.random.Generator, person: BBox,
                          inventory: CutoutInventory,
                          cfg: AugmentConfig = AugmentConfig()) -> Placement:
    """Plan a full-body paste; the center avoids the box's central region
    (middle 50% per axis) so the crop keeps only one complete person."""
    if not inventory.persons:
        raise InventoryError("inventory has no person cutouts")
    idx = int(rng.integers(len(inventory.persons)))
    cut = inventory.persons[idx]
    target = cfg.draw_area(rng, person.area)
    lo, hi = cfg.area_band(person.area)
    dst_w, dst_h = _snap_dims(target, cut.raster.width, cut.raster.height, lo, hi)
    dst_x, dst_y = _sample_center_roundtrip(rng, person, dst_w, dst_h, True)
    return Placement(idx, CUTOUT_FULL_BODY, dst_x, dst_y, dst_w, dst_h)


@dataclass(frozen=True)
class FlagChange:
    person_index: int
    keypoint_index: int
    old: Visibility
    new: Visibility

    def to_json(self) -> dict:
        return {"person_index": self.person_index, "keypoint_index": self.keypoint_index,
                "old": self.old.value, "new": self.new.value}


@dataclass
class AugmentResult:
    image: RasterImage
    record: ImageRecord
    placements: list[Placement]
    flag_changes: list[FlagChange]
    painted: np.ndarray  # (H, W) bool, union of composited opaque pixels


def _cutout_for(placement: Placement, inventory: CutoutInventory) -> Cutout:
    pool = inventory.objects if placement.kind == CUTOUT_OBJECT else inventory.persons
    cut = pool[placement.cutout_index]
    if placement.src_rect is None:
        return cut
    px, py, pw, ph = placement.src_rect
    part = cut.raster.pixels[py:py + ph, px:px + pw]
    return Cutout(raster=RasterImage(pw, ph, part.copy()),
                  src_bbox=BBox(float(px), float(py), float(pw), float(ph)),
                  kind=CUTOUT_BODY_PART)


def _plan_all(rng, person_bbox, config, inventory) -> list[Placement]:
    method = config.method
    if method == METHOD_OBJECTS:
        return [plan_object_cutout(rng, person_bbox, inventory, config)]
    if method == METHOD_BODY_PARTS:
        return [plan_body_part_cutout(rng, person_bbox, inventory, config)]
    if method == METHOD_FULL_BODY:
        return [plan_full_body_cutout(rng, person_bbox, inventory, config)]
    if method == METHOD_PARTS_AND_OBJECTS:
        return [plan_body_part_cutout(rng, person_bbox, inventory, config),
                plan_object_cutout(rng, person_bbox, inventory, config)]
    if method == METHOD_FULL_AND_OBJECTS:
        return [plan_full_body_cutout(rng, person_bbox, inventory, config),
                plan_object_cutout(rng, person_bbox, inventory, config)]
    if method == METHOD_PARTS_OR_OBJECTS:
        if rng.random() < config.or_probability:
            return [plan_body_part_cutout(rng, person_bbox, inventory, config)]
        return [plan_object_cutout(rng, person_bbox, inventory, config)]
    if method == METHOD_FULL_OR_OBJECTS:
        if rng.random() < config.or_probability:
            return [plan_full_body_cutout(rng, person_bbox, inventory, config)]
        return [plan_object_cutout(rng, person_bbox, inventory, config)]
    raise ConfigError(f"method {method!r} plans nothing")


def apply_augmentation(rng: np.random.Generator, image: RasterImage,
                       record: ImageRecord, target_person_index: int,
                       config: AugmentConfig,
                       inventory: CutoutInventory) -> AugmentResult:
    """Paste planned cutouts over the target person and update flags.

    "And" methods apply both sub-methods, "or" methods exactly one (the
    person-based branch wins a draw with probability or_probability). Any
    keypoint of any person whose floor pixel lands on a pasted pixel moves
    Visible/SelfOccluded -> Occluded; Occluded and Unlabeled stay put.
    Inputs are left unchanged.
    """
    if config.method == METHOD_NONE:
        raise ConfigError("method 'none' requested; nothing to apply")
    if not 0 <= target_person_index < len(record.persons):
        raise ConfigError(f"target person index {target_person_index} out of range")
    person_bbox = record.persons[target_person_index].bbox
    placements = _plan_all(rng, person_bbox, config, inventory)

    out = image
    painted = np.zeros((image.height, image.width), dtype=bool)
    for placement in placements:
        cut = _cutout_for(placement, inventory)
        out, mask = composite_with_mask(out, cut, placement.dst_x, placement.dst_y,
                                        placement.dst_w, placement.dst_h)
        painted |= mask

    changes: list[FlagChange] = []
    new_persons = []
    for pi, person in enumerate(record.persons):
        new_kps = []
        for ki, kp in enumerate(person.pose.keypoints):
            new_kp = kp
            if kp.vis in (Visibility.VISIBLE, Visibility.SELF_OCCLUDED):
                px, py = int(math.floor(kp.x)), int(math.floor(kp.y))
                if 0 <= px < image.width and 0 <= py < image.height and painted[py, px]:
                    new_kp = Keypoint(kp.x, kp.y, Visibility.OCCLUDED)
                    changes.append(FlagChange(pi, ki, kp.vis, Visibility.OCCLUDED))
            new_kps.append(new_kp)
        new_persons.append(replace(person, pose=replace(person.pose,
                                                        keypoints=tuple(new_kps))))
    new_record = replace(record, persons=tuple(new_persons))
    return AugmentResult(image=out, record=new_record, placements=placements,
                         flag_changes=changes, painted=painted)


# --- inventory directory layout: inventory.json + one PAM per cutout ---

def save_inventory(directory: Path, inventory: CutoutInventory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"objects": [], "persons": []}
    for group, cutouts in (("objects", inventory.objects), ("persons", inventory.persons)):
        for i, cut in enumerate(cutouts):
            name = f"{group[:-1]}_{i:04d}.pam"
            (directory / name).write_bytes(write_pam(cut.raster))
            entry = {
                "pam": name, "kind": cut.kind,
                "src_bbox": [cut.src_bbox.x, cut.src_bbox.y, cut.src_bbox.w,
                             cut.src_bbox.h],
                "keypoints": None if cut.keypoints is None else
                             [[k.x, k.y, k.vis.value] for k in cut.keypoints],
            }
            index[group].append(entry)
    (directory / "inventory.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_inventory(directory: Path) -> CutoutInventory:
    directory = Path(directory)
    index_path = directory / "inventory.json"
    if not index_path.is_file():
        raise InventoryError(f"no inventory.json under {directory}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    inventory = CutoutInventory()
    for group, target in (("objects", inventory.objects), ("persons", inventory.persons)):
        for entry in index.get(group, []):
            raster = read_pam((directory / entry["pam"]).read_bytes())
            kps = None
            if entry.get("keypoints") is not None:
                kps = tuple(Keypoint(float(x), float(y), Visibility(v))
                            for x, y, v in entry["keypoints"])
            bx, by, bw, bh = entry["src_bbox"]
            target.append(Cutout(raster=raster, src_bbox=BBox(bx, by, bw, bh),
                                 kind=entry["kind"], keypoints=kps))
    return inventory
