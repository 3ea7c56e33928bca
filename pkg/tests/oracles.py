"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written as plain scalar Python (loops,
math.*) with no calls into the package's numerical code paths, so a bug in
the library cannot hide in its own oracle.
"""

from __future__ import annotations

import itertools
import math

from crowdpose_kit.annotations import Visibility


def point_in_polygon(px: float, py: float, poly) -> bool:
    """Even-odd crossing test (PNPOLY form)."""
    inside = False
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if (y0 > py) != (y1 > py):
            xint = (x1 - x0) * (py - y0) / (y1 - y0) + x0
            if px < xint:
                inside = not inside
    return inside


def rasterize_polygons(polys, w: int, h: int):
    """Per-pixel-center brute force rasterization, unioned over polygons."""
    grid = [[False] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            cx, cy = x + 0.5, y + 0.5
            for poly in polys:
                if point_in_polygon(cx, cy, poly):
                    grid[y][x] = True
                    break
    return grid


def rle_encode(mask) -> list[int]:
    """Column-major run lengths starting with background (groupby-based)."""
    h = len(mask)
    w = len(mask[0]) if h else 0
    flat = [bool(mask[y][x]) for x in range(w) for y in range(h)]
    counts = []
    for value, run in itertools.groupby(flat):
        counts.append(sum(1 for _ in run))
    if flat and flat[0]:
        counts = [0] + counts
    return counts


def nearest_scale_rgba(pixels, src_w: int, src_h: int, dst_w: int, dst_h: int):
    """Floor-rounded nearest-neighbor resize, plain loops.

    pixels is indexable as pixels[y][x] -> length-4 sequence.
    """
    out = []
    for y in range(dst_h):
        sy = (y * src_h) // dst_h
        row = []
        for x in range(dst_w):
            sx = (x * src_w) // dst_w
            row.append(tuple(int(v) for v in pixels[sy][sx]))
        out.append(row)
    return out


def crowd_index_bruteforce(record) -> float:
    """Direct transliteration of the CrowdIndex formula, scalar arithmetic."""
    persons = record.persons
    n = len(persons)
    ratios = []
    for i, person in enumerate(persons):
        bx, by = person.bbox.x, person.bbox.y
        bx1, by1 = bx + person.bbox.w, by + person.bbox.h

        def inside(kp):
            return bx <= kp.x <= bx1 and by <= kp.y <= by1

        n_b = sum(1 for kp in person.pose.keypoints
                  if kp.vis is not Visibility.UNLABELED and inside(kp))
        if n_b == 0:
            continue
        n_a = 0
        for j, other in enumerate(persons):
            if j == i:
                continue
            n_a += sum(1 for kp in other.pose.keypoints
                       if kp.vis is not Visibility.UNLABELED and inside(kp))
        ratios.append(n_a / n_b)
    return min(math.fsum(ratios) / n, 1.0)


def oks_scalar(pred, gt, gt_scale: float, sigmas) -> float:
    values = []
    for i, g in enumerate(gt.keypoints):
        if g.vis is Visibility.UNLABELED:
            continue
        p = pred.keypoints[i]
        d2 = (p.x - g.x) ** 2 + (p.y - g.y) ** 2
        k = 2.0 * sigmas[i]
        values.append(math.exp(-d2 / (2.0 * gt_scale * k * k)))
    return math.fsum(values) / len(values)


def match_greedy_reference(preds, gts, threshold: float, sigmas):
    """Same protocol as the library matcher, written from scratch.

    Returns per-prediction (input order) the matched gt index or None.
    """
    ranked = sorted(range(len(preds)), key=lambda idx: (-preds[idx].score, idx))
    used = set()
    result = [None] * len(preds)
    for pi in ranked:
        candidates = []
        for gi, gt in enumerate(gts):
            if gi in used:
                continue
            if all(k.vis is Visibility.UNLABELED for k in gt.pose.keypoints):
                continue
            scale = gt.bbox.w * gt.bbox.h
            value = oks_scalar(preds[pi].pose, gt.pose, scale, sigmas)
            if value >= threshold:
                candidates.append((value, -gi))
        if candidates:
            candidates.sort()
            best = candidates[-1]
            gi = -best[1]
            used.add(gi)
            result[pi] = gi
    return result


def _seg_cover_sq(px: float, py: float, ax: float, ay: float,
                  bx: float, by: float) -> float:
    """Squared distance from a point to a segment, branchy scalar form."""
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom <= 0.0:
        ex, ey = px - ax, py - ay
        return ex * ex + ey * ey
    t = ((px - ax) * abx + (py - ay) * aby) / denom
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    ex = px - (ax + t * abx)
    ey = py - (ay + t * aby)
    return ex * ex + ey * ey


def scene_flags_reference(layout, skeleton_edges, edges_of_kp):
    """Re-derive every keypoint visibility flag from the layout geometry.

    Mirrors the documented rule: occluded when any later-drawn person's
    capsule covers the keypoint's pixel center, self-occluded when the
    topmost own limb covering it is not one of the keypoint's own limbs.
    """
    persons = layout.persons
    order = sorted(range(len(persons)), key=lambda i: (persons[i].z, i))
    rank = {idx: r for r, idx in enumerate(order)}
    flags = []
    for i, person in enumerate(persons):
        row = []
        for k in range(14):
            kx, ky = person.keypoints[k]
            px, py = math.floor(kx) + 0.5, math.floor(ky) + 0.5
            occluded = False
            for j, other in enumerate(persons):
                if j == i or rank[j] < rank[i]:
                    continue
                r2 = other.radius * other.radius
                for a, b in skeleton_edges:
                    qa = other.keypoints[a]
                    qb = other.keypoints[b]
                    if _seg_cover_sq(px, py, qa[0], qa[1], qb[0], qb[1]) <= r2:
                        occluded = True
                        break
                if occluded:
                    break
            if occluded:
                row.append(Visibility.OCCLUDED)
                continue
            r2 = person.radius * person.radius
            top = -1
            for e, (a, b) in enumerate(skeleton_edges):
                qa = person.keypoints[a]
                qb = person.keypoints[b]
                if _seg_cover_sq(px, py, qa[0], qa[1], qb[0], qb[1]) <= r2:
                    top = e
            if top >= 0 and top not in edges_of_kp[k]:
                row.append(Visibility.SELF_OCCLUDED)
            else:
                row.append(Visibility.VISIBLE)
        flags.append(row)
    return flags
