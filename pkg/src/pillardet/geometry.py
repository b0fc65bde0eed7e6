"""Oriented-box geometry in the bird's-eye-view plane.

Boxes follow one convention everywhere: length l runs along the box x axis
at heading 0, width w along y, heading is the right-handed rotation about
+z in radians, normalized to (-pi, pi]. A 7-vector box is
(cx, cy, cz, w, l, h, heading).
"""

from __future__ import annotations

import math

import numpy as np


def normalize_angle(theta):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.remainder(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)


def box_corners_bev(cx: float, cy: float, w: float, l: float, heading: float) -> np.ndarray:
    """Counter-clockwise (4, 2) corners of an oriented rectangle."""
    hx, hy = 0.5 * l, 0.5 * w
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(pts) -> float:
    """Shoelace area of a simple polygon given as an (n, 2) vertex list."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clip) -> list:
    """Sutherland-Hodgman clip of a convex subject polygon by a convex
    counter-clockwise clip polygon. Returns the vertex list (possibly empty)."""
    output = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        current = output
        output = []
        prev = current[-1]
        f_prev = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in current:
            f_cur = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if (f_cur >= 0.0) != (f_prev >= 0.0):
                # signed distance is linear along the segment, zero at t
                t = f_prev / (f_prev - f_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            if f_cur >= 0.0:
                output.append(cur)
            prev, f_prev = cur, f_cur
    return output


def _circumradius(w: float, l: float) -> float:
    return 0.5 * math.hypot(w, l)


def rotated_iou_bev(box_a, box_b) -> float:
    """Exact IoU of two oriented rectangles given as (cx, cy, w, l, heading)."""
    ax, ay, aw, al, ah = (float(v) for v in box_a)
    bx, by, bw, bl, bh = (float(v) for v in box_b)
    area_a = aw * al
    area_b = bw * bl
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    # centers farther apart than the summed circumradii cannot intersect
    if math.hypot(ax - bx, ay - by) > _circumradius(aw, al) + _circumradius(bw, bl):
        return 0.0
    ca = box_corners_bev(ax, ay, aw, al, ah)
    cb = box_corners_bev(bx, by, bw, bl, bh)
    inter = polygon_area(clip_convex(ca, cb))
    union = area_a + area_b - inter
    return inter / union if union > 0.0 else 0.0


def rotated_iou_3d(box_a, box_b) -> float:
    """IoU of two 7-vector boxes: BEV intersection times vertical overlap,
    over the union of the two volumes."""
    ax, ay, az, aw, al, ahh, ath = (float(v) for v in box_a)
    bx, by, bz, bw, bl, bhh, bth = (float(v) for v in box_b)
    vol_a = aw * al * ahh
    vol_b = bw * bl * bhh
    if vol_a <= 0.0 or vol_b <= 0.0:
        return 0.0
    if math.hypot(ax - bx, ay - by) > _circumradius(aw, al) + _circumradius(bw, bl):
        return 0.0
    ca = box_corners_bev(ax, ay, aw, al, ath)
    cb = box_corners_bev(bx, by, bw, bl, bth)
    inter_bev = polygon_area(clip_convex(ca, cb))
    z_lo = max(az - 0.5 * ahh, bz - 0.5 * bhh)
    z_hi = min(az + 0.5 * ahh, bz + 0.5 * bhh)
    inter = inter_bev * max(0.0, z_hi - z_lo)
    union = vol_a + vol_b - inter
    return inter / union if union > 0.0 else 0.0


def iou_bev_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU for (N, 5) x (M, 5) box arrays (cx, cy, w, l, heading).

    The circumradius pre-filter prunes pairs that provably miss, which keeps
    anchor-to-target matching affordable on dense anchor grids.
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    n, m = len(boxes_a), len(boxes_b)
    out = np.zeros((n, m))
    if n == 0 or m == 0:
        return out
    ra = 0.5 * np.hypot(boxes_a[:, 2], boxes_a[:, 3])
    rb = 0.5 * np.hypot(boxes_b[:, 2], boxes_b[:, 3])
    d = np.hypot(boxes_a[:, 0, None] - boxes_b[None, :, 0],
                 boxes_a[:, 1, None] - boxes_b[None, :, 1])
    candidates = d <= ra[:, None] + rb[None, :]
    for i, j in zip(*np.nonzero(candidates)):
        out[i, j] = rotated_iou_bev(boxes_a[i], boxes_b[j])
    return out


def points_in_box_mask(points_xyz: np.ndarray, center, size, heading: float,
                       dilation: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside an oriented box, optionally dilated by a
    margin on every face. size is (w, l, h)."""
    pts = np.asarray(points_xyz, dtype=np.float64)
    cx, cy, cz = (float(v) for v in center)
    w, l, h = (float(v) for v in size)
    c, s = math.cos(heading), math.sin(heading)
    dx = pts[:, 0] - cx
    dy = pts[:, 1] - cy
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    local_z = pts[:, 2] - cz
    return ((np.abs(local_x) <= 0.5 * l + dilation)
            & (np.abs(local_y) <= 0.5 * w + dilation)
            & (np.abs(local_z) <= 0.5 * h + dilation))
