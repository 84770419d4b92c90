"""Brute-force reference computations used only by the tests.

Everything here is written as straight loops over voxels or cases and does
not call into the code paths it is used to check.
"""
import math

import numpy as np


def unravel(offset, shape):
    nx, ny, _ = shape
    i = offset % nx
    j = (offset // nx) % ny
    k = offset // (nx * ny)
    return i, j, k


def rle_voxels(rle, shape):
    out = []
    for start, length in rle:
        for off in range(start, start + length):
            out.append(unravel(off, shape))
    return out


def window_stats(img, radius):
    """Local mean / population sd with clamped (replicated) edges."""
    nx, ny, nz = img.shape
    mean = np.zeros(img.shape)
    sd = np.zeros(img.shape)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                vals = []
                for di in range(-radius, radius + 1):
                    for dj in range(-radius, radius + 1):
                        for dk in range(-radius, radius + 1):
                            ii = min(max(i + di, 0), nx - 1)
                            jj = min(max(j + dj, 0), ny - 1)
                            kk = min(max(k + dk, 0), nz - 1)
                            vals.append(float(img[ii, jj, kk]))
                m = sum(vals) / len(vals)
                mean[i, j, k] = m
                sd[i, j, k] = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
    return mean, sd


def positive_fraction(prob_map, roi):
    pos_c, neg_c, bg_c = prob_map["prob_pos"], prob_map["prob_neg"], prob_map["prob_bg"]
    voxels = rle_voxels(roi.rle, prob_map.shape)
    hits = 0
    for v in voxels:
        p, n, b = pos_c[v], neg_c[v], bg_c[v]
        # positive wins ties
        if p >= n and p >= b:
            hits += 1
    return hits / len(voxels)


def zone_partition(gland, splits):
    """Zone ids from explicit cutting planes through the gland bounding box."""
    nx, ny, nz = gland.shape
    coords = [(i, j, k) for i in range(nx) for j in range(ny) for k in range(nz) if gland[i, j, k]]
    lo = [min(c[a] for c in coords) for a in range(3)]
    hi = [max(c[a] for c in coords) for a in range(3)]
    planes = []
    for a in range(3):
        extent = hi[a] - lo[a] + 1
        planes.append([lo[a] + m * extent / splits[a] for m in range(splits[a] + 1)])

    def part(a, c):
        for m in range(splits[a]):
            if planes[a][m] <= c < planes[a][m + 1]:
                return m
        raise AssertionError("voxel outside bounding box")

    zones = np.zeros(gland.shape, dtype=int)
    for i, j, k in coords:
        lat, ap, cc = part(0, i), part(1, j), part(2, k)
        zones[i, j, k] = 1 + lat + splits[0] * (ap + splits[1] * cc)
    return zones


def roi_zones(roi, zones, n_zones, overlap_min):
    sizes = {}
    nx, ny, nz = zones.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                z = int(zones[i, j, k])
                sizes[z] = sizes.get(z, 0) + 1
    voxels = rle_voxels(roi.rle, zones.shape)
    hit = {}
    for v in voxels:
        z = int(zones[v])
        hit[z] = hit.get(z, 0) + 1
    return {z for z, h in hit.items()
            if z != 0 and (h / sizes[z] > overlap_min or h / len(voxels) > overlap_min)}


def decision_tree(rad_positive, ml_positive, truth):
    """Which fused cell a single case lands in (radiologist gate, then ML)."""
    if not rad_positive:
        return "fn" if truth else "tn"
    if ml_positive:
        return "tp" if truth else "fp"
    return "fn" if truth else "tn"


def tally(cells):
    out = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for c in cells:
        out[c] += 1
    return (out["tp"], out["fp"], out["tn"], out["fn"])


def brute_force_levels(records, prob_maps, glands, labels, min_grade, cutoff, thresholds, splits=(2, 2, 5),
                       overlap_min=0.05):
    """Radiologist and fused (tp, fp, tn, fn) per threshold and level, one case at a time.

    Returns ``{t: {level: (rad, fused)}}``.  ``glands`` and ``labels`` map
    patient id to the gland mask and the true per-voxel grade; patients
    missing from ``glands`` are left out of the zone level.  Zone truth is
    "any voxel of the zone at or above ``min_grade``".
    """
    n_zones = splits[0] * splits[1] * splits[2]
    cases = {"ROI": [], "Zone": [], "Patient": []}  # (rad call, roi ids driving ML, truth)
    fractions = {}
    for rec in records:
        plus = [r for r in rec.rois if r.score.value >= cutoff]
        for r in plus:
            fractions[(rec.patient_id, r.roi_id)] = positive_fraction(prob_maps[rec.patient_id], r)
            cases["ROI"].append((True, [(rec.patient_id, r.roi_id)], r.pathology >= min_grade))

        if rec.cores:
            truth = any(c.grade >= min_grade for c in rec.cores)
            cases["Patient"].append((len(plus) > 0, [(rec.patient_id, r.roi_id) for r in plus], truth))

        if rec.patient_id in glands:
            zones = zone_partition(glands[rec.patient_id], splits)
            lab = labels[rec.patient_id]
            zone_truth = {z: False for z in range(1, n_zones + 1)}
            nx, ny, nz = zones.shape
            for i in range(nx):
                for j in range(ny):
                    for k in range(nz):
                        if zones[i, j, k] and lab[i, j, k] >= min_grade:
                            zone_truth[int(zones[i, j, k])] = True
            covering = {r.roi_id: roi_zones(r, zones, n_zones, overlap_min) for r in plus}
            for z in range(1, n_zones + 1):
                drivers = [(rec.patient_id, rid) for rid, zs in covering.items() if z in zs]
                cases["Zone"].append((len(drivers) > 0, drivers, zone_truth[z]))

    out = {}
    for t in thresholds:
        out[t] = {}
        for level, items in cases.items():
            rad_cells, fused_cells = [], []
            for rad, drivers, truth in items:
                ml = any(fractions[d] > t for d in drivers)
                rad_cells.append(decision_tree(rad, True, truth))
                fused_cells.append(decision_tree(rad, ml, truth))
            out[t][level] = (tally(rad_cells), tally(fused_cells))
    return out
