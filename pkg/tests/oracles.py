"""Independent reference implementations used by the tests."""
import numpy as np


def rot_axis(axis, angle):
    """Rotation matrix from axis-angle via the matrix exponential series."""
    axis = np.asarray(axis, dtype=np.float64)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]) * angle
    out, term = np.eye(3), np.eye(3)
    for i in range(1, 40):
        term = term @ k / i
        out = out + term
    return out


def homogeneous(rot, trans):
    h = np.eye(4)
    h[:3, :3] = rot
    h[:3, 3] = trans
    return h


def frames_homogeneous(model, p):
    """All link frames as 4x4 matrices composed one joint at a time."""
    frames = [np.eye(4)]
    for j, angle in zip(model.joints, p):
        step = homogeneous(rot_axis(j.axis, angle), np.zeros(3)) @ homogeneous(j.origin_rotation, j.origin_translation)
        frames.append(frames[-1] @ step)
    return frames


def points_oracle(model, links, offsets, p, R, T):
    frames = frames_homogeneous(model, p)
    cam = homogeneous(R, T)
    return np.array([(cam @ frames[l] @ np.append(o, 1.0))[:3] for l, o in zip(links, offsets)])


def chamfer_uni_bruteforce(A, B):
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    return float(np.mean([min(float(np.sum((a - b) ** 2)) for b in B) for a in A]))


def auc_threshold_sweep(add, threshold_max, resolution=1e-4):
    """Midpoint sweep of the fraction-below curve (breakpoints on the grid are integrated exactly)."""
    n = int(round(threshold_max / resolution))
    mids = (np.arange(n) + 0.5) * resolution
    add = np.asarray(add)
    frac = np.array([(add <= t).mean() for t in mids])
    return float(frac.sum() * resolution / threshold_max)


def gf2_rank(vectors):
    """Rank over GF(2) of 0/1 row vectors (Python ints as bit sets)."""
    rows = [int(v) for v in vectors if v]
    rank = 0
    while rows:
        pivot = max(rows)
        top = pivot.bit_length() - 1
        rows = [r ^ pivot if (r >> top) & 1 else r for r in rows if r != pivot]
        rows = [r for r in rows if r]
        rank += 1
    return rank


def edge_bits(cycle_edges, index):
    bits = 0
    for e in cycle_edges:
        bits |= 1 << index[e]
    return bits
