"""Independent reference implementations used to check the production paths.

These deliberately avoid the vectorized production code: plain loops, direct
formulas, exhaustive searches.
"""

import numpy as np


def naive_vertex_error(mesh, scale, gt, pred):
    """Deform the whole mesh twice with explicit loops and measure eval vertices."""
    def deform_loop(weights):
        verts = [list(v) for v in mesh.base_vertices]
        for name, delta in mesh.deltas.items():
            w = weights[_name_index(name)]
            for i in range(len(verts)):
                verts[i][0] += w * delta[i][0]
                verts[i][1] += w * delta[i][1]
                verts[i][2] += w * delta[i][2]
        return verts
    a = deform_loop(gt)
    b = deform_loop(pred)
    out = []
    for idx, _region in mesh.eval_vertices:
        dx = a[idx][0] - b[idx][0]
        dy = a[idx][1] - b[idx][1]
        dz = a[idx][2] - b[idx][2]
        out.append((dx * dx + dy * dy + dz * dz) ** 0.5 * scale.millimeters_per_model_unit)
    return np.array(out)


def _name_index(name):
    from blendtrack.blendshapes import ALL_NAMES
    return ALL_NAMES.index(name)


def two_pass_pearson(x, y):
    """Textbook two-pass covariance Pearson R for 1-D sequences."""
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    if vx == 0.0 or vy == 0.0:
        return float("nan")
    return cov / (vx ** 0.5 * vy ** 0.5)


def exhaustive_offset_search(proxy, gt_blink, lag_range):
    """Per-lag Pearson on a shared 1 ms grid, evaluated by direct slicing."""
    t0 = int(min(proxy.timestamps_ms[0], gt_blink.timestamps_ms[0]))
    t1 = int(max(proxy.timestamps_ms[-1], gt_blink.timestamps_ms[-1]))
    grid = np.arange(t0, t1 + 1)
    p = np.interp(grid, proxy.timestamps_ms, proxy.values)
    g = np.interp(grid, gt_blink.timestamps_ms, gt_blink.values)
    n = grid.size
    best_lag, best_val = None, -np.inf
    for k in lag_range:
        if k >= 0:
            a, b = p[: n - k], g[k:]
        else:
            a, b = p[-k:], g[: n + k]
        r = two_pass_pearson(a.tolist(), b.tolist()) if len(a) > 1 else float("nan")
        if np.isnan(r):
            continue
        if r > best_val + 1e-12 or (abs(r - best_val) <= 1e-12 and (abs(k), k) < (abs(best_lag), best_lag)):
            best_lag, best_val = k, r
    return best_lag


def finite_difference_loss_grad(loss_fn, arr, epsilon=1e-4):
    """Central differences of a scalar function w.r.t. one array, element by element."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn()
        flat[i] = orig - epsilon
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * epsilon)
    return grad
