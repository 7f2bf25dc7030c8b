"""Independent reference implementations used as test oracles.

Written with plain numpy loops, deliberately sharing no code with the package.
"""

import numpy as np


def random_rotation(rng, scale=1.0):
    w = rng.normal(0, scale, 3)
    theta = np.linalg.norm(w)
    if theta == 0:
        return np.eye(3)
    k = w / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx


def composition_flow(depth, K_t, K_r, T):
    """project(transform(backproject(depth))) - grid, one pixel at a time."""
    H, W = depth.shape
    Kinv = np.linalg.inv(K_t)
    flow = np.zeros((2, H, W))
    for r in range(H):
        for c in range(W):
            X = depth[r, c] * Kinv @ np.array([c, r, 1.0])
            Y = T[:3, :3] @ X + T[:3, 3]
            p = K_r @ (Y / Y[2])
            flow[0, r, c] = p[0] - c
            flow[1, r, c] = p[1] - r
    return flow


def bilinear(img, u, v):
    """Zero-padded bilinear sample of a (C, H, W) array; returns (values, inside)."""
    C, H, W = img.shape
    if not (0 <= u <= W - 1 and 0 <= v <= H - 1):
        return np.zeros(C), False
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    a, b = u - u0, v - v0
    out = np.zeros(C)
    for du, dv, w in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)), (0, 1, (1 - a) * b), (1, 1, a * b)):
        uu, vv = u0 + du, v0 + dv
        if 0 <= uu < W and 0 <= vv < H:
            out += w * img[:, vv, uu]
    return out, True


def cost_volume(F_t, F_refs, bins, K_t, K_r, Ts):
    """Direct per-pixel, per-plane transcription of the plane-sweep cost.

    ``F_t`` and each reference are (C, H, W); returns (M, H, W).
    """
    C, H, W = F_t.shape
    Kinv = np.linalg.inv(K_t)
    M = len(bins)
    vol = np.zeros((M, H, W))
    valid = np.zeros((M, H, W), dtype=bool)
    for k, d in enumerate(bins):
        for r in range(H):
            for c in range(W):
                costs = []
                for F_r, T in zip(F_refs, Ts):
                    X = d * Kinv @ np.array([c, r, 1.0])
                    Y = T[:3, :3] @ X + T[:3, 3]
                    if Y[2] <= 0:
                        continue
                    p = K_r @ (Y / Y[2])
                    sample, inside = bilinear(F_r, p[0], p[1])
                    if inside:
                        costs.append(np.mean(np.abs(sample - F_t[:, r, c])))
                if costs:
                    vol[k, r, c] = sum(costs) / len(costs)
                    valid[k, r, c] = True
    for r in range(H):
        for c in range(W):
            fill = vol[valid[:, r, c], r, c].max() if valid[:, r, c].any() else 0.0
            vol[~valid[:, r, c], r, c] = fill
    return vol


def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def ssim_map(x, y, c1=0.01**2, c2=0.03**2):
    """Pixel-by-pixel SSIM of two (C, H, W) arrays over reflected 3x3 windows."""
    C, H, W = x.shape
    out = np.zeros((C, H, W))
    for ch in range(C):
        for r in range(H):
            for c in range(W):
                xs, ys = [], []
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = _reflect(r + dr, H), _reflect(c + dc, W)
                        xs.append(x[ch, rr, cc])
                        ys.append(y[ch, rr, cc])
                xs, ys = np.array(xs), np.array(ys)
                mx, my = xs.mean(), ys.mean()
                vx = (xs**2).mean() - mx**2
                vy = (ys**2).mean() - my**2
                cov = (xs * ys).mean() - mx * my
                s = (2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
                out[ch, r, c] = min(max(s, 0.0), 1.0)
    return out


def photometric(I_t, I_p, mask, a=0.15, b=0.85):
    """Masked mean over pixels of a*L1 + b*(1-SSIM)/2, channel-averaged."""
    s = ssim_map(I_t, I_p)
    C, H, W = I_t.shape
    total, n = 0.0, 0
    for r in range(H):
        for c in range(W):
            if not mask[r, c]:
                continue
            l1 = np.mean([abs(I_t[ch, r, c] - I_p[ch, r, c]) for ch in range(C)])
            ds = np.mean([(1 - s[ch, r, c]) / 2 for ch in range(C)])
            total += a * l1 + b * ds
            n += 1
    return total / n if n else 0.0


def smoothness(depth, img):
    """Edge-aware smoothness of mean-normalized disparity, (H, W) depth, (C, H, W) image."""
    disp = 1.0 / depth
    d = disp / disp.mean()
    H, W = d.shape
    sx = [abs(d[r, c + 1] - d[r, c]) * np.exp(-np.mean(np.abs(img[:, r, c + 1] - img[:, r, c])))
          for r in range(H) for c in range(W - 1)]
    sy = [abs(d[r + 1, c] - d[r, c]) * np.exp(-np.mean(np.abs(img[:, r + 1, c] - img[:, r, c])))
          for r in range(H - 1) for c in range(W)]
    return np.mean(sx) + np.mean(sy)


def consistency(D_c, D_t, mask):
    vals = [abs(D_c[i] - D_t[i]) for i in zip(*np.nonzero(mask))]
    return float(np.mean(vals)) if vals else 0.0


def fd_relative_error(fn, inputs, eps=1e-6):
    """Relative error between autograd and central finite differences.

    ``fn`` maps a list of float64 tensors to a scalar; returns
    ``||g_auto - g_fd|| / ||g_fd||`` over all inputs jointly.
    """
    import torch

    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(xs), xs)
    auto = np.concatenate([g.detach().numpy().ravel() for g in grads])
    fd = []
    for i, x in enumerate(xs):
        base = x.detach().clone()
        flat = base.view(-1)
        for j in range(flat.numel()):
            old = flat[j].item()
            flat[j] = old + eps
            plus = fn([base if k == i else xs[k].detach() for k in range(len(xs))]).item()
            flat[j] = old - eps
            minus = fn([base if k == i else xs[k].detach() for k in range(len(xs))]).item()
            flat[j] = old
            fd.append((plus - minus) / (2 * eps))
    fd = np.array(fd)
    return np.linalg.norm(auto - fd) / max(np.linalg.norm(fd), 1e-300)


def depth_metrics(pred, gt):
    """Plain-loop transcription of the seven depth metrics over 1-D arrays."""
    n = len(gt)
    abs_rel = sq_rel = sq = sq_log = 0.0
    d = [0, 0, 0]
    for p, g in zip(pred, gt):
        abs_rel += abs(p - g) / g
        sq_rel += (p - g) ** 2 / g
        sq += (p - g) ** 2
        sq_log += (np.log(p) - np.log(g)) ** 2
        ratio = max(p / g, g / p)
        for i in range(3):
            d[i] += ratio < 1.25 ** (i + 1)
    return {
        "abs_rel": abs_rel / n, "sq_rel": sq_rel / n, "rmse": np.sqrt(sq / n), "rmse_log": np.sqrt(sq_log / n),
        "delta1": d[0] / n, "delta2": d[1] / n, "delta3": d[2] / n,
    }


def accumulated_drift(step_translations_pred, step_translations_gt):
    """Translation RMSE of two pure-translation paths built by summing steps, starting at the origin."""
    pos_p, pos_g = np.zeros(3), np.zeros(3)
    errs = [0.0]
    for tp, tg in zip(step_translations_pred, step_translations_gt):
        pos_p = pos_p + np.asarray(tp, float)
        pos_g = pos_g + np.asarray(tg, float)
        errs.append(np.linalg.norm(pos_p - pos_g))
    return np.sqrt(np.mean(np.square(errs)))
