"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or direct formulas and shares
no code with the package beyond the data it is handed.
"""

import cmath
import math

import numpy as np


def sum_rate_loops(H, W, sigma2):
    """Sum rate in bits via explicit loops over users and streams."""
    M, K = len(H), len(H[0])
    total = 0.0
    for k in range(K):
        gains = []
        for l in range(K):
            acc = 0j
            for m in range(M):
                acc += complex(H[m][k]) * complex(W[m][l])
            gains.append(abs(acc) ** 2)
        interf = sum(g for l, g in enumerate(gains) if l != k)
        total += math.log2(1.0 + gains[k] / (interf + sigma2))
    return total


def pathloss_direct(d, fc_ghz):
    return 32.4 + 31.9 * math.log10(d) + 20.0 * math.log10(fc_ghz)


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at flat vector ``x``."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def coherent_power_direct(a, phi_tx, phi_rx, phi_cable, phi_ch, phi_ref, phi_ue):
    """Received power after anchored calibration, element by element."""
    total = 0j
    for i in range(len(a)):
        pilot = phi_ue - phi_rx[i] + phi_ch[i]
        ref = phi_ref - phi_rx[i] + phi_cable[i]
        loop = phi_tx[i] - phi_rx[i]
        csi = pilot - ref + phi_cable[i]
        theta_tx = -csi - (loop - ref) - phi_cable[i]
        total += a[i] * cmath.exp(1j * (theta_tx + phi_tx[i] + phi_ch[i]))
    return abs(total) ** 2


def crandn(gen, *shape):
    return gen.standard_normal(shape) + 1j * gen.standard_normal(shape)


def _exclusive(n):
    # averaging matrix over the other n-1 members; zero when alone
    return np.zeros((1, 1)) if n == 1 else (np.ones((n, n)) - np.eye(n)) / (n - 1)


def gnn_forward_ref(model, H, P):
    """Edge-GNN forward pass written with explicit averaging matrices.

    Returns the precoders and the sign pattern of every pre-activation.
    """
    E = model.input_scale * np.stack([H.real, H.imag], axis=-1)
    M, K = H.shape[-2:]
    ap_avg, ue_avg = _exclusive(K), _exclusive(M)
    signs = []
    for layer in model.layers:
        a_ap = np.einsum("kj,bmjd->bmkd", ap_avg, E)
        a_ue = np.einsum("mj,bjkd->bmkd", ue_avg, E)
        Z = E @ layer["W_self"] + a_ap @ layer["W_ap_agg"] + a_ue @ layer["W_ue_agg"] + layer["b"]
        signs.append(Z > 0)
        E = np.maximum(Z, 0) + model.leaky_slope * np.minimum(Z, 0)
    out = E @ model.head["W"] + model.head["b"]
    V = out[..., 0] + 1j * out[..., 1]
    norms = np.sqrt(np.sum(np.abs(V) ** 2, axis=(1, 2)))[:, None, None]
    return V * np.sqrt(P) / norms, np.concatenate([s.ravel() for s in signs])


def _loss_ref(model, H, P, sigma2):
    W, signs = gnn_forward_ref(model, H, P)
    G = np.abs(np.einsum("bmk,bml->bkl", H, W)) ** 2
    sig = np.einsum("bkk->bk", G)
    nats = np.log1p(sig / (G.sum(axis=2) - sig + sigma2)).sum(axis=1)
    return -float(np.mean(nats)), signs


def gnn_gradient_error(model, H, P, sigma2, h=1e-5):
    """Largest per-array relative error of the analytic GNN gradient.

    The reference loss comes from :func:`gnn_forward_ref` and the loop
    sum rate, differentiated by central differences. Each parameter array
    is scored as max|g - g_fd| / max|g_fd|. Entries whose +-h step flips a
    LeakyReLU branch are skipped (the loss has a kink there and the
    difference quotient is meaningless); their count is returned too.
    """
    from dmimo_lab import gnn

    _, base = _loss_ref(model, H, P, sigma2)
    _, grads = gnn.loss_and_grad(model, H, P, sigma2)
    worst, skipped = 0.0, 0
    for blk, g in zip(model.blocks(), grads):
        for key, arr in blk.items():
            flat = arr.reshape(-1)
            fd = np.zeros(flat.size)
            ok = np.ones(flat.size, dtype=bool)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up, s_up = _loss_ref(model, H, P, sigma2)
                flat[i] = orig - h
                down, s_down = _loss_ref(model, H, P, sigma2)
                flat[i] = orig
                fd[i] = (up - down) / (2 * h)
                ok[i] = np.array_equal(s_up, base) and np.array_equal(s_down, base)
            skipped += int(np.sum(~ok))
            scale = max(np.max(np.abs(fd[ok]), initial=0.0), 1e-12)
            diff = np.abs(g[key].reshape(-1) - fd)[ok]
            worst = max(worst, float(np.max(diff, initial=0.0)) / scale)
    return worst, skipped
