"""Compiled forward/backward passes for the stacked LSTM.

Parameters live in one flat float64 vector. For layer ``l`` with input width
``d`` the block is the transposed weight matrix of shape ``(d + u, 4*u)``
stored row-major (row ``j`` holds the weights of input ``j`` into every gate),
followed by the bias of length ``4*u``. Gate rows are ordered input, forget,
output, candidate. The output head (``u`` weights and one bias) comes last.
"""

import math

import numpy as np
from numba import njit


def param_count(n_layer, n_unit):
    total = 0
    for layer in range(n_layer):
        d = 1 if layer == 0 else n_unit
        total += 4 * n_unit * (d + n_unit) + 4 * n_unit
    return total + n_unit + 1


def layer_offsets(n_layer, n_unit):
    """Start offsets of each layer block plus the head offset at the end."""
    offsets = np.empty(n_layer + 1, dtype=np.int64)
    pos = 0
    for layer in range(n_layer):
        offsets[layer] = pos
        d = 1 if layer == 0 else n_unit
        pos += 4 * n_unit * (d + n_unit) + 4 * n_unit
    offsets[n_layer] = pos
    return offsets


@njit(cache=True, nogil=True, error_model="numpy")
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True, nogil=True, error_model="numpy")
def forward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden, z):
    """Run one window through the network and return the scalar output.

    ``gates`` is (n_layer, L, 4u) post-activation. ``cells`` and ``hidden``
    are (n_layer, L + 1, u) with index 0 holding the zero initial state.
    ``z`` is a scratch vector of length 4u.
    """
    u = n_unit
    seq = x.shape[0]
    for layer in range(n_layer):
        d = 1 if layer == 0 else u
        w0 = offsets[layer]
        b0 = w0 + 4 * u * (d + u)
        for j in range(u):
            cells[layer, 0, j] = 0.0
            hidden[layer, 0, j] = 0.0
        for t in range(seq):
            for k in range(4 * u):
                z[k] = theta[b0 + k]
            if layer == 0:
                xv = x[t]
                for k in range(4 * u):
                    z[k] += theta[w0 + k] * xv
            else:
                for j in range(u):
                    hv = hidden[layer - 1, t + 1, j]
                    base = w0 + j * 4 * u
                    for k in range(4 * u):
                        z[k] += theta[base + k] * hv
            for j in range(u):
                hv = hidden[layer, t, j]
                base = w0 + (d + j) * 4 * u
                for k in range(4 * u):
                    z[k] += theta[base + k] * hv
            for k in range(3 * u):
                gates[layer, t, k] = _sigmoid(z[k])
            for k in range(3 * u, 4 * u):
                gates[layer, t, k] = math.tanh(z[k])
            for j in range(u):
                ig = gates[layer, t, j]
                fg = gates[layer, t, u + j]
                og = gates[layer, t, 2 * u + j]
                cand = gates[layer, t, 3 * u + j]
                c = fg * cells[layer, t, j] + ig * cand
                cells[layer, t + 1, j] = c
                hidden[layer, t + 1, j] = og * math.tanh(c)
    head = offsets[n_layer]
    out = theta[head + u]
    for j in range(u):
        out += theta[head + j] * hidden[n_layer - 1, seq, j]
    return out


@njit(cache=True, nogil=True, error_model="numpy")
def backward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden,
             d_out, grad, dh_in, dz, dh_rec, dc_rec):
    """Backpropagate ``d_out`` (dLoss/dOutput) through time into ``grad``.

    ``grad`` is overwritten. ``dh_in`` (L, u), ``dz`` (4u,), ``dh_rec`` and
    ``dc_rec`` (u,) are scratch.
    """
    u = n_unit
    seq = x.shape[0]
    for i in range(grad.shape[0]):
        grad[i] = 0.0
    head = offsets[n_layer]
    for j in range(u):
        grad[head + j] = d_out * hidden[n_layer - 1, seq, j]
    grad[head + u] = d_out

    for t in range(seq):
        for j in range(u):
            dh_in[t, j] = 0.0
    for j in range(u):
        dh_in[seq - 1, j] = d_out * theta[head + j]

    for layer in range(n_layer - 1, -1, -1):
        d = 1 if layer == 0 else u
        w0 = offsets[layer]
        b0 = w0 + 4 * u * (d + u)
        for j in range(u):
            dh_rec[j] = 0.0
            dc_rec[j] = 0.0
        for t in range(seq - 1, -1, -1):
            for j in range(u):
                dh = dh_in[t, j] + dh_rec[j]
                ig = gates[layer, t, j]
                fg = gates[layer, t, u + j]
                og = gates[layer, t, 2 * u + j]
                cand = gates[layer, t, 3 * u + j]
                tc = math.tanh(cells[layer, t + 1, j])
                dc = dc_rec[j] + dh * og * (1.0 - tc * tc)
                dz[j] = dc * cand * ig * (1.0 - ig)
                dz[u + j] = dc * cells[layer, t, j] * fg * (1.0 - fg)
                dz[2 * u + j] = dh * tc * og * (1.0 - og)
                dz[3 * u + j] = dc * ig * (1.0 - cand * cand)
                dc_rec[j] = dc * fg
            # dh_in[t] is consumed; it is refilled below for the layer beneath
            for k in range(4 * u):
                grad[b0 + k] += dz[k]
            if layer == 0:
                xv = x[t]
                for k in range(4 * u):
                    grad[w0 + k] += dz[k] * xv
            else:
                for j in range(u):
                    hv = hidden[layer - 1, t + 1, j]
                    base = w0 + j * 4 * u
                    acc = 0.0
                    for k in range(4 * u):
                        grad[base + k] += dz[k] * hv
                        acc += theta[base + k] * dz[k]
                    dh_in[t, j] = acc
            for j in range(u):
                hv = hidden[layer, t, j]
                base = w0 + (d + j) * 4 * u
                acc = 0.0
                for k in range(4 * u):
                    grad[base + k] += dz[k] * hv
                    acc += theta[base + k] * dz[k]
                dh_rec[j] = acc


@njit(cache=True, nogil=True, error_model="numpy")
def _scratch(n_layer, n_unit, seq):
    u = n_unit
    return (np.empty((n_layer, seq, 4 * u)),
            np.empty((n_layer, seq + 1, u)),
            np.empty((n_layer, seq + 1, u)),
            np.empty(4 * u))


@njit(cache=True, nogil=True, error_model="numpy")
def window_loss_grad(theta, offsets, n_layer, n_unit, x, y, grad):
    """Half squared error of one window; its gradient is written to ``grad``."""
    seq = x.shape[0]
    u = n_unit
    gates, cells, hidden, z = _scratch(n_layer, n_unit, seq)
    out = forward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden, z)
    err = out - y
    backward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden, err,
             grad, np.empty((seq, u)), z, np.empty(u), np.empty(u))
    return 0.5 * err * err


@njit(cache=True, nogil=True, error_model="numpy")
def window_loss(theta, offsets, n_layer, n_unit, x, y):
    gates, cells, hidden, z = _scratch(n_layer, n_unit, x.shape[0])
    err = forward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden,
                  z) - y
    return 0.5 * err * err


@njit(cache=True, nogil=True, error_model="numpy")
def sgd_train(theta, offsets, n_layer, n_unit, series, lookback, lr,
              epochs, clip_norm, order, epoch_loss):
    """Online SGD, one update per window, ``epochs`` passes.

    Every pass visits the window start indices in ``order``. Updates
    ``theta`` in place and writes the mean window loss of each epoch into
    ``epoch_loss``. Returns the number of completed epochs; fewer than
    ``epochs`` means the loss or gradient stopped being finite.
    """
    u = n_unit
    n_windows = order.shape[0]
    gates, cells, hidden, z = _scratch(n_layer, n_unit, lookback)
    grad = np.empty(theta.shape[0])
    dh_in = np.empty((lookback, u))
    dh_rec = np.empty(u)
    dc_rec = np.empty(u)
    for epoch in range(epochs):
        total = 0.0
        for i in range(n_windows):
            s = order[i]
            x = series[s:s + lookback]
            out = forward(theta, offsets, n_layer, n_unit, x, gates, cells,
                          hidden, z)
            err = out - series[s + lookback]
            total += 0.5 * err * err
            backward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden,
                     err, grad, dh_in, z, dh_rec, dc_rec)
            sq = 0.0
            for k in range(grad.shape[0]):
                sq += grad[k] * grad[k]
            norm = math.sqrt(sq)
            if not math.isfinite(norm):
                epoch_loss[epoch] = math.inf
                return epoch
            scale = lr
            if norm > clip_norm:
                scale = lr * clip_norm / norm
            for k in range(theta.shape[0]):
                theta[k] -= scale * grad[k]
        mean = total / n_windows
        epoch_loss[epoch] = mean
        if not math.isfinite(mean):
            return epoch
    return epochs


@njit(cache=True, nogil=True, error_model="numpy")
def predict_windows(theta, offsets, n_layer, n_unit, series, lookback):
    """One-step forecasts for every position ``t >= lookback`` of ``series``."""
    n = series.shape[0] - lookback
    out = np.empty(n)
    gates, cells, hidden, z = _scratch(n_layer, n_unit, lookback)
    for s in range(n):
        out[s] = forward(theta, offsets, n_layer, n_unit,
                         series[s:s + lookback], gates, cells, hidden, z)
    return out


@njit(cache=True, nogil=True, error_model="numpy")
def trace_gates(theta, offsets, n_layer, n_unit, x):
    """Post-activation gate values of one window, for inspection."""
    gates, cells, hidden, z = _scratch(n_layer, n_unit, x.shape[0])
    forward(theta, offsets, n_layer, n_unit, x, gates, cells, hidden, z)
    return gates
