import numpy as np


def fd_gradient(loss_fn, tensors, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``tensors`` (mutated in place)."""
    out = {}
    for name, arr in tensors.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn()
            arr[idx] = old - h
            down = loss_fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_rel_error(analytic, numeric):
    worst = 0.0
    for name, g in numeric.items():
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(g), 1e-10)
        worst = max(worst, float(np.linalg.norm(a - g) / denom))
    return worst


def scripted_net(base_values, tuned_values=None, dim=1, hidden=8, seed=0):
    """A network whose output depends only on the condition, with hand-chosen values.

    ``base_values[c]`` is the frozen output for condition c (the last key is the
    null token); ``tuned_values`` the output once the returned adapter (on the
    output matrix only) is applied.  Exact up to float round-off.
    """
    from acerase.denoiser import Architecture, forward, init_adapter, init_denoiser

    conds = sorted(base_values)
    arch = Architecture(num_concepts=len(conds) - 1, data_dim=dim, hidden=hidden, time_dim=2,
                        concept_dim=len(conds), num_steps=10)
    params = init_denoiser(arch, seed)
    params.tensors["W1"][:, : dim + 2] = 0.0  # ignore z and t
    params.tensors["embed"][:] = 3.0 * np.eye(len(conds))
    params.tensors["W4"][:] = 0.0
    params.tensors["b4"][:] = 0.0
    # penultimate features per condition
    feats = []
    for c in conds:
        out, cache = forward(params, None, np.zeros((1, dim)), 1, c, keep_cache=True)
        pre = cache["pre"][-1]
        feats.append(pre * (1.0 / (1.0 + np.exp(-pre))))
    F = np.vstack(feats)  # (C, H)
    target = np.array([np.broadcast_to(base_values[c], (dim,)) for c in conds], dtype=float)
    params.tensors["W4"][:] = np.linalg.lstsq(F, target, rcond=None)[0].T
    adapter = init_adapter(params, rank=1, scale=1.0, targets=("W4",))
    if tuned_values is not None:
        tuned = np.array([np.broadcast_to(tuned_values.get(c, base_values[c]), (dim,)) for c in conds], float)
        delta = np.linalg.lstsq(F, tuned - target, rcond=None)[0].T  # (dim, H)
        if dim == 1:
            adapter.B["W4"] = np.ones((1, 1))
            adapter.A["W4"] = delta.copy()
        else:
            u, s, vt = np.linalg.svd(delta)
            assert s[1:].max() < 1e-12 * max(s[0], 1), "tuned delta must be rank one"
            adapter.B["W4"] = u[:, :1] * s[0]
            adapter.A["W4"] = vt[:1]
    return params, adapter
