"""Central finite differences for float64 torch functions."""

import torch


def finite_difference(fn, tensors, h=1e-4, coords=None):
    """Numerical gradients of scalar ``fn()`` w.r.t. each tensor (modified in place, restored).

    ``coords`` optionally maps tensor index -> list of flat indices to probe; other
    entries are left as NaN.
    """
    out = []
    with torch.no_grad():
        for ti, t in enumerate(tensors):
            g = torch.full_like(t, float("nan"))
            flat_t = t.view(-1)
            flat_g = g.view(-1)
            probe = range(flat_t.numel()) if coords is None else coords.get(ti, [])
            for i in probe:
                orig = flat_t[i].item()
                flat_t[i] = orig + h
                plus = float(fn())
                flat_t[i] = orig - h
                minus = float(fn())
                flat_t[i] = orig
                flat_g[i] = (plus - minus) / (2 * h)
            out.append(g)
    return out


def worst_violation(analytic, numeric, rel=1e-3, abs_tol=1e-6):
    """Largest ratio of |a - n| to the allowed tolerance max(rel*max(|a|,|n|), abs_tol)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~torch.isnan(n)
        if not mask.any():
            continue
        a, n = a[mask], n[mask]
        tol = torch.maximum(rel * torch.maximum(a.abs(), n.abs()), torch.full_like(a, abs_tol))
        worst = max(worst, float(((a - n).abs() / tol).max()))
    return worst
