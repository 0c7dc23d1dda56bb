"""Executable oracles for the replacement-error theory.

Measures, on concrete evaluation sets, the quantities the error bounds are
made of: the local replacement error at each removed site, the activation
norms there, and the suffix amplification factor. All hats are empirical
maxima over the supplied samples, i.e. lower bounds of the true suprema; the
assembled bound is a consistency check of the telescoping decomposition, not
a claim about unmeasurable constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .builder import Network, hybrid_network
from .tensor import Tensor


def _sample_norms(batch: np.ndarray) -> np.ndarray:
    return np.linalg.norm(batch.reshape(len(batch), -1), axis=1)


def _as_fn(f, mode: str = "eval"):
    if hasattr(f, "forward"):
        return lambda h: f.forward(Tensor(h), mode).data
    return f


@dataclass
class ErrorReport:
    sites: list[dict] = field(default_factory=list)
    per_sample_steps: np.ndarray | None = None  # [n, R]
    measured: np.ndarray | None = None  # [n]
    bound_rhs: float = 0.0

    @property
    def max_measured(self) -> float:
        return float(self.measured.max()) if self.measured is not None and len(self.measured) else 0.0

    def to_record(self) -> dict:
        return {
            "sites": self.sites,
            "max_measured_deviation": self.max_measured,
            "bound_rhs": self.bound_rhs,
        }


@dataclass
class FitResult:
    alpha_star: np.ndarray
    beta_star: np.ndarray
    residual: float
    rank_deficient: bool

    def to_record(self) -> dict:
        return {"alpha": self.alpha_star.tolist(), "beta": self.beta_star.tolist(),
                "residual": self.residual, "rank_deficient": self.rank_deficient}


def local_replacement_error(f_r, g_r, samples: np.ndarray) -> tuple[float, float]:
    """Empirical (eps_hat, H_hat) of a replacement over an activation sample set.

    eps_hat = max over samples of ||g(h) - f(h)|| / max(||h||, 1); H_hat is
    the largest activation norm seen. Both are lower bounds of the true sups.
    """
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("local_replacement_error: empty sample set")
    f = _as_fn(f_r)
    g = _as_fn(g_r)
    diff = _sample_norms(g(samples) - f(samples))
    h_norms = _sample_norms(samples)
    eps_hat = float((diff / np.maximum(h_norms, 1.0)).max())
    return eps_hat, float(h_norms.max())


def suffix_amplification(net: Network, site_index: int, pairs) -> float:
    """Empirical max of ||suffix(a) - suffix(b)|| / ||a - b|| over probe pairs.

    ``site_index`` is the unit position of the replaced site; the suffix is
    everything after it (through the head).
    """
    start = site_index + 1
    worst = 0.0
    for a, b in pairs:
        a, b = np.asarray(a), np.asarray(b)
        dist = _sample_norms(a - b)
        if np.any(dist == 0.0):
            raise ValueError("suffix_amplification: zero-distance probe pair")
        sa = net.run_units(Tensor(a), "eval", start=start).data
        sb = net.run_units(Tensor(b), "eval", start=start).data
        worst = max(worst, float((_sample_norms(sa - sb) / dist).max()))
    return worst


def _block_jacobian(unit, h: np.ndarray) -> np.ndarray:
    """Dense Jacobian of a unit forward at a single sample, by autodiff rows."""
    from .tensor import tsum

    probe = unit.forward(Tensor(h), "eval")
    jac = np.zeros((probe.size, h.size))
    for k in range(probe.size):
        basis = np.zeros(probe.shape)
        basis.reshape(-1)[k] = 1.0
        x = Tensor(h, requires_grad=True)
        tsum(unit.forward(x, "eval") * Tensor(basis)).backward()
        jac[k] = x.grad.reshape(-1)
    return jac


def suffix_jacobian_proxy(net: Network, site_index: int, pairs, n_interp: int = 3,
                          max_entries: int = 4096) -> float:
    """Product of per-block spectral norms along sampled points: an upper proxy.

    Dense Jacobians are only computed when every suffix block satisfies
    numel(out) * numel(in) <= max_entries; larger nets must use probe pairs.
    """
    start = site_index + 1
    suffix_units = [u for _, u in net.units[start:]]
    points: list[np.ndarray] = []
    for a, b in pairs:
        for t in np.linspace(0.0, 1.0, n_interp):
            points.append((1.0 - t) * np.asarray(a) + t * np.asarray(b))
    proxy = 1.0
    for offset, unit in enumerate(suffix_units):
        best = 0.0
        next_points = []
        for p in points:
            out = unit.forward(Tensor(p), "eval").data
            if out.size * p.size > max_entries:
                raise ValueError(
                    f"suffix_jacobian_proxy: block at offset {offset} has "
                    f"{out.size * p.size} Jacobian entries > {max_entries}")
            jac = _block_jacobian(unit, p)
            best = max(best, float(np.linalg.svd(jac, compute_uv=False)[0]))
            next_points.append(out)
        proxy *= best
        points = next_points
    return proxy


def telescoped_deviation(e2e: Network, repl: Network, inputs: np.ndarray) -> ErrorReport:
    """Hybrid-chain decomposition of the output deviation, with empirical hats.

    Replaces the removal sites one at a time, measures each per-step output
    difference, checks the per-sample triangle inequality, and assembles the
    bound sum Pi_hat * eps_hat * max(H_hat, 1) whose hats are maxima over this
    same evaluation set, so domination holds by construction.
    """
    if e2e.spec.depth != repl.spec.depth:
        raise ValueError("telescoped_deviation: networks built from different plans")
    inputs = np.asarray(inputs)
    n = len(inputs)
    sites = repl.sites
    r_count = len(sites)
    hybrids = [hybrid_network(e2e, repl, j) for j in range(r_count + 1)]
    outputs = [h.forward(Tensor(inputs), "eval").data for h in hybrids]

    steps = np.zeros((n, r_count))
    site_rows: list[dict] = []
    bound_rhs = 0.0
    repl_units = dict(repl.units)
    e2e_units = dict(e2e.units)
    for j, site in enumerate(sites, start=1):
        steps[:, j - 1] = _sample_norms(outputs[j] - outputs[j - 1])
        # activations entering the site inside hybrid_{j-1}
        prev_net = hybrids[j - 1]
        idx = prev_net.unit_index(site.block_name)
        h = prev_net.run_units(Tensor(inputs), "eval", stop=idx).data
        f_out = e2e_units[site.block_name].forward(Tensor(h), "eval").data
        g_out = repl_units[site.layer_name].forward(Tensor(h), "eval").data
        h_norms = _sample_norms(h)
        dist = _sample_norms(g_out - f_out)
        eps_hat = float((dist / np.maximum(h_norms, 1.0)).max())
        h_hat = float(h_norms.max())
        nonzero = dist > 0.0
        if nonzero.any():
            pi_hat = float((steps[nonzero, j - 1] / dist[nonzero]).max())
        else:
            pi_hat = 0.0
        term = pi_hat * eps_hat * max(h_hat, 1.0)
        bound_rhs += term
        site_rows.append({"name": site.layer_name, "eps_hat": eps_hat,
                          "h_hat": h_hat, "pi_hat": pi_hat, "term": term})

    measured = _sample_norms(outputs[-1] - outputs[0])
    slack = 1e-9 + 1e-9 * float(measured.max(initial=0.0))
    if not np.all(measured <= steps.sum(axis=1) + slack):
        raise AssertionError("telescoping: triangle inequality violated")
    if measured.size and measured.max() > bound_rhs + slack:
        raise AssertionError("telescoping: assembled bound fails to dominate")
    return ErrorReport(sites=site_rows, per_sample_steps=steps,
                       measured=measured, bound_rhs=bound_rhs)


# ---------------------------------------------------------------------------
# least-squares recoverability
# ---------------------------------------------------------------------------

def _normalize_anchor(w: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if w.ndim == 4:
        norms = np.sqrt((w * w).sum(axis=(1, 2, 3), keepdims=True) + eps)
    else:
        norms = np.sqrt((w * w).sum(axis=-1, keepdims=True) + eps)
    return w / norms


def _fit_one(target: np.ndarray, a: np.ndarray, b: np.ndarray):
    basis = np.stack([a.ravel(), b.ravel()], axis=1)
    sol, _, rank, _ = np.linalg.lstsq(basis, target.ravel(), rcond=None)
    residual = float(np.linalg.norm(target.ravel() - basis @ sol))
    return sol[0], sol[1], residual, rank < 2


def best_fit_coeffs(w_target: np.ndarray, w_prev: np.ndarray, w_next: np.ndarray,
                    normalized: bool = False, groups: str | None = None,
                    heads: int = 1) -> FitResult:
    """Least-squares (alpha, beta) minimizing ||target - a A - b B||_F.

    ``groups`` selects independent small systems: None solves one global
    scalar pair, "channel" one pair per output-channel slice of a conv kernel,
    "head" one pair per column group of a projection matrix. Rank-deficient
    systems return the minimum-norm solution.
    """
    w_target, w_prev, w_next = (np.asarray(w) for w in (w_target, w_prev, w_next))
    if not (w_target.shape == w_prev.shape == w_next.shape):
        raise ValueError("best_fit_coeffs: shapes differ")
    a_basis = _normalize_anchor(w_prev) if normalized else w_prev
    b_basis = _normalize_anchor(w_next) if normalized else w_next

    if groups is None:
        al, be, res, deficient = _fit_one(w_target, a_basis, b_basis)
        return FitResult(np.array([al]), np.array([be]), res, deficient)
    if groups == "channel":
        slices = [(c,) for c in range(w_target.shape[0])]
        pick = lambda w, s: w[s[0]]
    elif groups == "head":
        d = w_target.shape[1]
        if d % heads != 0:
            raise ValueError(f"best_fit_coeffs: dim {d} not divisible by {heads} heads")
        dh = d // heads
        slices = [(slice(None), slice(h * dh, (h + 1) * dh)) for h in range(heads)]
        pick = lambda w, s: w[s]
    else:
        raise ValueError(f"unknown group mode {groups!r}")

    alphas, betas = [], []
    sq_residual = 0.0
    deficient = False
    for s in slices:
        al, be, res, bad = _fit_one(pick(w_target, s), pick(a_basis, s), pick(b_basis, s))
        alphas.append(al)
        betas.append(be)
        sq_residual += res * res
        deficient = deficient or bad
    return FitResult(np.array(alphas), np.array(betas), float(np.sqrt(sq_residual)),
                     deficient)


def projection_output_error(x: np.ndarray, w_target: np.ndarray,
                            w_hat: np.ndarray) -> tuple[float, float]:
    """(token-wise error, its bound ||X||_F * ||W - W_hat||_F)."""
    err = np.linalg.norm((x @ (w_target - w_hat).T).ravel())
    bound = np.linalg.norm(x.ravel()) * np.linalg.norm((w_target - w_hat).ravel())
    return float(err), float(bound)
