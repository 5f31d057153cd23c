"""Self-verification property suites behind ``hflow verify``.

Each suite checks one mathematical contract at a pinned tolerance and
reports the worst value observed. The reflection-based suites rebuild the
matrix under test by applying the reflection to basis vectors, so a bug in
the rank-1 application path is caught even when the dense constructor is
correct; the callables are injectable for exactly that kind of mutation
testing. Observed maxima are returned, never hidden behind a boolean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import linalg
from .errors import HflowError
from .flow import FlowStack, flow_forward, init_flow
from .losses import adapter_loss, softmax
from .model import (TrainConfig, adapter_backward, adapter_forward, adapter_parameters,
                    init_adapter)
from .posterior import GaussianPosterior, kl_analytic_diag, kl_flow_term, reparameterize

SUITE_NAMES = ("involution", "determinant", "isometry", "theorem1", "theorem2",
               "gradcheck", "kl")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    observed: float
    tolerance: float
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name:<11} observed={self.observed:.3e} "
                f"tol={self.tolerance:.1e}  {self.detail}")


def _apply_matrix(apply_fn: Callable, v: np.ndarray) -> np.ndarray:
    """Materialize the reflection by applying it to the identity columns."""
    dim = v.size
    return np.column_stack([apply_fn(v, e) for e in np.eye(dim)])


def _random_orthogonal(dim, rng, det_sign=None):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if det_sign is not None and np.sign(np.linalg.det(q)) != det_sign:
        q[:, 0] = -q[:, 0]
    return q


def suite_involution(apply_fn=linalg.householder_apply,
                     matrix_fn=linalg.householder_matrix,
                     cases: int = 1000, seed: int = 0) -> SuiteResult:
    """H H' == I and H H == I for reflections built from random reflectors."""
    tol = 1e-10
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        dim = int(rng.integers(2, 65))
        v = rng.standard_normal(dim)
        h = _apply_matrix(apply_fn, v)
        eye = np.eye(dim)
        worst = max(worst,
                    float(np.max(np.abs(h @ h.T - eye))),
                    float(np.max(np.abs(h @ h - eye))),
                    float(np.max(np.abs(h - matrix_fn(v)))))
    return SuiteResult("involution", worst <= tol, worst, tol,
                       f"{cases} reflectors, dims 2-64")


def suite_determinant(apply_fn=linalg.householder_apply,
                      cases: int = 200, seed: int = 1) -> SuiteResult:
    """det(H) == -1 (LU oracle) and the composed flow reports log-det 0 exactly."""
    tol = 1e-8
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        dim = int(rng.integers(2, 17))
        h = _apply_matrix(apply_fn, rng.standard_normal(dim))
        worst = max(worst, abs(float(np.linalg.det(h)) + 1.0))
    for t_len in (0, 1, 3, 10):
        stack = init_flow(6, 4, t_len, rng)
        for _ in range(10):
            _, _, ldj = flow_forward(stack, rng.standard_normal(6), rng.standard_normal(4))
            if ldj != 0.0:
                return SuiteResult("determinant", False, abs(ldj), 0.0,
                                   f"nonzero log-det at T={t_len}")
    return SuiteResult("determinant", worst <= tol, worst, tol,
                       f"{cases} LU determinants + flow log-det grid")


def suite_isometry(apply_fn=linalg.householder_apply,
                   cases: int = 500, seed: int = 2) -> SuiteResult:
    """Single reflections and whole flows preserve the Euclidean norm."""
    tol = 1e-10
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        dim = int(rng.integers(2, 33))
        v = rng.standard_normal(dim)
        z = rng.standard_normal(dim)
        out = apply_fn(v, z)
        worst = max(worst, abs(np.linalg.norm(out) - np.linalg.norm(z))
                    / np.linalg.norm(z))
    for t_len in (1, 2, 5):
        stack = init_flow(8, 4, t_len, rng)
        for _ in range(20):
            z0 = rng.standard_normal(8)
            zT, _, _ = flow_forward(stack, z0, rng.standard_normal(4))
            worst = max(worst, abs(np.linalg.norm(zT) - np.linalg.norm(z0))
                        / np.linalg.norm(z0))
    return SuiteResult("isometry", worst <= tol, worst, tol,
                       f"{cases} reflections + composed flows")


def suite_theorem1(decompose_fn=linalg.decompose_orthogonal,
                   cases: int = 50, seed: int = 3) -> SuiteResult:
    """Orthogonal matrices admit the basis-kernel form I - Y S Y'.

    The factors are accumulated from the reflector product (sign flips
    become reflections about basis vectors), S must be triangular and
    nonsingular, and the form must reproduce the input.
    """
    tol = 1e-8
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        dim = int(rng.integers(2, 17))
        u = _random_orthogonal(dim, rng, det_sign=1.0 if i % 2 == 0 else -1.0)
        dec = decompose_fn(u)
        vs = list(dec.reflectors)
        for j, s in enumerate(dec.sign_diag):
            if s < 0:
                vs.append(np.eye(dim)[j])
        y, s_kernel = linalg.basis_kernel_factors(vs, dim)
        if vs:
            if np.max(np.abs(np.tril(s_kernel, -1))) != 0.0:
                return SuiteResult("theorem1", False, np.inf, tol, "kernel not triangular")
            if np.min(np.abs(np.diag(s_kernel))) == 0.0:
                return SuiteResult("theorem1", False, np.inf, tol, "kernel singular")
        recon = np.eye(dim) - y @ s_kernel @ y.T
        worst = max(worst, float(np.max(np.abs(recon - u))))
    return SuiteResult("theorem1", worst <= tol, worst, tol,
                       f"{cases} orthogonal matrices, basis-kernel form")


def suite_theorem2(decompose_fn=linalg.decompose_orthogonal,
                   cases: int = 100, seed: int = 4) -> SuiteResult:
    """<= dim reflectors whose product (with the sign diagonal) reconstructs U."""
    tol = 1e-8
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        dim = int(rng.integers(2, 17))
        u = _random_orthogonal(dim, rng, det_sign=1.0 if i % 2 == 0 else -1.0)
        dec = decompose_fn(u)
        if len(dec.reflectors) > dim:
            return SuiteResult("theorem2", False, float(len(dec.reflectors)), float(dim),
                               "too many reflectors")
        recon = np.diag(dec.sign_diag.astype(np.float64))
        for v in reversed(dec.reflectors):
            recon = (np.eye(dim) - 2.0 * np.outer(v, v) / (v @ v)) @ recon
        worst = max(worst, float(np.max(np.abs(recon - u))))
    return SuiteResult("theorem2", worst <= tol, worst, tol,
                       f"{cases} orthogonal matrices, both determinant signs")


def suite_gradcheck(seeds: int = 20, t_values=(0, 1, 3, 5), seed: int = 5,
                    forward_fn=adapter_forward,
                    backward_fn=adapter_backward) -> SuiteResult:
    """Full adapter gradients vs central finite differences.

    Relative tolerance 1e-4 with a 1e-6 absolute floor, over random small
    models (latent dim <= 8, <= 5 classes) for every flow length in
    ``t_values``.
    """
    rtol, floor, step = 1e-4, 1e-6, 1e-5
    worst = 0.0
    runs = 0
    for s in range(seeds):
        for t_len in t_values:
            rng = np.random.default_rng(10_000 + 97 * s + t_len + seed)
            latent = int(rng.integers(2, 9))
            classes = int(rng.integers(2, 6))
            cfg = TrainConfig(flow_length_T=t_len, latent_dim=latent,
                              hidden_dim=int(rng.integers(3, 7)))
            m = init_adapter(int(rng.integers(3, 7)), classes, cfg, rng)
            x = rng.standard_normal(m.embedding_dim)
            eps = rng.standard_normal(latent)
            y = int(rng.integers(0, classes))
            beta = float(rng.uniform(0.2, 1.0))

            logits, kl, trace = forward_fn(m, x, eps)
            g_logits = softmax(logits)
            g_logits[y] -= 1.0
            grads = backward_fn(m, trace, g_logits, beta)
            params = adapter_parameters(m)
            for name, arr in params.items():
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    ix = it.multi_index
                    keep = arr[ix]
                    arr[ix] = keep + step
                    lo, kl_u, _ = forward_fn(m, x, eps)
                    up = adapter_loss(lo, y, kl_u, beta).total
                    arr[ix] = keep - step
                    lo, kl_d, _ = forward_fn(m, x, eps)
                    dn = adapter_loss(lo, y, kl_d, beta).total
                    arr[ix] = keep
                    fd = (up - dn) / (2 * step)
                    err = abs(fd - grads[name][ix]) / max(abs(fd), floor / rtol)
                    worst = max(worst, err)
            runs += 1
    return SuiteResult("gradcheck", worst <= rtol, worst, rtol,
                       f"{runs} models, T in {tuple(t_values)}")


def suite_kl(posteriors: int = 20, samples: int = 100_000, seed: int = 6,
             kl_fn=kl_flow_term) -> SuiteResult:
    """MC mean of the flow KL matches the closed form; isotropic null is exact.

    With the identity flow the single-sample estimator must average to the
    analytic diagonal KL within 3 standard errors; with a standard-normal
    posterior the estimate must vanish to 1e-10 for every flow length.
    """
    rng = np.random.default_rng(seed)
    worst_sigmas = 0.0
    for _ in range(posteriors):
        dim = int(rng.integers(2, 9))
        post = GaussianPosterior(rng.uniform(-1.5, 1.5, dim), rng.uniform(-1.5, 1.0, dim))
        s = reparameterize(post, rng.standard_normal((samples, dim)))
        estimates = kl_fn(post, s, s.z0)
        se = float(np.std(estimates, ddof=1) / np.sqrt(samples))
        gap = abs(float(np.mean(estimates)) - kl_analytic_diag(post))
        worst_sigmas = max(worst_sigmas, gap / se)
    null_tol = 1e-10
    worst_null = 0.0
    for t_len in (0, 1, 3, 10):
        stack = (FlowStack(dim=6) if t_len == 0 else init_flow(6, 4, t_len, rng))
        post = GaussianPosterior(np.zeros(6), np.zeros(6))
        for _ in range(25):
            s = reparameterize(post, rng.standard_normal(6))
            zT, _, _ = flow_forward(stack, s.z0, rng.standard_normal(4))
            worst_null = max(worst_null, abs(float(kl_fn(post, s, zT))))
    passed = worst_sigmas <= 3.0 and worst_null <= null_tol
    return SuiteResult("kl", passed, worst_sigmas, 3.0,
                       f"{posteriors} posteriors x {samples} draws; "
                       f"isotropic null max {worst_null:.2e} (tol {null_tol:.0e})")


_SUITES = {
    "involution": suite_involution,
    "determinant": suite_determinant,
    "isometry": suite_isometry,
    "theorem1": suite_theorem1,
    "theorem2": suite_theorem2,
    "gradcheck": suite_gradcheck,
    "kl": suite_kl,
}


def run_suites(names=None) -> list[SuiteResult]:
    """Run the requested suites (all by default) and collect their results."""
    chosen = SUITE_NAMES if not names else tuple(names)
    results = []
    for name in chosen:
        if name not in _SUITES:
            raise HflowError(f"unknown suite {name!r}; valid: {', '.join(SUITE_NAMES)}")
        results.append(_SUITES[name]())
    return results
