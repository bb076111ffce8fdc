"""First-order mean-field dynamics for one and two arrays.

Pair expectation values are replaced by products of one-atom expectation
values, which closes the motion of (<sigma->, <e>) per array.  The array
couples back through the total field omega_bar = omega - 2i G <sigma->
(plus the inter-array term for two arrays).

Steady states are produced by fixed-step RK4 from the ground state followed
by a Newton polish; time evolution from the ground state selects the
physical branch if the nonlinear equations are multivalued, and Newton
drives the residual to ~1e-13 so flux-conservation checks are not limited
by integrator error.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    GAMMA,
    POSITIVITY_SLACK,
    Drive,
    SingleState,
    TwoArrayState,
)
from .lattice import SumCache


class SteadyMethod(enum.Enum):
    TIME_EVOLUTION = "time_evolution"
    NEWTON = "newton"
    TIME_THEN_NEWTON = "time_then_newton"


class IntegrationError(RuntimeError):
    """A trajectory violated a state invariant (positivity or population bounds)."""


@dataclass
class SteadyReport:
    state: SingleState | TwoArrayState
    residual: float
    elapsed: float
    method: SteadyMethod
    converged: bool
    steps: int = 0
    message: str = ""


# ------------------------------------------------------------------ right-hand sides
#
# Batched kernels work on complex arrays with columns [sigma, e] per array;
# the excited population lives in a complex slot whose imaginary part is
# kept exactly zero by constructing the derivative from real parts.


def _rhs_iso_batch(y, omega, delta):
    sig = y[..., 0]
    e = y[..., 1].real
    dsig = (1j * delta - 0.5 * GAMMA) * sig + 0.5j * omega * (2.0 * e - 1.0)
    de = -GAMMA * e + np.imag(omega * np.conj(sig))
    out = np.empty_like(y)
    out[..., 0] = dsig
    out[..., 1] = de
    return out


def _rhs_one_batch(y, omega, delta, g_big):
    sig = y[..., 0]
    e = y[..., 1].real
    om_bar = omega - 2j * g_big * sig
    dsig = (1j * delta - 0.5 * GAMMA) * sig + 0.5j * om_bar * (2.0 * e - 1.0)
    de = -GAMMA * e + np.imag(om_bar * np.conj(sig))
    out = np.empty_like(y)
    out[..., 0] = dsig
    out[..., 1] = de
    return out


def _rhs_two_batch(y, omega, delta, g_big, g_bar, phase):
    sa, ea = y[..., 0], y[..., 1].real
    sb, eb = y[..., 2], y[..., 3].real
    om_a = omega - 2j * (g_big * sa + g_bar * phase * sb)
    om_b = omega * phase - 2j * (g_big * sb + g_bar * phase * sa)
    out = np.empty_like(y)
    out[..., 0] = (1j * delta - 0.5 * GAMMA) * sa + 0.5j * om_a * (2.0 * ea - 1.0)
    out[..., 1] = -GAMMA * ea + np.imag(om_a * np.conj(sa))
    out[..., 2] = (1j * delta - 0.5 * GAMMA) * sb + 0.5j * om_b * (2.0 * eb - 1.0)
    out[..., 3] = -GAMMA * eb + np.imag(om_b * np.conj(sb))
    return out


def total_field_one(sigma_minus: complex, drive: Drive, cache: SumCache) -> complex:
    """omega_bar = omega - 2i G <sigma->: laser plus the field of all other dipoles."""
    return drive.omega - 2j * cache.g_big * sigma_minus


def total_field_two(state: TwoArrayState, drive: Drive, cache: SumCache):
    phase = cache.config.phase_L
    om_a = drive.omega - 2j * (
        cache.g_big * state.alpha.sigma_minus + cache.g_bar * phase * state.beta.sigma_minus
    )
    om_b = drive.omega * phase - 2j * (
        cache.g_big * state.beta.sigma_minus + cache.g_bar * phase * state.alpha.sigma_minus
    )
    return om_a, om_b


def rhs_isolated(state: SingleState, drive: Drive) -> SingleState:
    """Optical Bloch equations of a driven two-level atom (no dipole coupling)."""
    y = np.array([state.sigma_minus, state.e_pop], dtype=complex)
    d = _rhs_iso_batch(y, drive.omega, drive.delta)
    return SingleState(sigma_minus=complex(d[0]), e_pop=float(d[1].real))


def rhs_one(state: SingleState, drive: Drive, cache: SumCache) -> SingleState:
    """Single-array mean-field equations: Bloch form driven by the total field."""
    y = np.array([state.sigma_minus, state.e_pop], dtype=complex)
    d = _rhs_one_batch(y, drive.omega, drive.delta, cache.g_big)
    return SingleState(sigma_minus=complex(d[0]), e_pop=float(d[1].real))


def rhs_two(state: TwoArrayState, drive: Drive, cache: SumCache) -> TwoArrayState:
    """Two coupled arrays; the inter-array coupling rides on the total fields."""
    if cache.g_bar is None:
        raise ValueError("cache was built for a single array (g_bar missing)")
    y = np.array(
        [state.alpha.sigma_minus, state.alpha.e_pop, state.beta.sigma_minus, state.beta.e_pop],
        dtype=complex,
    )
    d = _rhs_two_batch(y, drive.omega, drive.delta, cache.g_big, cache.g_bar, cache.config.phase_L)
    return TwoArrayState(
        alpha=SingleState(complex(d[0]), float(d[1].real)),
        beta=SingleState(complex(d[2]), float(d[3].real)),
    )


# ------------------------------------------------------------------ integration


def default_step(drive: Drive, cache: SumCache | None = None) -> float:
    g = abs(cache.g_big) if cache is not None else 0.0
    gamma_eff = GAMMA * max(1.0, g / GAMMA, drive.omega / GAMMA)
    return min(0.005, 0.02 / gamma_eff)


def max_step(drive: Drive, cache: SumCache | None = None) -> float:
    g = abs(cache.g_big) if cache is not None else 0.0
    return 0.02 / (GAMMA * max(1.0, g / GAMMA, drive.omega / GAMMA))


def _check_physical(y, arrays, slack=POSITIVITY_SLACK, context=""):
    for k in range(arrays):
        sig = y[..., 2 * k]
        e = y[..., 2 * k + 1]
        if np.any(np.abs(e.imag) > 0):
            raise IntegrationError(f"population picked up an imaginary part {context}")
        er = e.real
        if np.any(er < -slack) or np.any(er > 1.0 + slack):
            raise IntegrationError(f"population left [0, 1] {context}")
        defect = np.abs(sig) ** 2 - er * (1.0 - er)
        if np.any(defect > slack):
            raise IntegrationError(
                f"coherence bound |<sigma->|^2 <= <e>(1-<e>) violated by "
                f"{float(np.max(defect)):.3e} {context}"
            )


def _integrate_batch(
    f,
    y0,
    step,
    tol,
    t_max,
    sustain=1.0,
    check_invariants=True,
    arrays=1,
    invariant_stride=50,
    on_checkpoint=None,
):
    """Fixed-step RK4 until max|f(y)| < tol is sustained over `sustain` time units.

    Returns (y, residual, t, converged, steps).  Never silently truncates:
    hitting t_max with the tolerance unmet reports converged=False.
    """
    y = np.array(y0, dtype=complex)
    t = 0.0
    steps = 0
    t_ok = None
    converged = False
    norm = float(np.max(np.abs(f(y)))) if y.size else 0.0
    h = step
    while True:
        k1 = f(y)
        norm = float(np.max(np.abs(k1)))
        if norm < tol:
            if t_ok is None:
                t_ok = t
            if t - t_ok >= sustain:
                converged = True
                break
        else:
            t_ok = None
        if t >= t_max:
            break
        k2 = f(y + (0.5 * h) * k1)
        k3 = f(y + (0.5 * h) * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
        steps += 1
        if check_invariants and steps % invariant_stride == 0:
            _check_physical(y, arrays, context=f"at t = {t:.2f}")
        if on_checkpoint is not None and steps % invariant_stride == 0:
            on_checkpoint(t, y)
    if check_invariants:
        _check_physical(y, arrays, context="at the final state")
    return y, norm, t, converged, steps


def _kernel_for(rhs, drive: Drive, cache: SumCache | None):
    if rhs is rhs_isolated:
        return lambda y: _rhs_iso_batch(y, drive.omega, drive.delta), 1
    if rhs is rhs_one:
        return lambda y: _rhs_one_batch(y, drive.omega, drive.delta, cache.g_big), 1
    if rhs is rhs_two:
        if cache.g_bar is None:
            raise ValueError("cache was built for a single array (g_bar missing)")
        phase = cache.config.phase_L
        return (
            lambda y: _rhs_two_batch(y, drive.omega, drive.delta, cache.g_big, cache.g_bar, phase),
            2,
        )
    raise ValueError("rhs must be one of rhs_isolated, rhs_one, rhs_two")


def _pack(state) -> np.ndarray:
    if isinstance(state, SingleState):
        return np.array([state.sigma_minus, state.e_pop], dtype=complex)
    if isinstance(state, TwoArrayState):
        return np.array(
            [state.alpha.sigma_minus, state.alpha.e_pop, state.beta.sigma_minus, state.beta.e_pop],
            dtype=complex,
        )
    raise TypeError(f"unsupported state {type(state).__name__}")


def _unpack(y: np.ndarray):
    if y.shape[-1] == 2:
        return SingleState(sigma_minus=complex(y[0]), e_pop=float(y[1].real))
    return TwoArrayState(
        alpha=SingleState(complex(y[0]), float(y[1].real)),
        beta=SingleState(complex(y[2]), float(y[3].real)),
    )


def evolve_to_steady(
    rhs,
    drive: Drive,
    cache: SumCache | None = None,
    initial=None,
    step: float | None = None,
    tol: float = 1e-10,
    t_max: float = 2000.0,
    check_invariants: bool = True,
    on_checkpoint=None,
) -> SteadyReport:
    """Integrate from the ground state (unless overridden) until steady.

    Steady means the max-norm of the right-hand side stays below `tol` over a
    window of one decay time.  The step must satisfy step <= 0.02 / Gamma_eff.
    """
    f, arrays = _kernel_for(rhs, drive, cache)
    if step is None:
        step = default_step(drive, cache)
    elif step > max_step(drive, cache) * (1.0 + 1e-12):
        raise ValueError(
            f"step {step} exceeds 0.02/Gamma_eff = {max_step(drive, cache):.4g}"
        )
    if initial is None:
        y0 = np.zeros(2 * arrays, dtype=complex)
    else:
        y0 = _pack(initial)
        if y0.shape[-1] != 2 * arrays:
            raise ValueError("initial state does not match the requested system")
    y, norm, t, converged, steps = _integrate_batch(
        f,
        y0,
        step,
        tol,
        t_max,
        check_invariants=check_invariants,
        arrays=arrays,
        on_checkpoint=on_checkpoint,
    )
    msg = "" if converged else f"t_max = {t_max} reached with residual {norm:.3e} > tol {tol:.1e}"
    return SteadyReport(
        state=_unpack(y),
        residual=norm,
        elapsed=t,
        method=SteadyMethod.TIME_EVOLUTION,
        converged=converged,
        steps=steps,
        message=msg,
    )


# ------------------------------------------------------------------ Newton refinement


def _newton_one_batch(y, omega, delta, g_big, tol=1e-13, max_iter=60):
    """Newton on the 3 real unknowns (Re sigma, Im sigma, e) with the analytic Jacobian."""
    u = y[..., 0].real.copy()
    v = y[..., 0].imag.copy()
    e = y[..., 1].real.copy()
    gr, gi = g_big.real, g_big.imag
    omega = np.broadcast_to(np.asarray(omega, float), u.shape).copy()
    delta = np.broadcast_to(np.asarray(delta, float), u.shape).copy()

    def residual(u, v, e):
        f1 = -0.5 * u - delta * v + (2 * e - 1) * (gr * u - gi * v)
        f2 = delta * u - 0.5 * v + (2 * e - 1) * (gi * u + gr * v) + 0.5 * omega * (2 * e - 1)
        f3 = -e - omega * v - 2 * gr * (u * u + v * v)
        return f1, f2, f3

    it = 0
    for it in range(max_iter):
        f1, f2, f3 = residual(u, v, e)
        fmax = max(np.max(np.abs(f1)), np.max(np.abs(f2)), np.max(np.abs(f3)))
        if fmax <= tol:
            break
        jac = np.empty(u.shape + (3, 3))
        jac[..., 0, 0] = -0.5 + (2 * e - 1) * gr
        jac[..., 0, 1] = -delta - (2 * e - 1) * gi
        jac[..., 0, 2] = 2 * (gr * u - gi * v)
        jac[..., 1, 0] = delta + (2 * e - 1) * gi
        jac[..., 1, 1] = -0.5 + (2 * e - 1) * gr
        jac[..., 1, 2] = 2 * (gi * u + gr * v) + omega
        jac[..., 2, 0] = -4 * gr * u
        jac[..., 2, 1] = -omega - 4 * gr * v
        jac[..., 2, 2] = -1.0
        rhs = -np.stack([f1, f2, f3], axis=-1)
        try:
            dx = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            return None, math.inf, it
        u = u + dx[..., 0]
        v = v + dx[..., 1]
        e = e + dx[..., 2]
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(e))):
            return None, math.inf, it
    f1, f2, f3 = residual(u, v, e)
    fmax = float(max(np.max(np.abs(f1)), np.max(np.abs(f2)), np.max(np.abs(f3))))
    out = np.empty(u.shape + (2,), dtype=complex)
    out[..., 0] = u + 1j * v
    out[..., 1] = e
    return out, fmax, it + 1


def _newton_two_batch(y, omega, delta, g_big, g_bar, phase, tol=1e-13, max_iter=80):
    """Newton on the 6 real unknowns of the two-array system (forward-difference Jacobian)."""

    def to_real(yc):
        return np.stack(
            [
                yc[..., 0].real,
                yc[..., 0].imag,
                yc[..., 1].real,
                yc[..., 2].real,
                yc[..., 2].imag,
                yc[..., 3].real,
            ],
            axis=-1,
        )

    def to_complex(x):
        yc = np.empty(x.shape[:-1] + (4,), dtype=complex)
        yc[..., 0] = x[..., 0] + 1j * x[..., 1]
        yc[..., 1] = x[..., 2]
        yc[..., 2] = x[..., 3] + 1j * x[..., 4]
        yc[..., 3] = x[..., 5]
        return yc

    def fn(x):
        return to_real(_rhs_two_batch(to_complex(x), omega, delta, g_big, g_bar, phase))

    x = to_real(np.asarray(y, complex))
    it = 0
    for it in range(max_iter):
        f = fn(x)
        fmax = float(np.max(np.abs(f)))
        if fmax <= tol:
            break
        jac = np.empty(x.shape + (6,))
        for j in range(6):
            h = 1e-8 * np.maximum(1.0, np.abs(x[..., j]))
            xp = x.copy()
            xp[..., j] = xp[..., j] + h
            jac[..., j] = (fn(xp) - f) / h[..., None]
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return None, math.inf, it
        x = x + dx
        if not np.all(np.isfinite(x)):
            return None, math.inf, it
    fmax = float(np.max(np.abs(fn(x))))
    return to_complex(x), fmax, it + 1


def newton_steady_one(
    drive: Drive,
    cache: SumCache,
    guess: SingleState | None = None,
    tol: float = 1e-13,
) -> SteadyReport:
    """Newton refinement of the single-array steady state.

    Without a guess, a short time evolution from the ground state provides
    the seed (and selects the physical branch).
    """
    if guess is None:
        seed = evolve_to_steady(rhs_one, drive, cache, tol=1e-8, t_max=400.0)
        y0 = _pack(seed.state)
    else:
        y0 = _pack(guess)
    y, res, iters = _newton_one_batch(y0, drive.omega, drive.delta, cache.g_big, tol=tol)
    if y is None:
        return SteadyReport(
            state=_unpack(y0),
            residual=res,
            elapsed=0.0,
            method=SteadyMethod.NEWTON,
            converged=False,
            steps=iters,
            message="Newton iteration diverged or hit a singular Jacobian",
        )
    return SteadyReport(
        state=_unpack(y),
        residual=res,
        elapsed=0.0,
        method=SteadyMethod.NEWTON,
        converged=res <= tol,
        steps=iters,
    )


def _newton_accepts(y_new, y_old, omega, arrays):
    """Branch guard: the polished state must stay physical and near the seed."""
    if y_new is None:
        return False
    try:
        _check_physical(np.atleast_1d(y_new), arrays, context="after Newton")
    except IntegrationError:
        return False
    scale = float(np.max(np.abs(y_old))) + min(0.5, omega) + 1e-12
    return float(np.max(np.abs(y_new - y_old))) <= 0.35 * scale


def _steady_protocol(kind, drive, cache, step, tol, t_max, newton_tol, stages):
    f, arrays = (
        (lambda y: _rhs_one_batch(y, drive.omega, drive.delta, cache.g_big), 1)
        if kind == "one"
        else _kernel_for(rhs_two, drive, cache)
    )
    if step is None:
        step = default_step(drive, cache)
    y = np.zeros(2 * arrays, dtype=complex)
    t_done = 0.0
    steps_total = 0
    for t_stage in stages:
        y, norm, t, conv, steps = _integrate_batch(
            f, y, step, tol, t_stage - t_done, arrays=arrays
        )
        t_done += t
        steps_total += steps
        if kind == "one":
            y_n, res, _ = _newton_one_batch(y, drive.omega, drive.delta, cache.g_big, tol=newton_tol)
        else:
            y_n, res, _ = _newton_two_batch(
                y, drive.omega, drive.delta, cache.g_big, cache.g_bar,
                cache.config.phase_L, tol=newton_tol,
            )
        if res <= newton_tol and _newton_accepts(y_n, y, drive.omega, arrays):
            return SteadyReport(
                state=_unpack(y_n),
                residual=res,
                elapsed=t_done,
                method=SteadyMethod.TIME_THEN_NEWTON,
                converged=True,
                steps=steps_total,
            )
        if conv and norm < tol:
            # evolution alone satisfied the tolerance; Newton could not improve
            return SteadyReport(
                state=_unpack(y),
                residual=norm,
                elapsed=t_done,
                method=SteadyMethod.TIME_EVOLUTION,
                converged=True,
                steps=steps_total,
            )
        if t_done >= t_max:
            break
    y, norm, t, conv, steps = _integrate_batch(f, y, step, tol, t_max - t_done, arrays=arrays)
    return SteadyReport(
        state=_unpack(y),
        residual=norm,
        elapsed=t_done + t,
        method=SteadyMethod.TIME_EVOLUTION,
        converged=conv,
        steps=steps_total + steps,
        message="" if conv else "Newton polish rejected and t_max reached",
    )


def steady_one(
    drive: Drive,
    cache: SumCache,
    step: float | None = None,
    tol: float = 1e-10,
    t_max: float = 4000.0,
    newton_tol: float = 1e-13,
) -> SteadyReport:
    """Production single-array steady state: evolve from the ground state, Newton-polish."""
    return _steady_protocol("one", drive, cache, step, tol, t_max, newton_tol, stages=(150.0, 600.0, 2400.0))


def steady_two(
    drive: Drive,
    cache: SumCache,
    step: float | None = None,
    tol: float = 1e-10,
    t_max: float = 120_000.0,
    newton_tol: float = 1e-13,
) -> SteadyReport:
    """Two-array steady state.

    Near a cavity resonance the slow mode relaxes at the cavity linewidth,
    orders of magnitude below GAMMA, so the evolve stage is retried with
    geometrically growing horizons and the Newton polish exits early once
    its branch guard is satisfied.
    """
    stages = (300.0, 1200.0, 5000.0, 20_000.0, 60_000.0)
    return _steady_protocol("two", drive, cache, step, tol, t_max, newton_tol, stages=stages)
