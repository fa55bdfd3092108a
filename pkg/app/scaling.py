"""Deterministic scaling functions: L(beta), m(a), a_L, c_beta and the eigenvalue rescalings."""

import logging
import math
from typing import Literal, Union

import numpy as np
from scipy.optimize import brentq

from app.errors import BracketError, QuadratureError, ScalingDomainError
from app.models import BETA_MAX, ALSource, ConventionConversion, ScalingParams

logger = logging.getLogger(__name__)

A_L_BRACKET = (0.5, 10.0)
MAX_BISECTION_ITERATIONS = 200
MIN_QUADRATURE_NODES = 256
MAX_QUADRATURE_NODES = 2**15
QUADRATURE_RTOL = 1e-8
# exp(-60) is below the quadrature tolerance relative to the peak
TAIL_EXPONENT = 60.0


def _check_beta(beta: float) -> None:
    if not 0 < beta <= BETA_MAX:
        raise ScalingDomainError(f"beta={beta} outside (0, {BETA_MAX}]")


def _log_integral(a: float, nodes: int) -> float:
    """log of 2 sqrt(2 pi) int_0^inf exp(2 a r^2 - r^6/6 - K) dr with K = 8/3 a^{3/2}."""
    peak = 8.0 / 3.0 * a**1.5
    upper = (6.0 * (peak + TAIL_EXPONENT)) ** (1.0 / 6.0) + (12.0 * a) ** 0.25 + 1.0
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * upper * (x + 1.0)
    integrand = np.exp(2.0 * a * r**2 - r**6 / 6.0 - peak)
    integral = 0.5 * upper * float(np.dot(w, integrand))
    return math.log(2.0 * math.sqrt(2.0 * math.pi) * integral)


class ScalingService:
    """Service for the deterministic scales of the operator."""

    @staticmethod
    def length_scale(beta: float) -> float:
        """L(beta) = 1 / (beta (3/8 ln 1/beta)^{1/3})."""
        _check_beta(beta)
        return 1.0 / (beta * (0.375 * math.log(1.0 / beta)) ** (1.0 / 3.0))

    @staticmethod
    def log_mean_explosion_time(a: float, nodes: int = MIN_QUADRATURE_NODES) -> float:
        """log m(a), evaluated without overflow.

        The mean first-passage double integral of dX = (a - X^2)dt + dB from +inf
        to -inf has a Gaussian inner integral; what remains is
        m(a) = 2 sqrt(2 pi) int_0^inf exp(2 a r^2 - r^6/6) dr.
        """
        if a <= 0:
            raise ScalingDomainError(f"mean explosion time needs a > 0, got {a}")
        if nodes < MIN_QUADRATURE_NODES:
            raise ScalingDomainError(f"quadrature needs at least {MIN_QUADRATURE_NODES} nodes, got {nodes}")
        peak = 8.0 / 3.0 * a**1.5
        previous = _log_integral(a, nodes)
        while nodes < MAX_QUADRATURE_NODES:
            nodes *= 2
            current = _log_integral(a, nodes)
            if abs(math.expm1(current - previous)) <= QUADRATURE_RTOL:
                return peak + current
            previous = current
        raise QuadratureError(f"m({a}) did not stabilize to {QUADRATURE_RTOL} with {nodes} nodes")

    @staticmethod
    def mean_explosion_time(a: float, nodes: int = MIN_QUADRATURE_NODES) -> float:
        """m(a) = E[gamma_a], the mean first explosion time of X_a."""
        return math.exp(ScalingService.log_mean_explosion_time(a, nodes))

    @staticmethod
    def mckean_asymptotic(a: float) -> float:
        """pi / sqrt(a) exp(8/3 a^{3/2})."""
        if a <= 0:
            raise ScalingDomainError(f"asymptotic needs a > 0, got {a}")
        return math.pi / math.sqrt(a) * math.exp(8.0 / 3.0 * a**1.5)

    @staticmethod
    def a_L_inverse(L: float) -> float:
        """Solve m(a) = L for a on the bracket A_L_BRACKET."""
        lo, hi = A_L_BRACKET
        if L <= 0:
            raise BracketError(f"L must be positive, got {L}")
        log_L = math.log(L)

        def objective(a: float) -> float:
            return ScalingService.log_mean_explosion_time(a) - log_L

        f_lo = objective(lo)
        if f_lo > 0:
            raise BracketError(f"L={L} is below m({lo}) = {math.exp(f_lo + log_L):.6g}")
        if objective(hi) < 0:
            raise BracketError(f"L={L} is above m({hi})")
        if f_lo == 0:
            return lo
        return float(brentq(objective, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=MAX_BISECTION_ITERATIONS))

    @staticmethod
    def a_L_asymptotic(L: float) -> float:
        """(3/8 ln L)^{2/3} (1 + 2/9 lnln L/ln L + (-2/3 ln pi + 2/9 ln 3/8)/ln L)."""
        if L < math.e:
            raise ScalingDomainError(f"asymptotic a_L needs L >= e, got {L}")
        log_L = math.log(L)
        correction = (
            1.0
            + (2.0 / 9.0) * math.log(log_L) / log_L
            + (-(2.0 / 3.0) * math.log(math.pi) + (2.0 / 9.0) * math.log(0.375)) / log_L
        )
        return (0.375 * log_L) ** (2.0 / 3.0) * correction

    @staticmethod
    def airy_scale(beta: float) -> float:
        """c_beta = (3/(2 beta) ln(1/(pi beta)))^{2/3}."""
        if not 0 < math.pi * beta < 1:
            raise ScalingDomainError(f"c_beta needs 0 < pi beta < 1, got beta={beta}")
        return (1.5 / beta * math.log(1.0 / (math.pi * beta))) ** (2.0 / 3.0)

    @staticmethod
    def scaling_params(beta: float, a_L_method: Literal["auto", "inverse", "asymptotic"] = "auto") -> ScalingParams:
        """Build beta, L, a_L and c_beta for one inverse temperature."""
        L = ScalingService.length_scale(beta)
        c_beta = ScalingService.airy_scale(beta)
        lower = ScalingService.mean_explosion_time(A_L_BRACKET[0])
        match a_L_method:
            case "inverse":
                return ScalingParams(beta, L, ScalingService.a_L_inverse(L), c_beta, ALSource.INVERSE)
            case "asymptotic":
                return ScalingParams(beta, L, ScalingService.a_L_asymptotic(L), c_beta, ALSource.ASYMPTOTIC)
            case "auto" if L >= lower:
                return ScalingParams(beta, L, ScalingService.a_L_inverse(L), c_beta, ALSource.INVERSE)
            case "auto":
                logger.info(f"L={L:.6g} below m({A_L_BRACKET[0]})={lower:.6g}; using asymptotic a_L at beta={beta}")
                return ScalingParams(beta, L, ScalingService.a_L_asymptotic(L), c_beta, ALSource.ASYMPTOTIC)
            case _:
                raise ScalingDomainError(f"unknown a_L method {a_L_method!r}")

    @staticmethod
    def rescale_eigenvalue(lam: float, params: ScalingParams) -> float:
        """4 sqrt(a_L) (lambda + a_L)."""
        return 4.0 * math.sqrt(params.a_L) * (lam + params.a_L)

    @staticmethod
    def rescale_eigenvalue_airy(mu: float, params: ScalingParams) -> float:
        """beta sqrt(c_beta) (mu + c_beta), for eigenvalues in the A-convention."""
        return params.beta * math.sqrt(params.c_beta) * (mu + params.c_beta)

    @staticmethod
    def rescale_center_airy(center: float, params: ScalingParams) -> float:
        """beta sqrt(c_beta) t for a center t in the A-convention."""
        return center * params.beta * math.sqrt(params.c_beta)

    @staticmethod
    def convert_conventions(mu: float, psi_time: float, params: Union[ScalingParams, float]) -> ConventionConversion:
        """Map an A-convention eigenvalue and time coordinate to the L-convention.

        ``params`` may be a bare beta: the conversion is defined for every beta > 0,
        while ScalingParams only exists in the small-beta range.
        """
        beta = params.beta if isinstance(params, ScalingParams) else float(params)
        if beta <= 0:
            raise ScalingDomainError(f"beta must be positive, got {beta}")
        quarter = beta / 4.0
        energy = quarter ** (2.0 / 3.0)
        time = quarter ** (-1.0 / 3.0)
        return ConventionConversion(
            lam=energy * mu,
            phi_time=psi_time * time,
            energy_factor=energy,
            time_factor=time,
            amplitude_factor=quarter ** (1.0 / 6.0),
        )

    @staticmethod
    def invert_conventions(lam: float, phi_time: float, params: Union[ScalingParams, float]) -> tuple[float, float]:
        """Inverse of convert_conventions: (lambda, phi_time) -> (mu, psi_time)."""
        factors = ScalingService.convert_conventions(0.0, 0.0, params)
        return lam / factors.energy_factor, phi_time / factors.time_factor
