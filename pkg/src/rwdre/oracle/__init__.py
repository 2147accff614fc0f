"""Exact small-instance oracles for torus environments."""
from . import bruteforce, iid
from .chain import (
    JointChain,
    OracleError,
    build_joint_chain,
    chain_period,
    cone_cover_time,
    cone_sites,
    cone_window_law,
    exact_asymptotic_variance,
    exact_covariance,
    exact_phi_hat_torus,
    exact_speed,
    lep_window_law,
    position_law,
    power_stationary,
    stationary_residual,
    tv,
)

__all__ = [
    "JointChain", "OracleError", "bruteforce", "iid", "build_joint_chain", "chain_period",
    "cone_cover_time", "cone_sites", "cone_window_law", "exact_asymptotic_variance",
    "exact_covariance", "exact_phi_hat_torus", "exact_speed", "lep_window_law",
    "position_law", "power_stationary", "stationary_residual", "tv",
]
