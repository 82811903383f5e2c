"""Bayesian inference of RNA-velocity kinetics from raw count matrices."""

__version__ = "0.1.0"

from . import evaluate, geometry, io, kinetics, model, sampler, simulate
from .kinetics import Position, RateParams, solve, steady_states, switching_point, velocity
from .model import Dataset, ModelState, log_likelihood, log_posterior, log_prior, nb_logpmf
from .sampler import ChainConfig, PosteriorDraws, run_chain
from .simulate import SimulationTruth, gen_counts_nb, gen_parameters, gillespie

__all__ = [
    "__version__",
    "evaluate", "geometry", "io", "kinetics", "model", "sampler", "simulate",
    "Position", "RateParams", "solve", "steady_states", "switching_point", "velocity",
    "Dataset", "ModelState", "log_likelihood", "log_posterior", "log_prior", "nb_logpmf",
    "ChainConfig", "PosteriorDraws", "run_chain",
    "SimulationTruth", "gen_counts_nb", "gen_parameters", "gillespie",
]
