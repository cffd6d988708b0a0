from dotenv import load_dotenv

from .design import fisher_info_betabin, optimal_N_second_moment, wcrb, wcrb_curve
from .diagnostics import diagnostics, rhat, summarize
from .errors import ConfigError, DomainError, FitError, RBayesError
from .freq import bootstrap, mle_fit, wlsf_fit
from .model import HierarchicalModel, log_likelihood, log_posterior
from .models import AVAILABLE_MODELS, BetaModel, CDPBMModel, build_model
from .protocol import Protocol
from .protocols import AVAILABLE_PROTOCOLS, make_protocol
from .qsim import build_noise, simulate_dataset
from .recorder import Recorder, read_chains, write_chains
from .sampler import PosteriorChains, hmc_nuts, metropolis_hastings
from .structs import DatasetRecord, RunConfig, SamplerConfig
from .swarm import Swarm

load_dotenv()

__all__ = [
    "AVAILABLE_MODELS",
    "AVAILABLE_PROTOCOLS",
    "BetaModel",
    "CDPBMModel",
    "ConfigError",
    "DatasetRecord",
    "DomainError",
    "FitError",
    "HierarchicalModel",
    "PosteriorChains",
    "Protocol",
    "RBayesError",
    "Recorder",
    "RunConfig",
    "SamplerConfig",
    "Swarm",
    "bootstrap",
    "build_model",
    "build_noise",
    "diagnostics",
    "fisher_info_betabin",
    "hmc_nuts",
    "log_likelihood",
    "log_posterior",
    "make_protocol",
    "metropolis_hastings",
    "mle_fit",
    "optimal_N_second_moment",
    "read_chains",
    "rhat",
    "simulate_dataset",
    "summarize",
    "wcrb",
    "wcrb_curve",
    "wlsf_fit",
    "write_chains",
]
