"""Stable recurrent models: cells, exact gradients, stability certificates,
projections and the truncation experiments built on them."""
from .cells import (LdsParams, LstmParams, LstmState, ReadoutParams, RnnParams, init_params,
                    rollout, rollout_truncated, step)
from .numerics import Rng, spectral_norm, svd
from .errors import (ConfigError, NotContractiveError, NumericError, StableRNNError,
                     SvdConvergenceError)
from .stability import (AscentConfig, LstmStabilityConfig, StabilityCertificate, certificate,
                        check_lstm_certificate, check_rnn_certificate, estimate_stability,
                        project_lstm_stable, project_rows_l1, project_spectral)

__version__ = "0.1.0"
