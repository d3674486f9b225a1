"""Two-type hard-sphere/particle mixtures: depletion potential, reflected dynamics,
grand-canonical samplers and bad-path diagnostics."""

from .geometry import Ball, Box, Configuration, Domain, is_admissible
from .depletion import DepletionParams, energy, grad_energy, v_ovlap
from .penalisation import PenalisationField
from .dynamics import IntegratorSettings, LocalTimeLedger, TrajectoryRecord, run
from .gibbs import GibbsModelParams, GibbsSampler, sample

__version__ = "0.1.0"
