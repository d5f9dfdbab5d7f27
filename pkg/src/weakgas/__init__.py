"""Simulation and verification engine for weakly attractive continuum particle systems."""

__version__ = "0.1.0"

from .configuration import (Box, Configuration, QuadratureGrid, abs_pairing, energy, energy_delta, field_at,
                            pairing, simulation_window, stability_bound)
from .lattice import (LatticeConfiguration, LatticeWindow, SiteLaw, discretize, enumerate_lattice,
                      fkg_mixed_partial, lattice_energy, lattice_field, site_law)
from .model import (ChargeLaw, ConfigError, CutoffFunction, EnergyDensity, Kernel, ModelSpec, evaluate_kernel,
                    gauge_transform, load_model, truncate_kernel)
from .observables import (MCEstimate, Observable, SignedFunction, TestFunction, char_functional_estimate,
                          decompose, free_char_oracle, free_laplace_oracle, tilted_bound_oracle)
from .sampler import (ChainState, SamplerParams, interpolated_energy, lattice_chain, mh_step, run_chain,
                      sample_free, sample_tilted_free)
