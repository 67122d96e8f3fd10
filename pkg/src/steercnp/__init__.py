"""Equivariant Gaussian processes and steerable conditional neural processes on the plane."""
from .field import ContextSet, FeatureField, GridGeometry, Transform, transform_context, transform_field
from .gp import GaussianPrediction, GPModel, log_likelihood, posterior, sample_prior
from .groups import FiberGroup, GroupElement, Representation, parse_group
from .kernels import MatrixKernel, curl_free, div_free, rbf_diagonal

__version__ = "0.1.0"
