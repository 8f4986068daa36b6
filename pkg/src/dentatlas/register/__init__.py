"""Pairwise registration: metrics, linear alignment and symmetric diffeomorphic registration."""

from .fields import (
    DiffeoPair,
    DisplacementField,
    compose_fields,
    exp_field,
    invert_field,
    jacobian_determinant,
    min_interior_jacobian,
    roundtrip_residual,
    warp_volume,
)
from .linear import register_linear, resample_channels
from .metrics import global_correlation, local_cc, local_cc_symmetric
from .schedule import ChannelPair, RegistrationSchedule
from .syn import SynResult, register_syn
from .transforms import AffineTransform, RigidTransform, identity_affine, transform_from_dict

__all__ = [
    "AffineTransform",
    "ChannelPair",
    "DiffeoPair",
    "DisplacementField",
    "RegistrationSchedule",
    "RigidTransform",
    "SynResult",
    "compose_fields",
    "exp_field",
    "global_correlation",
    "identity_affine",
    "invert_field",
    "jacobian_determinant",
    "local_cc",
    "local_cc_symmetric",
    "min_interior_jacobian",
    "register_linear",
    "register_syn",
    "resample_channels",
    "roundtrip_residual",
    "transform_from_dict",
    "warp_volume",
]
