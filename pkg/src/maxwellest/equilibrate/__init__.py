"""Equilibrated local reconstructions and their verification."""

from .kkt import KKTSystem, solve_constrained_ls
from .patchops import PatchLocal, PatchOps, patch_digest
from .reconstruct import (
    EquilibratedFields,
    HatFunction,
    PatchContext,
    PatchField,
    accumulate_global,
    clear_ops_cache,
    current_variation_patch,
    displacement_patch,
    equilibrate_fields,
    hat_function,
    lift_theta_hat,
    magnetic_patch,
    solve_displacement,
    solve_magnetic,
    solve_theta_tilde,
    theta_hat_element,
    theta_tilde_patch,
)
from .verify import field_jumps, verify_equilibration
