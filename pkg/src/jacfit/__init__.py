"""jacfit: can a prescribed density be the Jacobian of a low-distortion map?

The package samples positive densities on pixel grids, fits piecewise-affine
homeomorphism candidates whose Jacobian should track a density while all
singular values stay inside [1/L, L], and quantifies failure through
mismatch areas and segment stretch certificates.  Perturbation constructors
(sup-norm gluing and floor-truncation patching) embed hard checkerboard
patches into arbitrary fields, and a raster verifier checks two-sided
eps-neighborhood inclusions along map sequences.
"""

from .geometry import (
    Rect,
    Segment,
    SegmentSet,
    RasterMask,
    UNIT_SQUARE,
    neighborhoods,
    connected_component,
    inscribed_square,
    square_at,
)
from .density import (
    DensityField,
    CheckerboardSpec,
    PartitionWeights,
    make_checkerboard,
    make_checkerboard_on_unit_square,
    integrate,
    truncate_floor,
    extend_patch,
    partition_weights,
    perturb_glue,
    find_density_square,
    patch_linf,
    striped_field,
    crop,
)
from .plmap import (
    PiecewiseAffineMap,
    StretchReport,
    identity_map,
    jacobian_field,
    bilipschitz_constant,
    stretch_pairs,
    certified_injective,
    rasterize_image,
)
from .solver import SolverConfig, SolveReport, realize_jacobian, mismatch_area
from .certify import (
    Verdict,
    CertificateResult,
    StretchCertificate,
    RefinementStep,
    RefinementState,
    RefinementError,
    evaluate_certificate,
    bk_refine,
    Lemma2Report,
    verify_lemma2,
)

__version__ = "0.1.0"
