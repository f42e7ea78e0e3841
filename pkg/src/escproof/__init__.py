"""escproof: privilege-escalation absence proofs for small bitvector-IR kernels.

The pipeline: annotate (generate type annotations from declarations,
merge manual strengthenings), analyze (abstract interpretation of the
kernel runtime under a typed precondition, over numeric-times-shape
storage abstractions), check (concrete boot interpretation of a user
image and membership in the computed invariant), then a verdict.
"""

__version__ = "0.1.0"
