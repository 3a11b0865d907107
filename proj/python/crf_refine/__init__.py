"""Dense-CRF refinement of segmentation probability maps, with Dice evaluation."""

from ._crf_refine import (
    DEFAULT_FLOOR,
    CrfParams,
    InvalidInput,
    InvalidParameter,
    ParseError,
    SizeError,
    UndefinedTest,
    argmax,
    assign_folds,
    case_dice,
    confusion,
    dice,
    energy,
    gaussian_filter,
    hu_window,
    mean_field,
    paired_t_test,
    read_pgm_mask,
    read_tensor,
    refine,
    softmax,
    synth_fixture,
    unary,
    write_pgm_mask,
    write_tensor,
)

__all__ = [
    "DEFAULT_FLOOR",
    "CrfParams",
    "InvalidInput",
    "InvalidParameter",
    "ParseError",
    "SizeError",
    "UndefinedTest",
    "argmax",
    "assign_folds",
    "case_dice",
    "confusion",
    "dice",
    "energy",
    "gaussian_filter",
    "hu_window",
    "mean_field",
    "paired_t_test",
    "read_pgm_mask",
    "read_tensor",
    "refine",
    "softmax",
    "synth_fixture",
    "unary",
    "write_pgm_mask",
    "write_tensor",
]
