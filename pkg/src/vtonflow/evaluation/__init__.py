"""Metric kernels and rubric-based judging."""
from .judge import (
    ASPECTS, DEFAULT_REPEATS, GradeReport, HttpJudgeClient, Rubric, StubJudgeClient, grade_video,
    make_client, parse_grade,
)
from .metrics import (
    MotionErrorResult, featurize, fid, garment_fidelity, motion_error, psnr, ssim,
)

__all__ = [
    "ASPECTS", "DEFAULT_REPEATS", "GradeReport", "HttpJudgeClient", "Rubric", "StubJudgeClient",
    "grade_video", "make_client", "parse_grade", "MotionErrorResult", "featurize", "fid",
    "garment_fidelity", "motion_error", "psnr", "ssim",
]
