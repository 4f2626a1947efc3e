"""Python access to the peftqa C++ library."""

from ._core import (
    ContractError,
    Error,
    UsageError,
    default_articles,
    exact_match,
    fixture_checks,
    format_hms,
    format_lr,
    lora_counts,
    nf4_codebook,
    nf4_roundtrip,
    normalize_answer,
    percent_of_baseline,
    read_grid_csv,
    render_markdown,
    run_cell,
    token_f1,
)

__all__ = [
    "ContractError",
    "Error",
    "UsageError",
    "default_articles",
    "exact_match",
    "fixture_checks",
    "format_hms",
    "format_lr",
    "lora_counts",
    "nf4_codebook",
    "nf4_roundtrip",
    "normalize_answer",
    "percent_of_baseline",
    "read_grid_csv",
    "render_markdown",
    "run_cell",
    "token_f1",
]
