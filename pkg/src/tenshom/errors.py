"""Exception types shared across the pipeline (mapped to CLI exit codes)."""


class ConfigError(Exception):
    """Invalid configuration or problem definition (CLI exit code 2)."""


class TrainingError(Exception):
    """Training failed: non-finite loss/gradient or degenerate state (exit 3)."""


class DegenerateFactorError(TrainingError):
    """A one-dimensional factor collapsed below the norm floor; restart advised."""


class RefSolveError(Exception):
    """Reference finite-element solver failed (exit 4)."""


class RankGuardError(RuntimeError):
    """Separable rank exceeded the configured guard; refuse to continue."""
