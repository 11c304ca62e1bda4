"""Exception types shared across the package.

The CLI maps ConfigurationError to exit code 2 (usage/config problems)
and PipelineError to exit code 1 (runtime failures).
"""


class ConfigurationError(ValueError):
    """Invalid configuration: bad dimensions, unknown keys, missing inputs."""


class PipelineError(RuntimeError):
    """Runtime failure inside a pipeline stage."""


class FingerprintMismatch(PipelineError):
    """Artifacts from different pipeline runs were combined."""


class DivergenceError(PipelineError):
    """Training loss blew up past the abort threshold."""
