"""Exception hierarchy.

Every error raised on purpose derives from ``PromptforgeError``.  The three
families below carry the process exit code the CLI maps them to, so the
CLI never needs to know about individual error classes.
"""


class PromptforgeError(Exception):
    exit_code = 1
    # Set by run_pipeline when the error aborts a run: the partial records.
    records: list | None = None


# -- configuration and input data (exit 1) --


class ConfigError(PromptforgeError):
    exit_code = 1


class InvalidCorpus(ConfigError):
    pass


class InvalidRequest(ConfigError, ValueError):
    pass


class MissingContextKey(ConfigError, KeyError):
    def __init__(self, key: str) -> None:
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"missing context key: {self.key}"


class ContextBudgetExceeded(ConfigError):
    pass


class BadTemplate(ConfigError):
    pass


class UnbalancedBraces(ConfigError):
    """Raised by the brace scanner; ``methods`` holds what was recovered."""

    def __init__(self, path: str, position: int, methods: list | None = None) -> None:
        super().__init__(f"{path}: unbalanced braces near offset {position}")
        self.path = path
        self.position = position
        self.methods = methods or []


class UnparseableReport(ConfigError):
    pass


class UniverseMismatch(ConfigError):
    pass


class IOFailure(ConfigError, OSError):
    pass


# -- model backend (exit 2) --


class BackendError(PromptforgeError):
    exit_code = 2


class BackendUnavailable(BackendError):
    pass


class MissingApiKey(BackendUnavailable):
    pass


class MalformedResponse(BackendError):
    pass


# -- external adapter commands (exit 3) --


class AdapterError(PromptforgeError):
    exit_code = 3


class AdapterFailure(AdapterError):
    pass
