"""Exception type shared by every module.

Each error carries a short machine-readable ``code`` (e.g. ``"crop-too-large"``)
so the CLI can emit it as JSON and tests can match on it.
"""


class SitegenError(ValueError):
    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}" if message else code)


class DataError(SitegenError):
    """Bad input data: malformed files, shapes, masks."""


class TrainingError(SitegenError):
    """Training could not run with the given data/config."""
