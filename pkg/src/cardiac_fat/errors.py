"""Exception types shared by every stage.

Each error carries a short machine-readable ``code`` and the process exit
status the CLI reports for it.
"""


class CardiacFatError(ValueError):
    code = "DATA_ERROR"
    exit_status = 2


class ScanError(CardiacFatError):
    code = "SCAN_ERROR"


class NoConfirmedPlacement(CardiacFatError):
    code = "NO_CONFIRMED_PLACEMENT"
    exit_status = 3


class SchemaMismatch(CardiacFatError):
    code = "SCHEMA_MISMATCH"


class ModelFormatError(CardiacFatError):
    code = "MODEL_FORMAT"


class DatasetFormatError(CardiacFatError):
    code = "DATASET_FORMAT"
