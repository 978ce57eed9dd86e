"""Exception hierarchy; every class carries a stable machine-readable ``code``."""


class RadiousError(Exception):
    code = "E_RADIOUS"


class GeometryError(RadiousError, ValueError):
    code = "E_GEOMETRY"


class DimensionError(GeometryError):
    code = "E_DIMENSION"


class PairingError(RadiousError):
    code = "E_PAIRING"


class LabelError(RadiousError, ValueError):
    code = "E_LABEL"


class IngestionError(RadiousError):
    code = "E_INGEST"


class EmptyDatasetError(RadiousError, ValueError):
    code = "E_EMPTY_DATASET"


class ParameterError(RadiousError, ValueError):
    code = "E_PARAMETER"


class CardinalityError(RadiousError, ValueError):
    code = "E_CARDINALITY"


class DegenerateBatchError(RadiousError, ValueError):
    code = "E_DEGENERATE_BATCH"


class CapacityError(RadiousError, ValueError):
    code = "E_CAPACITY"


class DegenerateEvaluationError(RadiousError, ValueError):
    code = "E_DEGENERATE_EVAL"


class NamingError(RadiousError, ValueError):
    code = "E_NAMING"


class ReportInputError(RadiousError):
    code = "E_REPORT_INPUT"


class ConfigError(RadiousError, ValueError):
    code = "E_CONFIG"


class CheckpointError(RadiousError):
    code = "E_CHECKPOINT"
