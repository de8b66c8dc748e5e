"""Exception hierarchy shared by all modules.

Three families map onto the CLI exit codes: ConfigError (2), DataError (3)
and NumericError (4). Anything outside these families is a plain bug and
surfaces as a traceback.
"""


class MdprobeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MdprobeError):
    """Invalid configuration, CLI usage, or experiment spec."""


class DataError(MdprobeError):
    """Corrupt, missing, or inconsistent input data."""


class NumericError(MdprobeError):
    """A computation cannot proceed (degenerate inputs, bad ranges)."""


# --- phoneset ---

class UnmappableSymbol(DataError):
    """Annotation token has no image in the requested scheme."""


class DuplicateSymbol(DataError):
    """Inventory or mapping file defines a symbol twice."""


class WrongCount(DataError):
    """Inventory file does not list exactly the canonical symbol count."""


# --- annotate ---

class CoverageMismatch(DataError):
    """Alignment steps do not cover the target instances exactly."""


class SpanOutOfRange(DataError):
    """A phone span does not fit inside the utterance frame range."""


# --- featureio ---

class BadMagic(DataError):
    """Feature file does not start with the expected magic bytes."""


class UnsupportedVersion(DataError):
    """Feature or checkpoint file has an unknown format version."""


class TruncatedFile(DataError):
    """File payload shorter (or longer) than its header declares."""


class NonFiniteValue(DataError):
    """NaN or infinity found where only finite values are allowed."""


class MissingFile(DataError):
    """Manifest references a file that does not exist."""


class DuplicateUttId(DataError):
    """Manifest lists the same utterance id twice."""


class DimensionMismatch(DataError):
    """Array shapes disagree with the model or header."""


# --- downstream ---

class NoSelectedFrames(NumericError):
    """Loss requested over an utterance with no scorable frames."""


class RowNotNormalized(DataError):
    """Posterior matrix rows do not sum to one."""


# --- metrics ---

class DegenerateClass(NumericError):
    """A metric needs both positives and negatives; one class is absent."""


class OutOfRange(NumericError):
    """Rate or probability argument outside [0, 1]."""


class NoIncludedPhones(NumericError):
    """Macro average over an empty set of included phones."""


# --- protocol ---

class TooManyFolds(ConfigError):
    """Requested more folds than there are speaker/L1 groups."""
