"""Exception taxonomy for the extraction bridge."""


class BridgeError(Exception):
    """Base class for everything this package raises on purpose."""


class AudioFormatError(BridgeError):
    """Waveform file violates the 16 kHz mono 16-bit PCM precondition."""


class ModelTagError(BridgeError):
    """Unknown model tag, or a backend that cannot serve it."""


class CorpusLayoutError(BridgeError):
    """Corpus directory is missing a required piece."""


class AlignmentError(BridgeError):
    """A CTM file is malformed or names a phone outside the inventory."""
