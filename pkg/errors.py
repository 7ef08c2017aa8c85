"""
Exception types raised across infilmap
"""


class InfilmapError(Exception):
    """Base class for every error raised on purpose by infilmap"""


class FormatError(InfilmapError):
    """A volume or manifest file has a malformed header"""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class SizeError(InfilmapError):
    """Dimensions disagree with each other or with a payload"""


class VocabularyError(InfilmapError):
    """A label grid holds values outside its vocabulary"""

    def __init__(self, offending):
        # offending: {value: voxel count}
        listing = ', '.join(f'{value} ({count} voxels)' for value, count in sorted(offending.items()))
        super().__init__(f'unknown label values: {listing}')
        self.offending = dict(offending)


class NoTumorError(InfilmapError):
    """The distance transform was asked for an empty reference set"""


class ContractError(InfilmapError):
    """A tensor does not have the shape a layer or stage requires"""


class PyramidError(ContractError):
    """A plugged-in encoder produced a pyramid that breaks its contract"""


class BoundsError(InfilmapError):
    """A window request falls outside the volume it refers to"""


class SpecError(InfilmapError):
    """A phantom specification violates its geometric invariants"""


class ConfigError(InfilmapError):
    """A configuration value is invalid"""

    def __init__(self, key, value, legal):
        super().__init__(f'{key}={value!r} is invalid (expected {legal})')
        self.key = key
        self.value = value
        self.legal = legal
