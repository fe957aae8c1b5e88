"""Exception hierarchy. Every domain failure derives from :class:`HDSegError`."""


class HDSegError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class DimensionMismatch(HDSegError, ValueError):
    pass


class PlexusOutsideMuscularis(HDSegError, ValueError):
    pass


class NonPositiveResolution(HDSegError, ValueError):
    pass


class TooFewSlides(HDSegError, ValueError):
    pass


class InvalidConfig(HDSegError, ValueError):
    pass


class NoTissue(HDSegError):
    pass


class DegenerateStains(HDSegError):
    pass


class InvalidStride(HDSegError, ValueError):
    pass


class CountMismatch(HDSegError, ValueError):
    pass


class IndivisibleTile(HDSegError, ValueError):
    pass


class ShapeMismatch(HDSegError, ValueError):
    pass


class EmptyTrainingSet(HDSegError, ValueError):
    pass


class NoPlexusRegions(HDSegError):
    pass


class PlacementFailure(HDSegError):
    pass


class UnsupportedFormat(HDSegError):
    pass


class TruncatedFile(HDSegError):
    pass


class DimensionOverflow(HDSegError):
    pass


class BadMagic(HDSegError):
    pass


class VersionMismatch(HDSegError):
    pass


class CorruptDirectory(HDSegError):
    pass
