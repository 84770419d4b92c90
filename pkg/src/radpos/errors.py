"""Exception hierarchy shared by all radpos modules."""


class RadposError(Exception):
    """Base class; the CLI turns these into exit code 1."""


class BundleFormatError(RadposError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SizeMismatchError(RadposError):
    pass


class DegenerateInputError(RadposError):
    pass


class ManifestIntegrityError(RadposError):
    pass


class MissingFileError(RadposError):
    pass


class UndefinedTruthError(RadposError):
    pass


class ConfigError(RadposError):
    pass


class LayoutError(RadposError):
    pass


class MissingLabelError(RadposError):
    pass


class DegenerateTrainingError(RadposError):
    pass


class IncompatibleCountsError(RadposError):
    pass


class DomainError(RadposError):
    pass


class ExtrapolationError(RadposError):
    pass
