"""Exception hierarchy shared by all voxsync modules."""


class VoxsyncError(Exception):
    pass


class DomainError(VoxsyncError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class ConfigurationError(VoxsyncError, ValueError):
    pass


class ShapeError(VoxsyncError, ValueError):
    pass


class EmptyShapeError(VoxsyncError, ValueError):
    pass


class VersionError(VoxsyncError):
    """A stored artifact was written under a different convention version."""


class CorruptFileError(VoxsyncError):
    pass


class ContractError(VoxsyncError, ValueError):
    pass


class TrainingDivergedError(VoxsyncError, FloatingPointError):
    pass
