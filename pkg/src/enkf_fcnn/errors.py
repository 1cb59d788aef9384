"""Exception hierarchy shared by the library and the command-line front end.

Every exception carries the process exit code the CLI maps it to.
"""


class ToolkitError(Exception):
    exit_code = 1


class ContractViolation(ToolkitError, ValueError):
    """Raised when an operation is called with inputs outside its contract."""

    exit_code = 2


class DegenerateEnsembleError(ToolkitError, ValueError):
    exit_code = 4


class SingularInnovationCovarianceError(ToolkitError, ArithmeticError):
    exit_code = 4


class NumericalBlowupError(ToolkitError, ArithmeticError):
    """A model state left the finite range during time integration."""

    exit_code = 4

    def __init__(self, time_index, member=None, trajectory=None, detail=""):
        self.time_index = time_index
        self.member = member
        self.trajectory = trajectory
        where = f"step {time_index}"
        if member is not None:
            where += f", member {member}"
        if trajectory is not None:
            where += f", trajectory {trajectory}"
        msg = f"numerical blowup at {where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TrainingError(ToolkitError):
    exit_code = 5


class TrainingDivergedError(TrainingError, ArithmeticError):
    def __init__(self, epoch, loss=float("nan")):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class ConfigError(ToolkitError, ValueError):
    """Invalid configuration document. ``field`` names the offending entry."""

    exit_code = 2

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = ""
        if field is not None:
            prefix += f"{field}: "
        if line is not None:
            prefix = f"line {line}: " + prefix
        super().__init__(prefix + message)


class ProvenanceError(ToolkitError):
    exit_code = 3


class ArtifactFormatError(ToolkitError, ValueError):
    """Base class for unreadable artifact files."""

    exit_code = 2


class VersionMismatchError(ArtifactFormatError):
    pass


class ShapeMismatchError(ArtifactFormatError):
    pass


class CorruptFileError(ArtifactFormatError):
    pass
