"""Exception hierarchy shared by all sltbench modules."""


class SLTError(Exception):
    """Base class for every error raised by sltbench."""


class ConfigError(SLTError, ValueError):
    pass


# corpus
class ManifestError(SLTError, ValueError):
    pass


class MissingSplit(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class MissingFrames(ManifestError):
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(f"missing frames for ids: {', '.join(self.ids)}")


class UnsupportedLanguage(SLTError, ValueError):
    pass


# model
class ShapeError(SLTError, ValueError):
    pass


class MissingGroup(SLTError, KeyError):
    def __init__(self, group):
        self.group = group
        super().__init__(group)

    def __str__(self):
        return f"checkpoint has no parameter group {self.group!r}"


class ShapeMismatch(SLTError, ValueError):
    def __init__(self, group, detail=""):
        self.group = group
        msg = f"shape mismatch in group {group!r}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class CheckpointFormatError(SLTError, ValueError):
    pass


# objectives
class DegenerateBatch(SLTError, ValueError):
    pass


class NumericalError(SLTError, ArithmeticError):
    pass


class LengthError(SLTError, ValueError):
    pass


# trainer
class DivergenceAbort(SLTError, RuntimeError):
    pass


# metrics
class LengthMismatch(SLTError, ValueError):
    pass


class EmptyCorpus(SLTError, ValueError):
    pass


# cli
class IncompleteRun(SLTError, RuntimeError):
    pass
