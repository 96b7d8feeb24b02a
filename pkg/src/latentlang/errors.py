"""Exception hierarchy shared by all modules."""


class LatentLangError(Exception):
    pass


class ConfigError(LatentLangError, ValueError):
    pass


class MalformedMessage(LatentLangError, ValueError):
    pass


class InvalidPrefix(LatentLangError, ValueError):
    pass


class DegenerateEvidence(LatentLangError, ArithmeticError):
    """Observation has probability zero under every intention."""


class EmptyCorpus(LatentLangError, ValueError):
    pass


class SpecMismatch(LatentLangError, ValueError):
    pass


class FormatError(LatentLangError, ValueError):
    pass


class VersionError(LatentLangError, ValueError):
    pass


class HorizonTooLarge(LatentLangError, ValueError):
    pass


class ZeroProbabilityPath(LatentLangError, ValueError):
    pass


class CorpusFormatError(LatentLangError, ValueError):
    """A corpus text line could not be parsed."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
