"""Exception hierarchy shared by every couplet module."""

from __future__ import annotations


class CoupletError(Exception):
    """Base class for all couplet errors."""


# --- topology / config -------------------------------------------------------


class InvalidTopology(CoupletError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid topology: {lines}")


class ConfigError(CoupletError):
    """Base class for configuration parse failures."""


class ConfigSyntaxError(ConfigError):
    def __init__(self, line: int, col: int, expected: str):
        self.line = line
        self.col = col
        self.expected = expected
        super().__init__(f"line {line}, col {col}: expected {expected}")


class DuplicateInstance(ConfigError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate instance {name!r}{where}")


class BadDuration(ConfigError):
    def __init__(self, text: str, line: int | None = None):
        self.text = text
        self.line = line
        super().__init__(f"bad duration {text!r}")


class BadFilter(ConfigError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        self.line = line
        super().__init__(f"bad filter {name!r}")


class UnknownInstance(ConfigError):
    """Reference to an instance that is not declared.

    Raised both by the config parser and by the runtime registry.
    """

    def __init__(self, name: str, line: int | None = None):
        self.name = name
        self.line = line
        super().__init__(f"unknown instance {name!r}")


# --- codec -------------------------------------------------------------------


class CodecError(CoupletError):
    pass


class Malformed(CodecError):
    pass


class BadMagic(CodecError):
    pass


class UnknownOpcode(CodecError):
    pass


class TooLarge(CodecError):
    pass


# --- transport ---------------------------------------------------------------


class Aborted(CoupletError):
    """The simulation is shutting down because of a failure elsewhere."""

    def __init__(self, reason: str = "aborted"):
        self.reason = reason
        super().__init__(reason)


class ChannelClosed(CoupletError):
    pass


class QueueClosed(CoupletError):
    pass


class PeerUnreachable(CoupletError):
    pass


# --- runtime -----------------------------------------------------------------


class DuplicateRegistration(CoupletError):
    pass


class NotRegistered(CoupletError):
    pass


class BadHandshake(CoupletError):
    pass


class StartupError(CoupletError):
    pass


# --- kernel ------------------------------------------------------------------


class PhaseViolation(CoupletError):
    pass


class UnconnectedPort(CoupletError):
    pass


class TimestampRegression(CoupletError):
    def __init__(self, port: str, last: float, t: float):
        self.port = port
        self.last = last
        self.t = t
        super().__init__(f"port {port}: timestamp {t} < last seen {last}")


class TypeMismatch(CoupletError):
    pass


# --- relay / bench -----------------------------------------------------------


class NoRoute(CoupletError):
    pass


class DegenerateInput(CoupletError):
    pass


class RankDeficient(CoupletError):
    pass
