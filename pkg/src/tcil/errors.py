"""Exception hierarchy.

Every error carries a short ``code`` so the command line can print a single
machine-parsable line before the human message.
"""

from __future__ import annotations


class TCILError(Exception):
    code = "TCIL_ERROR"


class InputError(TCILError, ValueError):
    code = "INPUT_ERROR"


class ConfigError(TCILError, ValueError):
    code = "CONFIG_ERROR"


class ProtocolConfigError(ConfigError):
    code = "PROTOCOL_CONFIG_ERROR"


class StateError(TCILError, RuntimeError):
    code = "STATE_ERROR"


class DegenerateWeightsError(TCILError, ArithmeticError):
    code = "DEGENERATE_WEIGHTS"


class ResumeError(TCILError, RuntimeError):
    code = "RESUME_ERROR"


class IntegrityError(TCILError, RuntimeError):
    code = "INTEGRITY_ERROR"


class InvariantViolation(TCILError, AssertionError):
    code = "INVARIANT_VIOLATION"
