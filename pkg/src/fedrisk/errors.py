"""Exception hierarchy shared by every fedrisk module."""

from __future__ import annotations


class FedRiskError(Exception):
    """Base class for all errors raised by fedrisk."""


class ConfigError(FedRiskError, ValueError):
    """Invalid configuration or argument combination.

    ``problems`` holds every violation found, so callers can report them
    together instead of one at a time.
    """

    def __init__(self, problems: str | list[str]):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericFault(FedRiskError, ArithmeticError):
    """A NaN or infinity appeared in a computation."""

    def __init__(self, layer: str, detail: str = "non-finite value"):
        self.layer = layer
        super().__init__(f"{detail} in layer '{layer}'")


class ProtocolError(FedRiskError):
    """Messages that violate the federation protocol (mixed rounds, bad layouts...)."""


class FramingError(ProtocolError):
    """A wire frame could not be decoded."""


class PayloadError(ProtocolError):
    """A sparse payload is internally inconsistent."""


class ParseError(FedRiskError, ValueError):
    def __init__(self, line: int, detail: str):
        self.line = line
        super().__init__(f"line {line}: {detail}")


class SchemaError(FedRiskError, ValueError):
    pass


class MetricUndefined(FedRiskError, ValueError):
    """The metric has no value for the given input (e.g. AUC with one class)."""


class RoundAborted(FedRiskError):
    """A client failed during local training."""

    def __init__(self, round_: int, client_id: int, cause: Exception):
        self.round = round_
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"round {round_} aborted by client {client_id}: {cause}")
