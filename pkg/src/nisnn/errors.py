"""Exception hierarchy shared by every module."""


class NisnnError(Exception):
    pass


class DimensionError(NisnnError, ValueError):
    pass


class ConfigError(NisnnError, ValueError):
    pass


class ContractError(NisnnError, ValueError):
    pass


class NumericError(NisnnError, ArithmeticError):
    pass


class IngestError(NisnnError):
    pass


class TransferError(NisnnError):
    pass


class CheckpointError(NisnnError):
    pass
