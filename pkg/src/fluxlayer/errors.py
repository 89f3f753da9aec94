"""Exception hierarchy shared by every layer of the protocol."""


class FluxError(Exception):
    """Base class for all protocol errors."""


class InvalidAmount(FluxError):
    pass


class ZeroAmount(InvalidAmount):
    pass


class AmountOverflow(InvalidAmount):
    pass


class UnknownAccount(FluxError):
    pass


class UnknownAsset(FluxError):
    pass


class UnknownChain(FluxError):
    pass


class InsufficientBalance(FluxError):
    pass
